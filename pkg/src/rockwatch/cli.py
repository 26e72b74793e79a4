"""Command-line entry point: ``rockwatch <subcommand> ...``.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from pathlib import Path

from . import __version__

logger = logging.getLogger("rockwatch")

CONFIG_ENV = "ROCKWATCH_CONFIG"


class UsageError(Exception):
    pass


class OperationalError(Exception):
    pass


def _pixel_pair(text: str) -> tuple[float, float]:
    try:
        u, v = (float(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected U,V (two comma-separated numbers), got {text!r}") from None
    return u, v


def _emit(args, payload: dict, lines: list[str]):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _write_json(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_config(args, required: bool):
    from .pipeline import PipelineConfig, load_config

    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        if required:
            raise UsageError(f"--config is required (or set {CONFIG_ENV})")
        return PipelineConfig().validate()
    if not Path(path).is_file():
        raise OperationalError(f"config file not found: {path}")
    return load_config(path)


# -- subcommands ------------------------------------------------------------

def cmd_run(args) -> int:
    from .pipeline import run

    cfg = _load_config(args, required=True)
    if args.frames_dir:
        cfg.frames.path = args.frames_dir
    if args.idle_timeout is not None:
        cfg.frames.idle_timeout_s = args.idle_timeout
    if args.event_log:
        cfg.event_log_path = args.event_log
    status = run(cfg)
    _emit(args, {"status": status, "event_log": cfg.event_log_path},
          [f"run finished with status {status}; events in {cfg.event_log_path}"])
    return status


def cmd_solve(args) -> int:
    from .geometry import PixelPoint, normalize, pixel_to_plane, solve_pan_tilt

    geo = _load_config(args, required=False).geometry()
    px = PixelPoint(*args.target_px)
    plane = pixel_to_plane(geo, px)
    pose = solve_pan_tilt(geo, plane, depth_m=args.depth)
    n_pan, n_tilt = normalize(geo, pose)
    payload = {
        "target_px": list(px),
        "plane_m": list(plane),
        "phi_deg": pose.phi_deg,
        "theta_deg": pose.theta_deg,
        "normalized": [n_pan, n_tilt],
    }
    _emit(args, payload, [
        f"phi={pose.phi_deg:.6f} deg",
        f"theta={pose.theta_deg:.6f} deg",
        f"normalized={n_pan:.6f},{n_tilt:.6f}",
    ])
    return 0


def cmd_simulate(args) -> int:
    from .geometry import normalize
    from .tracking import FlatScene, track

    cfg = _load_config(args, required=False)
    geo = cfg.geometry()
    params = cfg.tracking.params()
    depth = args.depth if args.depth is not None else geo.mount_height_m
    scene = FlatScene(geo, depth, noise_px=args.noise_px, seed=args.seed, render=args.render, params=params)
    state = track(geo, params, args.target_px, scene)
    n = normalize(geo, state.pose)
    payload = {**state.to_dict(), "surface_depth_m": depth, "normalized": list(n),
               "firings": len(state.history)}
    err = "n/a" if payload["last_error_px"] is None else f"{state.last_error_px:.3f} px"
    lines = [
        f"status={state.status}",
        f"iterations={state.iteration}",
        f"final_error={err}",
        f"pose=phi {state.pose.phi_deg:.4f} deg, theta {state.pose.theta_deg:.4f} deg",
    ]
    if state.detail:
        lines.append(f"detail={state.detail}")
    if args.plot:
        from .plotting import plot_tracking

        payload["plot"] = str(plot_tracking(state, args.plot))
        lines.append(f"plot={payload['plot']}")
    _emit(args, payload, lines)
    return 0


def cmd_dedup(args) -> int:
    from .dedup import scan

    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    manifest = scan(args.dir, args.threshold)
    if args.out:
        _write_json(args.out, manifest)
    dup_groups = [g for g in manifest["groups"] if len(g["members"]) > 1]
    drops = sum(len(g["drop"]) for g in manifest["groups"])
    lines = [f"{manifest['image_count']} images, {len(dup_groups)} duplicate group(s), {drops} to drop"]
    for g in dup_groups:
        lines.append(f"  keep {g['representative']}  drop {' '.join(g['drop'])}")
    for e in manifest["errors"]:
        lines.append(f"  error {e['path']}: {e['error']}")
    _emit(args, manifest, lines)
    return 0


def cmd_slice(args) -> int:
    from .annotations import load_annotations, save_annotations
    from .imaging import load_image, save_image
    from .slicing import plan_tiles, slice_annotations, slice_image

    image = load_image(args.image)
    h, w = image.shape[:2]
    grid = plan_tiles(w, h, args.patch, pad=args.pad)
    anns = []
    if args.ann:
        records = load_annotations(args.ann)
        key = _find_record(records, args.image)
        anns = records.get(key, []) if key else []
    out_dir = Path(args.out_dir) if args.out_dir else None
    stem = Path(args.image).stem
    tiles_out, per_tile = [], slice_annotations(anns, grid, args.min_visibility)
    crops = slice_image(image, grid)
    records_out = {}
    for tile, crop, tile_boxes in zip(grid.tiles, crops, per_tile):
        name = f"{stem}_r{tile.row}_c{tile.col}.png"
        if out_dir is not None:
            save_image(out_dir / name, crop)
        records_out[name] = tile_boxes
        tiles_out.append({"name": name, "x0": tile.x0, "y0": tile.y0, "w": tile.w, "h": tile.h,
                          "row": tile.row, "col": tile.col, "boxes": len(tile_boxes)})
    if out_dir is not None:
        save_annotations(out_dir / "annotations.json", records_out)
    payload = {"source": {"width": w, "height": h}, "patch": grid.patch, "overlap_x_px": grid.overlap_x_px,
               "overlap_y_px": grid.overlap_y_px, "tiles": tiles_out}
    lines = [f"{len(grid.tiles)} patches ({grid.rows} rows x {grid.cols} cols), "
             f"overlap x {grid.overlap_x_px}px, y {grid.overlap_y_px}px"]
    lines += [f"  {t['name']}\t{t['x0']}\t{t['y0']}\t{t['boxes']} box(es)" for t in tiles_out]
    if args.plot:
        from .plotting import plot_tiles

        payload["plot"] = str(plot_tiles(grid, args.plot, anns))
        lines.append(f"plot={payload['plot']}")
    _emit(args, payload, lines)
    return 0


def _find_record(records: dict, image_path: str):
    p = Path(image_path)
    for key in records:
        if key == image_path or Path(key).name == p.name:
            return key
    return None


def cmd_augment(args) -> int:
    from .annotations import load_annotations, save_annotations
    from .augment import AnnotatedImage, AugmentConfig, augment_sample, config_dict
    from .imaging import is_image_path, load_image, save_image

    if args.count < 1:
        raise UsageError("--count must be at least 1")
    src = Path(args.dir)
    if not src.is_dir():
        raise OperationalError(f"not a directory: {src}")
    if args.ann:
        records = load_annotations(args.ann)
    else:
        records = {p.relative_to(src).as_posix(): [] for p in sorted(src.rglob("*")) if is_image_path(p)}
    cfg = AugmentConfig(seed=args.seed)
    out_dir = Path(args.out_dir)
    out_records, provenance = {}, []
    for i, (name, dets) in enumerate(records.items()):
        path = src / name
        if not path.is_file():
            raise OperationalError(f"annotated image not found: {path}")
        base = AnnotatedImage(load_image(path), list(dets))
        for j in range(args.count):
            index = i * args.count + j
            sample, params = augment_sample(base, cfg, index)
            out_name = f"{Path(name).stem}_aug{j:04d}.png"
            save_image(out_dir / out_name, sample.image)
            out_records[out_name] = sample.boxes
            provenance.append({"output": out_name, "source": name, "params": params})
    save_annotations(out_dir / "annotations.json", out_records)
    _write_json(out_dir / "provenance.json", {"config": config_dict(cfg), "samples": provenance})
    payload = {"inputs": len(records), "outputs": len(out_records), "out_dir": str(out_dir),
               "boxes_dropped": sum(p["params"]["boxes_dropped"] for p in provenance)}
    _emit(args, payload, [f"wrote {len(out_records)} augmented image(s) from {len(records)} input(s) to {out_dir}"])
    return 0


def cmd_eval(args) -> int:
    from .annotations import load_annotations
    from .metrics import evaluate

    if not 0.0 < args.iou <= 1.0:
        raise UsageError("--iou must lie in (0, 1]")
    report = evaluate(load_annotations(args.pred), load_annotations(args.gt), args.iou, args.min_score)
    lines = [
        f"P={report['precision']:.4f} R={report['recall']:.4f} AP={report['ap']:.4f}",
        f"TP={report['true_positives']} FP={report['false_positives']} FN={report['false_negatives']} "
        f"images={report['images']}",
    ]
    for name, b in report["recall_by_size"].items():
        r = "n/a" if b["recall"] is None else f"{b['recall']:.4f}"
        lines.append(f"  recall[{name}]={r} (gt {b['ground_truth']})")
    if args.report_dir:
        from .plotting import plot_pr_curve

        out = Path(args.report_dir)
        _write_json(out / "report.json", report)
        with open(out / "pr_curve.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write("score,recall,precision\n")
            for p in report["pr_curve"]:
                fh.write(f"{p['score']!r},{p['recall']!r},{p['precision']!r}\n")
        plot_pr_curve(report, out / "pr_curve.png")
        lines.append(f"report written to {out}")
    _emit(args, report, lines)
    return 0


def cmd_detect(args) -> int:
    from .annotations import save_annotations
    from .detector import ExternalDetector, StubDetector
    from .imaging import load_image
    from .slicing import sliced_inference

    image = load_image(args.image)
    if args.detector == "external":
        if not args.cmd:
            raise UsageError("--cmd is required with --detector external")
        detector = ExternalDetector(shlex.split(args.cmd), args.timeout_ms / 1000.0)
    else:
        detector = StubDetector()
    try:
        if args.no_slice:
            dets = detector.detect(image)
        else:
            dets = sliced_inference(image, detector, args.patch, args.iou, pad=True)
    finally:
        if hasattr(detector, "close"):
            detector.close()
    if args.out:
        save_annotations(args.out, {Path(args.image).name: dets}, with_score=True)
    payload = {"image": args.image, "detections": [d.to_dict() for d in dets]}
    lines = [f"{len(dets)} detection(s)"]
    lines += [f"  x={d.x:.1f} y={d.y:.1f} w={d.w:.1f} h={d.h:.1f} score={d.score:.3f} class={d.class_id}"
              for d in dets]
    _emit(args, payload, lines)
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rockwatch", description="Rock detection and laser designation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--json", action="store_true", help="print machine-readable JSON instead of text")
        p.set_defaults(func=func)
        return p

    def config_arg(p, required_note=""):
        p.add_argument("--config", metavar="F",
                       help=f"pipeline config JSON{required_note}; defaults to ${CONFIG_ENV}")

    p = add("run", cmd_run, "Run the live detection loop on frames appearing in a directory.")
    config_arg(p, " (required)")
    p.add_argument("--frames-dir", metavar="D", help="override frames.path from the config")
    p.add_argument("--idle-timeout", type=float, metavar="S", help="stop after S seconds without a new frame")
    p.add_argument("--event-log", metavar="F", help="override event_log_path from the config")

    p = add("solve", cmd_solve, "Pan/tilt angles that aim the laser at a pixel on the reference plane.")
    config_arg(p)
    p.add_argument("--target-px", type=_pixel_pair, required=True, metavar="U,V", help="target pixel")
    p.add_argument("--depth", type=float, metavar="M", help="surface depth in metres (default: mount height)")

    p = add("simulate", cmd_simulate, "Run closed-loop tracking against a simulated flat surface.")
    config_arg(p)
    p.add_argument("--target-px", type=_pixel_pair, required=True, metavar="U,V", help="target pixel")
    p.add_argument("--depth", type=float, metavar="M", help="true surface depth in metres (default: mount height)")
    p.add_argument("--noise-px", type=float, default=0.0, metavar="P", help="uniform dot noise amplitude in pixels")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--render", action="store_true", help="render frames and detect the dot instead of projecting")
    p.add_argument("--plot", metavar="PNG", help="write a figure of the dot trajectory")

    p = add("dedup", cmd_dedup, "Group near-duplicate images by difference hash.")
    p.add_argument("--dir", required=True, metavar="D", help="image directory (searched recursively)")
    p.add_argument("--threshold", type=float, default=0.98, help="similarity threshold (default 0.98)")
    p.add_argument("--out", metavar="M", help="write the keep/drop manifest JSON here")

    p = add("slice", cmd_slice, "Cut an image (and its annotations) into fixed-size patches.")
    p.add_argument("--image", required=True, metavar="I", help="input image")
    p.add_argument("--patch", type=int, default=640, help="patch size in pixels (default 640)")
    p.add_argument("--ann", metavar="A", help="annotation JSON containing a record for the image")
    p.add_argument("--out-dir", metavar="O", help="write patches and annotations.json here")
    p.add_argument("--min-visibility", type=float, default=0.25,
                   help="keep a clipped box when this fraction of it is inside the patch (default 0.25)")
    p.add_argument("--pad", action="store_true", help="allow images smaller than the patch (edge padding)")
    p.add_argument("--plot", metavar="PNG", help="write a figure of the patch layout")

    p = add("augment", cmd_augment, "Write augmented copies of annotated images.")
    p.add_argument("--dir", required=True, metavar="D", help="input image directory")
    p.add_argument("--ann", metavar="A", help="annotation JSON; image names are relative to --dir")
    p.add_argument("--count", type=int, default=1, metavar="N", help="augmented samples per input image")
    p.add_argument("--seed", type=int, default=0, metavar="S", help="random seed")
    p.add_argument("--out-dir", required=True, metavar="O",
                   help="output directory for images, annotations.json and provenance.json")

    p = add("eval", cmd_eval, "Precision, recall and AP of predictions against ground truth.")
    p.add_argument("--pred", required=True, metavar="P", help="prediction annotation JSON (with scores)")
    p.add_argument("--gt", required=True, metavar="G", help="ground-truth annotation JSON")
    p.add_argument("--iou", type=float, default=0.5, help="IoU threshold for a match (default 0.5)")
    p.add_argument("--min-score", type=float, default=0.0, help="score cutoff for the P/R operating point")
    p.add_argument("--report-dir", metavar="R", help="write report.json, pr_curve.csv and pr_curve.png here")

    p = add("detect", cmd_detect, "Run a detector on one image with sliced inference.")
    p.add_argument("--image", required=True, metavar="I", help="input image")
    p.add_argument("--detector", choices=("stub", "external"), default="stub", help="detector backend")
    p.add_argument("--cmd", metavar="C", help="command line of the external detector child")
    p.add_argument("--timeout-ms", type=float, default=2000.0, help="external detector response timeout")
    p.add_argument("--patch", type=int, default=640, help="patch size in pixels (default 640)")
    p.add_argument("--iou", type=float, default=0.5, help="NMS IoU threshold for merging (default 0.5)")
    p.add_argument("--no-slice", action="store_true", help="run the detector on the whole image")
    p.add_argument("--out", metavar="F", help="write detections as annotation JSON")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    from .annotations import AnnotationError
    from .geometry import GeometryError
    from .pipeline import ConfigError
    from .slicing import DetectorError, SlicingError

    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rockwatch {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OperationalError, OSError, ConfigError, AnnotationError, GeometryError, SlicingError,
            DetectorError, ValueError) as exc:
        print(f"rockwatch {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

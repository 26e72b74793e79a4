"""Rock detection on an olive intake belt, with a pan/tilt laser to point at what was found."""

__version__ = "0.1.0"

"""Dynamic surfaces represented through a learned canonical coordinate space."""

__version__ = "0.1.0"

"""One-stage prunability search for a toy vision transformer supernet."""

__version__ = "0.1.0"

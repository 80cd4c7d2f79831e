"""Two-stage inference of directed neural coupling from simulated BOLD signals."""

__version__ = "0.1.0"

"""In-context few-shot molecular property prediction, built from scratch."""

__version__ = "0.1.0"

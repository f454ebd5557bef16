"""History-augmented collaborative filtering for temporal implicit feedback."""

__version__ = "0.1.0"

"""Image clarity/complexity classifiers: training, artifacts, HTTP serving."""

__version__ = "0.1.0"

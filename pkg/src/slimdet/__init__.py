"""slimdet: ADMM-based structured pruning for small convolutional detectors."""

__version__ = "0.1.0"

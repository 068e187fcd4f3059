"""Self-regulating inference for stochastic classifiers on streaming signals."""

__version__ = "0.1.0"

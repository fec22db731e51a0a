"""Split federated learning simulator with gradient-query model-extraction attacks."""

__version__ = "0.1.0"

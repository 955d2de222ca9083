"""Lab-result pretraining plugged into sequential EHR diagnosis models."""

__version__ = "0.1.0"

"""Non-Parametric Transformers: attention between datapoints on tabular data."""

__version__ = "0.1.0"

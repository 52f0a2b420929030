"""Low-overhead configuration tuning for multi-query SQL workloads."""

__version__ = "0.1.0"

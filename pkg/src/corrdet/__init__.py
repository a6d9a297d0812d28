"""Few-shot shape detection with correlational multi-class support aggregation."""

__version__ = "0.1.0"

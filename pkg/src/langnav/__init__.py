"""Language-guided navigation on a deterministic 2D semantic simulator."""

__version__ = "0.1.0"

"""Heart-rate estimation from PPG conditioned on past heart-rate dynamics."""

__version__ = "0.1.0"

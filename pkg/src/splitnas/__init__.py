"""Joint neural architecture search and multi-split deployment over mobile edge networks."""

__version__ = "0.1.0"

"""Cross-element combinatorial creative selection."""

__version__ = "0.1.0"

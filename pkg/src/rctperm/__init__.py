"""Trial simulation and assignment-permutation estimators for index-based allocation policies."""

__version__ = "0.1.0"

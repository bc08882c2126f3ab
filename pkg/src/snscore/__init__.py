"""Self-normalized score-based tests for parameter heterogeneity in two-level linear mixed models."""

__version__ = "0.1.0"

"""Graph-aware alignment of collaborative signal for ID-based sequential recommendation, at toy scale."""

__version__ = "0.1.0"

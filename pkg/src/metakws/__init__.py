"""Few-shot spoken term classification with MAML (N+M-way, K-shot)."""

__version__ = "0.1.0"

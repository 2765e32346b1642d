"""One-shot sparsity mask rebuilding for small transformer blocks."""

__version__ = "0.1.0"

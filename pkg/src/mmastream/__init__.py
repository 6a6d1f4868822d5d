"""Streaming sequence transduction with monotonic multihead attention and
head-synchronous beam search, built on a small numpy autodiff engine."""

__version__ = "0.1.0"

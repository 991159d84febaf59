"""Continual invariant risk minimization with a small numpy autodiff engine."""

__version__ = "0.1.0"

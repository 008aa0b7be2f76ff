"""Multi-level modeling-unit speech recognition on a NumPy autodiff engine."""

__version__ = "0.1.0"

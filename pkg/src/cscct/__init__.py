"""Class-incremental learning on tabular features with a small numpy autodiff engine."""

__version__ = "0.1.0"

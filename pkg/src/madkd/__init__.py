"""Data-free knowledge distillation with an EMA generator, on a numpy autodiff core."""

__version__ = "0.1.0"

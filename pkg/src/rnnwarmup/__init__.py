"""Multistability diagnostics and warmup pre-training for recurrent networks."""

__version__ = "0.1.0"

from . import autodiff, cells, kernels  # noqa: F401

"""Sequence kernels with a compiled core and a numpy fallback.

The compiled extension is picked at import when available; everything
else in the package goes through :func:`get` so the two backends are
interchangeable (``benchmarks/backend_bench.py`` compares them).
"""

from . import reference

try:
    from . import _fused as fused

    HAVE_FUSED = True
except ImportError:
    fused = None
    HAVE_FUSED = False

_BACKENDS = {"numpy": reference}
if HAVE_FUSED:
    _BACKENDS["cython"] = fused

_active = fused if HAVE_FUSED else reference


def available_backends():
    return sorted(_BACKENDS)


def active_backend():
    return _active.NAME


def set_backend(name):
    """Switch the process-wide backend; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    prev = _active.NAME
    _active = _BACKENDS[name]
    return prev


def get(name=None):
    if name is None:
        return _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    return _BACKENDS[name]

"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy twin takes over. ``VPP_BACKEND=python`` forces the fallback and
``VPP_THREADS`` caps the OpenMP worker count of the compiled path.
"""
import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on the build
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled


def available():
    return sorted(_BACKENDS)


def get(name=None):
    """Return the kernel module called ``name`` (default: env choice, else compiled if built)."""
    if name is None:
        name = os.environ.get("VPP_BACKEND", "compiled" if _compiled is not None else "python")
    if name not in _BACKENDS:
        if name == "compiled":
            log.warning("compiled kernels not built, using numpy fallback")
            return _kernels_py
        raise ValueError(f"unknown backend {name!r}; available: {available()}")
    return _BACKENDS[name]


def num_threads():
    raw = os.environ.get("VPP_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1

"""Kernel backend selection.

The compiled extension is used when it was built; ``PROPSPLAT_BACKEND=python``
forces the NumPy fallback. ``PROPSPLAT_THREADS`` sets the OpenMP thread count
for the compiled kernels (default 1).
"""

import os

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_BACKENDS = {"python": _fallback}
if _core is not None:
    _BACKENDS["cython"] = _core

_requested = os.environ.get("PROPSPLAT_BACKEND", "").strip().lower()
if _requested and _requested not in _BACKENDS:
    raise ImportError(f"kernel backend {_requested!r} is not available; have {sorted(_BACKENDS)}")
DEFAULT_BACKEND = _requested or ("cython" if _core is not None else "python")
NUM_THREADS = int(os.environ.get("PROPSPLAT_THREADS", "1"))


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get(backend: str | None = None):
    name = backend or DEFAULT_BACKEND
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown kernel backend {name!r}; have {sorted(_BACKENDS)}") from None

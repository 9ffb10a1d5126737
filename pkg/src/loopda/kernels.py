"""Backend selection for the model stepping kernels.

The compiled extension is preferred. Set ``LOOPDA_PURE_PYTHON=1`` to force
the numpy fallback, or call :func:`set_backend` at runtime.
"""
import os

from . import _pykernels

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _pykernels}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

if os.environ.get("LOOPDA_PURE_PYTHON") == "1" or _compiled is None:
    _active = "python"
else:
    _active = "cython"

LORENZ63 = _pykernels.LORENZ63
EHRHARD_MULLER = _pykernels.EHRHARD_MULLER
SCHEMES = {"euler": _pykernels.EULER, "rk2": _pykernels.RK2}


def available():
    return sorted(_BACKENDS)


def backend():
    """Name of the backend currently used by :mod:`loopda.models`."""
    return _active


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available()}")
    _active = name


def get(name=None):
    return _BACKENDS[name or _active]

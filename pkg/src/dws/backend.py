"""Kernel backend selection.

Hot numeric kernels exist twice: a numba @njit implementation and a pure
numpy fallback. The active backend is chosen once per process from the
DWS_BACKEND environment variable ("numba" or "numpy"); default is numba
when it imports, numpy otherwise. float64 arrays always take the numpy
path (the numba kernels are compiled for float32 only).
"""

import os

_VALID = ("numba", "numpy")
_active = None


def _detect() -> str:
    name = os.environ.get("DWS_BACKEND", "").strip().lower()
    if name:
        if name not in _VALID:
            raise ValueError(f"DWS_BACKEND must be one of {_VALID}, got {name!r}")
        if name == "numba" and not _numba_available():
            raise RuntimeError("DWS_BACKEND=numba but numba is not importable")
        return name
    return "numba" if _numba_available() else "numpy"


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def backend() -> str:
    """Name of the active kernel backend."""
    global _active
    if _active is None:
        _active = _detect()
    return _active


def set_backend(name: str) -> None:
    """Force a backend (used by tests and the backend benchmark)."""
    global _active
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not _numba_available():
        raise RuntimeError("numba backend requested but numba is not importable")
    _active = name

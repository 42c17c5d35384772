"""Hot numeric kernels, selectable between a numba fast path and pure numpy.

The backend is chosen by the GPTENSOR_BACKEND environment variable ("numba"
or "numpy"). Unset, it defaults to numba when importable, otherwise numpy.
Both backends expose the same functions and must agree numerically; see
tests/test_backends.py and benchmarks/backend_bench.py.
"""

from __future__ import annotations

import os

from . import _numpy

try:
    from . import _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _numba = None
    HAVE_NUMBA = False

ENV_VAR = "GPTENSOR_BACKEND"
_BACKENDS = {"numpy": _numpy}
if HAVE_NUMBA:
    _BACKENDS["numba"] = _numba


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def default_backend_name() -> str:
    name = os.environ.get(ENV_VAR, "").strip().lower()
    if name:
        if name not in _BACKENDS:
            raise ValueError(
                f"{ENV_VAR}={name!r} not available; choose from {available_backends()}"
            )
        return name
    return "numba" if HAVE_NUMBA else "numpy"


def get_backend(name: str | None = None):
    """Return the backend module. With name=None the environment decides."""
    return _BACKENDS[name if name is not None else default_backend_name()]


__all__ = [
    "ENV_VAR",
    "HAVE_NUMBA",
    "available_backends",
    "default_backend_name",
    "get_backend",
]

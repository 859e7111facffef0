"""Kernel backend selection.

Every hot path-stepping kernel in :mod:`exitlab.kernels` exists twice: a
numba ``@njit`` version and a pure-numpy twin that consumes the same
pre-drawn noise arrays and performs arithmetic in the same order, so the
two backends produce bit-identical trajectories.

The active backend is chosen once at import time from the environment
variable ``EXITLAB_BACKEND``:

* ``"numba"``  force the jit kernels (raises if numba is missing),
* ``"numpy"``  force the pure-numpy fallback,
* unset        use numba when importable, numpy otherwise.

Individual simulation calls may still override the choice with their
``backend=`` argument.
"""

from __future__ import annotations

import os

_ENV_VAR = "EXITLAB_BACKEND"

try:
    from numba import njit  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via EXITLAB_BACKEND=numpy
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _resolve_default() -> str:
    choice = os.environ.get(_ENV_VAR, "").strip().lower()
    if choice in ("numba", "numpy"):
        if choice == "numba" and not HAS_NUMBA:
            raise RuntimeError(
                f"{_ENV_VAR}=numba requested but numba is not importable"
            )
        return choice
    if choice:
        raise RuntimeError(f"unrecognized {_ENV_VAR}={choice!r}")
    return "numba" if HAS_NUMBA else "numpy"


_DEFAULT_BACKEND = _resolve_default()


def default_backend() -> str:
    """Return the backend name selected at import time."""
    return _DEFAULT_BACKEND


def resolve_backend(backend: str | None) -> str:
    """Validate a per-call override, falling back to the import-time choice."""
    if backend is None:
        return _DEFAULT_BACKEND
    backend = backend.lower()
    if backend not in ("numba", "numpy"):
        raise ValueError(f"backend must be 'numba' or 'numpy', got {backend!r}")
    if backend == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return backend

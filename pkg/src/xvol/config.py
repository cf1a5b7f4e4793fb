"""Global scalar-precision configuration.

Verification suites (finite-difference checks) need 64-bit headroom while
training runs in 32-bit. Precision is selected once per process, either
through the XVOL_PRECISION environment variable ("f32" or "f64") or with
:func:`set_precision`.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

_PRECISIONS = {"f32": np.float32, "f64": np.float64}

_current = os.environ.get("XVOL_PRECISION", "f64")
if _current not in _PRECISIONS:
    raise ValueError(f"XVOL_PRECISION must be one of {sorted(_PRECISIONS)}, got {_current!r}")


def set_precision(name: str) -> None:
    global _current
    if name not in _PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}, got {name!r}")
    _current = name


def precision() -> str:
    return _current


def dtype() -> type:
    """The numpy scalar type for the active precision."""
    return _PRECISIONS[_current]


@contextmanager
def precision_context(name: str):
    """Temporarily switch precision (used by test suites)."""
    prev = _current
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)

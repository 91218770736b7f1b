"""Hot kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import from the ``HLAB_NUMBA`` environment
variable: ``0``/``false``/``off`` forces numpy, anything else uses numba when
it imports. ``set_backend`` switches at runtime (tests, benchmarks).
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from . import numpy_impl
from .layout import ANGULAR, CONSTANT, NSTATE, SAITO, WAVEGUIDE

try:
    from . import numba_impl
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba_impl = None

__all__ = [
    "ANGULAR",
    "CONSTANT",
    "NSTATE",
    "SAITO",
    "WAVEGUIDE",
    "available_backends",
    "get_backend",
    "index_eval",
    "rk4_final",
    "rk4_record",
    "set_backend",
    "use_backend",
]


def _env_default() -> str:
    flag = os.environ.get("HLAB_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "off", "no") or numba_impl is None:
        return "numpy"
    return "numba"


_backend = _env_default()


def available_backends() -> list[str]:
    return ["numpy"] if numba_impl is None else ["numba", "numpy"]


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in available_backends():
        raise ValueError(f"unknown or unavailable backend {name!r}")
    _backend = name


@contextmanager
def use_backend(name: str):
    old = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(old)


def index_eval(kind: int, prm: np.ndarray, x1, x2):
    """n, dn/dx1, dn/dx2, and Hessian entries (h11, h12, h22) at the points."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if _backend == "numba":
        x1, x2 = np.broadcast_arrays(x1, x2)
        shape = x1.shape
        out = numba_impl.index_eval(
            kind, prm, np.ascontiguousarray(x1), np.ascontiguousarray(x2)
        )
        return tuple(out[j].reshape(shape) for j in range(6))
    return numpy_impl.index_eval(kind, prm, x1, x2)


def rk4_final(kind, prm, lam, p0, alpha, h, nsteps, ref_c=0.0, r_floor=1.0, ref_max=1):
    """Final ray states; ray ``i`` takes ``nsteps[i]`` coarse steps of size ``h[i]``."""
    alpha = np.ascontiguousarray(alpha, dtype=float)
    h = np.ascontiguousarray(h, dtype=float)
    nsteps = np.ascontiguousarray(nsteps, dtype=np.int64)
    ref = (float(ref_c), float(r_floor), int(ref_max))
    if _backend == "numba":
        return numba_impl.rk4_final(kind, prm, float(lam), float(p0), alpha, h, nsteps, *ref)
    return numpy_impl.rk4_final(kind, prm, lam, p0, alpha, h, nsteps, *ref)


def rk4_record(
    kind, prm, lam, p0, alpha, dt, nsteps, every, safety, ref_c=0.0, r_floor=1.0, ref_max=1
):
    """Sampled trajectories of a fan of rays sharing one coarse step ``dt``."""
    alpha = np.ascontiguousarray(alpha, dtype=float)
    args = (
        float(dt), int(nsteps), int(every), float(safety),
        float(ref_c), float(r_floor), int(ref_max),
    )
    if _backend == "numba":
        return numba_impl.rk4_record(kind, prm, float(lam), float(p0), alpha, *args)
    return numpy_impl.rk4_record(kind, prm, lam, p0, alpha, *args)

"""Backend selection for the OMP hot loop.

The compiled kernel (``mmcdl._omp_ext``) is used when it was built;
otherwise the NumPy kernel in ``mmcdl._omp_py`` takes over. Setting the
environment variable ``MMCDL_BACKEND=python`` forces the fallback at import,
and :func:`set_backend` switches at runtime (tests and benchmarks use it).
"""

import os

from mmcdl import _omp_py

try:
    from mmcdl import _omp_ext
except ImportError:  # extension not built
    _omp_ext = None

STATUS_OK = _omp_py.STATUS_OK
STATUS_TRUNCATED = _omp_py.STATUS_TRUNCATED
STATUS_NO_ATOM = _omp_py.STATUS_NO_ATOM

_IMPLS = {"python": _omp_py.omp_batch}
if _omp_ext is not None:
    _IMPLS["compiled"] = _omp_ext.omp_batch


def available_backends():
    return sorted(_IMPLS)


def _default_backend():
    wanted = os.environ.get("MMCDL_BACKEND", "").strip().lower()
    if wanted:
        if wanted not in _IMPLS:
            raise ImportError(f"MMCDL_BACKEND={wanted!r} is not available; "
                              f"choose from {available_backends()}")
        return wanted
    return "compiled" if "compiled" in _IMPLS else "python"


_active = _default_backend()


def get_backend():
    return _active


def set_backend(name):
    """Select the kernel used by :func:`omp_batch`; returns the previous one."""
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}; choose from {available_backends()}")
    prev, _active = _active, name
    return prev


def omp_batch(D, X, max_atoms, tol, mask=None, threads=1, backend=None):
    impl = _IMPLS[backend or _active]
    return impl(D, X, int(max_atoms), float(tol), mask=mask, threads=int(threads))

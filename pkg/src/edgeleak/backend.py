"""Kernel backend selection.

Hot kernels (convolutions, separable filters, Canny NMS/hysteresis) exist
twice: numba-jitted and pure NumPy. The numba path is the default; setting
``EDGELEAK_NO_NUMBA=1`` in the environment (or calling :func:`set_backend`)
switches to the NumPy fallback. ``benchmarks/bench_kernels.py`` compares the
two. Both paths are individually deterministic, but they are not bit-equal
to each other (different summation orders), so fix the backend when
comparing runs.
"""
from __future__ import annotations

import os

from . import _kernels_numpy

KERNEL_NAMES = (
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "sep_filter_reflect",
    "sep_filter_valid",
    "canny_nms",
    "hysteresis",
)

_impls = {"numpy": _kernels_numpy}
_active_name = "numpy"


def _try_load_numba():
    if "numba" in _impls:
        return True
    try:
        from . import _kernels_numba
    except ImportError:
        return False
    _impls["numba"] = _kernels_numba
    return True


def available_backends() -> tuple[str, ...]:
    _try_load_numba()
    return tuple(sorted(_impls))


def set_backend(name: str) -> None:
    global _active_name
    if name == "numba" and not _try_load_numba():
        raise ValueError("numba backend requested but numba is not importable")
    if name not in _impls:
        raise ValueError(f"unknown backend {name!r}; choose from {sorted(_impls)}")
    _active_name = name


def active_backend() -> str:
    return _active_name


def get_impl(name: str | None = None):
    """Return the kernel module for `name` (default: the active backend)."""
    if name is None:
        return _impls[_active_name]
    if name == "numba":
        _try_load_numba()
    return _impls[name]


def _dispatch(kernel: str):
    def call(*args):
        return getattr(_impls[_active_name], kernel)(*args)

    call.__name__ = kernel
    call.__qualname__ = kernel
    call.__doc__ = getattr(_kernels_numpy, kernel).__doc__
    return call


conv2d_forward = _dispatch("conv2d_forward")
conv2d_backward_input = _dispatch("conv2d_backward_input")
conv2d_backward_weight = _dispatch("conv2d_backward_weight")
sep_filter_reflect = _dispatch("sep_filter_reflect")
sep_filter_valid = _dispatch("sep_filter_valid")
canny_nms = _dispatch("canny_nms")
hysteresis = _dispatch("hysteresis")


def _init_from_env() -> None:
    flag = os.environ.get("EDGELEAK_NO_NUMBA", "").strip().lower()
    if flag in ("1", "true", "yes"):
        set_backend("numpy")
    elif _try_load_numba():
        set_backend("numba")


_init_from_env()

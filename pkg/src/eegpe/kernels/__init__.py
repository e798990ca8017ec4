"""Hot convolution/DFT kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``EEGPE_KERNELS=python``
to force the numpy path. ``use_backend`` switches at runtime (tests and the
benchmark compare both). The DFT always runs through numpy; see ``dft_magnitude``.
"""

import logging
import os
from contextlib import contextmanager

import numpy as np

from . import _reference

log = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _reference}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def _initial_backend():
    requested = os.environ.get("EEGPE_KERNELS", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            log.warning("kernel backend %r unavailable, using python", requested)
            return "python"
        return requested
    return "cython" if "cython" in _BACKENDS else "python"


_active = _initial_backend()


def backend():
    """Name of the active kernel backend."""
    return _active


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active = name


@contextmanager
def use_backend(name):
    prev = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def dwconv2d_forward(x, k):
    return _BACKENDS[_active].dwconv2d_forward(_c(x), _c(k))


def dwconv2d_backward(x, k, gy):
    return _BACKENDS[_active].dwconv2d_backward(_c(x), _c(k), _c(gy))


def conv1d_forward(x, w, stride, pad):
    return _BACKENDS[_active].conv1d_forward(_c(x), _c(w), int(stride), int(pad))


def conv1d_backward(x, w, gy, stride, pad):
    return _BACKENDS[_active].conv1d_backward(_c(x), _c(w), _c(gy), int(stride), int(pad))


def dft_magnitude(x):
    # a BLAS matmul against cached tables beats the compiled direct sum at every
    # patch length we use, so both backends take the numpy path here
    return _reference.dft_magnitude(_c(x))


conv1d_out_len = _reference.conv1d_out_len

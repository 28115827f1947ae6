"""Kernel backend selection.

The compiled extension is used when it imports; set ``DMHASH_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _pykernels

_compiled = None
if os.environ.get("DMHASH_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _pykernels
BACKEND = "cython" if _compiled is not None else "numpy"

gauss_seidel_sweep = _impl.gauss_seidel_sweep
gbe_loss_grad = _impl.gbe_loss_grad
plogp_sum = _impl.plogp_sum
hamming_packed = _impl.hamming_packed


def available_backends():
    names = {"numpy": _pykernels}
    if _compiled is not None:
        names["cython"] = _compiled
    return names


def get_backend(name):
    try:
        return available_backends()[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None

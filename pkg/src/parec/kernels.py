"""Kernel backend selection.

The compiled ``parec._kernels`` module is used when it imports; otherwise the
numpy implementation in ``parec._fallback``. Setting ``PAREC_PURE_PYTHON=1``
forces the fallback.
"""
import os

from . import _fallback

if os.environ.get("PAREC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _fallback

BACKEND = _impl.BACKEND

masked_softmax_fwd = _impl.masked_softmax_fwd
masked_softmax_bwd = _impl.masked_softmax_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
softmax_xent = _impl.softmax_xent
count_greater = _impl.count_greater


def backends():
    """All importable backends, keyed by name (used by tests and benchmarks)."""
    out = {"numpy": _fallback}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        out["cython"] = _kernels
    return out

"""Kernel dispatch.

The compiled extension is used when it was built; otherwise (or when the
``CAPLAB_PURE_PYTHON`` environment variable is set to a non-empty value) the
numpy fallback in :mod:`caplab._pure` is used.  ``BACKEND`` names the choice.
"""
import os

from caplab import _pure

if os.environ.get("CAPLAB_PURE_PYTHON"):
    _impl = _pure
else:
    try:
        from caplab import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _pure

BACKEND = "pure" if _impl is _pure else "cython"

DIAG, DOWN, RIGHT = _pure.DIAG, _pure.DOWN, _pure.RIGHT

rnn_forward = _impl.rnn_forward
rnn_backward = _impl.rnn_backward
decode_free = _impl.decode_free
dtw_accumulate = _impl.dtw_accumulate


def compiled():
    """Return the compiled module, or None if it is not available."""
    try:
        from caplab import _kernels
    except ImportError:
        return None
    return _kernels

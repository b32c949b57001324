"""Hot loss kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports cleanly; setting
``MDMTL_PURE_PYTHON=1`` forces the numpy path. ``BACKEND`` names the active
implementation. Both backends agree to rounding (about 1e-15 relative); runs
are bit-reproducible only within one backend.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MDMTL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        _impl = _ckernels
        BACKEND = "cython"


def _c_double(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _c_index(x):
    return np.ascontiguousarray(x, dtype=np.int_)


def softmax_xent_forward(logits, targets):
    return _impl.softmax_xent_forward(_c_double(logits), _c_index(targets))


def softmax_xent_backward(probs, targets, grad_out):
    return _impl.softmax_xent_backward(
        _c_double(probs), _c_index(targets), _c_double(grad_out)
    )


def triplet_forward(emb, anchor, positive, negative, margin):
    return _impl.triplet_forward(
        _c_double(emb), _c_index(anchor), _c_index(positive), _c_index(negative),
        float(margin),
    )


def triplet_backward(emb, anchor, positive, negative, active, grad_out):
    return _impl.triplet_backward(
        _c_double(emb), _c_index(anchor), _c_index(positive), _c_index(negative),
        np.ascontiguousarray(active, dtype=np.uint8), float(grad_out),
    )


def normalize_rows_forward(x):
    return _impl.normalize_rows_forward(_c_double(x))


def normalize_rows_backward(y, norms, grad_out):
    return _impl.normalize_rows_backward(_c_double(y), _c_double(norms), _c_double(grad_out))


def implementations():
    """Return ``{name: module}`` for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        return out
    out["cython"] = _ckernels
    return out

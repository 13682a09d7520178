"""Backend selection for the hot row/elementwise kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback.  Both are deterministic; they agree to ~1e-14 relative, not
bit-for-bit, so the active backend is recorded in every run manifest.
"""

from __future__ import annotations

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_NAMES = (
    "gelu_forward",
    "gelu_backward",
    "sigmoid_forward",
    "logsumexp_rows",
    "log_softmax_rows",
    "log_softmax_rows_backward",
    "l2_normalize_rows",
    "l2_normalize_rows_backward",
)

BACKEND = "python"
_impl = _kernels_py


def available_backends() -> list[str]:
    return ["compiled", "python"] if _compiled is not None else ["python"]


def set_backend(name: str) -> None:
    global BACKEND, _impl
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _impl = _compiled
    elif name == "python":
        _impl = _kernels_py
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def get_backend() -> str:
    return BACKEND


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def gelu_forward(x):
    return _impl.gelu_forward(_c(x).ravel()).reshape(np.shape(x))


def gelu_backward(x, gy):
    return _impl.gelu_backward(_c(x).ravel(), _c(gy).ravel()).reshape(np.shape(x))


def sigmoid_forward(x):
    return _impl.sigmoid_forward(_c(x).ravel()).reshape(np.shape(x))


def logsumexp_rows(x):
    return _impl.logsumexp_rows(_c(x))


def log_softmax_rows(x):
    return _impl.log_softmax_rows(_c(x))


def log_softmax_rows_backward(y, gy):
    return _impl.log_softmax_rows_backward(_c(y), _c(gy))


def l2_normalize_rows(x):
    return _impl.l2_normalize_rows(_c(x))


def l2_normalize_rows_backward(y, norms, gy):
    return _impl.l2_normalize_rows_backward(_c(y), _c(norms), _c(gy))


set_backend("compiled" if _compiled is not None else "python")

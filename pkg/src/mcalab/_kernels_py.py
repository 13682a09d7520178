"""Pure numpy versions of the row/elementwise kernels in ``_kernels.pyx``.

Signatures and semantics match the compiled module exactly; inputs are
C-contiguous float64 arrays (1-D for elementwise kernels, 2-D for row kernels).
"""

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def gelu_forward(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def gelu_backward(x, gy):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def sigmoid_forward(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logsumexp_rows(x):
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def log_softmax_rows(x):
    return x - logsumexp_rows(x)[:, None]


def log_softmax_rows_backward(y, gy):
    return gy - np.exp(y) * gy.sum(axis=1, keepdims=True)


def l2_normalize_rows(x):
    norms = np.sqrt((x * x).sum(axis=1))
    safe = np.where(norms > 0.0, norms, 1.0)
    return x / safe[:, None], norms


def l2_normalize_rows_backward(y, norms, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return (gy - y * dot) / norms[:, None]

"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op that touches a ``requires_grad`` input records a node (parents plus a
vector-Jacobian closure).  ``backward`` collects the nodes reachable from a
scalar loss into a :class:`Tape` ordered by creation, then walks it once in
reverse.  Broadcasting is limited to adding/multiplying a row vector onto
every row of a matrix.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateInputError, InvalidShapeError
from .rng import Rng

EPS_NORM = 1e-12

_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._seq = next(_seq)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __mul__ = lambda self, other: mul_elementwise(self, other)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# construction


def create(
    shape: Sequence[int],
    init: str = "zeros",
    *,
    value: float = 0.0,
    mean: float = 0.0,
    std: float = 1.0,
    seed: int = 0,
    requires_grad: bool = False,
) -> Tensor:
    """Build a tensor filled by ``init`` in {"zeros", "constant", "gaussian"}.

    Gaussian fills draw from ``Rng(seed, "tensor")`` and are bit-reproducible.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise InvalidShapeError(f"non-positive dimension in shape {shape}")
    n = int(np.prod(shape)) if shape else 1
    if init == "zeros":
        data = np.zeros(n)
    elif init == "constant":
        data = np.full(n, float(value))
    elif init == "gaussian":
        if std < 0:
            raise InvalidShapeError(f"std must be >= 0, got {std}")
        data = Rng(seed, "tensor").normal(n, mean, std)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data.reshape(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# shape helpers


def _is_row_of(b: Tensor, a: Tensor) -> bool:
    return (
        a.data.ndim == 2
        and b.data.ndim in (1, 2)
        and b.data.size == a.shape[1]
        and (b.data.ndim == 1 or b.shape[0] == 1)
    )


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not _is_row_of(b, a):
        raise InvalidShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0).reshape(shape)


def _row_view(b: np.ndarray, a_shape) -> np.ndarray:
    return b.reshape(1, -1) if b.shape != a_shape else b


def _require_2d(a: Tensor, op: str) -> None:
    if a.data.ndim != 2:
        raise InvalidShapeError(f"{op}: expected a matrix, got shape {a.shape}")


# ---------------------------------------------------------------------------
# ops


def _rowwise_matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # BLAS takes a gemv path for one-row inputs whose rounding differs from gemm;
    # duplicating the row keeps every output row independent of batch size
    if A.shape[0] == 1:
        return (np.concatenate([A, A]) @ B)[:1]
    return A @ B


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _result(_rowwise_matmul(A, B), (a, b), vjp, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    bshape = b.shape

    def vjp(g):
        return g, _unbroadcast(g, bshape)

    return _result(a.data + _row_view(b.data, a.shape), (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    bshape = b.shape

    def vjp(g):
        return g, -_unbroadcast(g, bshape)

    return _result(a.data - _row_view(b.data, a.shape), (a, b), vjp, "sub")


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    A, B = a.data, _row_view(b.data, a.shape)
    bshape = b.shape

    def vjp(g):
        return g * B, _unbroadcast(g * A, bshape)

    return _result(A * B, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``b`` below ``a``."""
    _require_2d(a, "concat_rows")
    _require_2d(b, "concat_rows")
    if a.shape[1] != b.shape[1]:
        raise InvalidShapeError(f"concat_rows: {a.shape} and {b.shape}")
    n = a.shape[0]
    return _result(np.concatenate([a.data, b.data], axis=0), (a, b), lambda g: (g[:n], g[n:]), "concat_rows")


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Place ``b`` to the right of ``a``."""
    _require_2d(a, "concat_cols")
    _require_2d(b, "concat_cols")
    if a.shape[0] != b.shape[0]:
        raise InvalidShapeError(f"concat_cols: {a.shape} and {b.shape}")
    n = a.shape[1]
    return _result(
        np.concatenate([a.data, b.data], axis=1), (a, b), lambda g: (g[:, :n], g[:, n:]), "concat_cols"
    )


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    return _result(kernels.gelu_forward(x), (a,), lambda g: (kernels.gelu_backward(x, g),), "gelu")


def sigmoid(a: Tensor) -> Tensor:
    y = kernels.sigmoid_forward(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def logsumexp_rows(a: Tensor) -> Tensor:
    _require_2d(a, "logsumexp_rows")
    x = a.data
    out = kernels.logsumexp_rows(x)

    def vjp(g):
        return (g[:, None] * np.exp(x - out[:, None]),)

    return _result(out, (a,), vjp, "logsumexp_rows")


def log_softmax_rows(a: Tensor) -> Tensor:
    _require_2d(a, "log_softmax_rows")
    y = kernels.log_softmax_rows(a.data)
    return _result(y, (a,), lambda g: (kernels.log_softmax_rows_backward(y, g),), "log_softmax_rows")


def l2_normalize_rows(a: Tensor) -> Tensor:
    _require_2d(a, "l2_normalize_rows")
    y, norms = kernels.l2_normalize_rows(a.data)
    low = np.flatnonzero(norms < EPS_NORM)
    if low.size:
        i = int(low[0])
        raise DegenerateInputError(f"row {i} has norm {norms[i]:.3e} below {EPS_NORM:g}")
    return _result(y, (a,), lambda g: (kernels.l2_normalize_rows_backward(y, norms, g),), "l2_normalize_rows")


def mean_rows(a: Tensor) -> Tensor:
    """Average of the rows of a matrix, shape ``(n_cols,)``."""
    _require_2d(a, "mean_rows")
    m = a.shape[0]
    return _result(a.data.mean(axis=0), (a,), lambda g: (np.broadcast_to(g / m, a.shape).copy(),), "mean_rows")


def sum_cols(a: Tensor) -> Tensor:
    """Per-row sum, shape ``(n_rows,)``."""
    _require_2d(a, "sum_cols")
    shape = a.shape
    return _result(a.data.sum(axis=1), (a,), lambda g: (np.broadcast_to(g[:, None], shape).copy(),), "sum_cols")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum_all")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean_all")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise InvalidShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(data, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    _require_2d(a, "transpose")
    return _result(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def gather_rows(table: Tensor, indices) -> Tensor:
    """Rows ``table[indices]``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.ndim != 1 or (idx.size and (idx.min() < -n or idx.max() >= n)):
        raise InvalidShapeError(f"gather_rows: indices out of range for {n} rows")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(table.data[idx], (table,), vjp, "gather_rows")


def pick(a: Tensor, cols) -> Tensor:
    """``out[i] = a[i, cols[i]]``."""
    _require_2d(a, "pick")
    cols = np.asarray(cols, dtype=np.int64)
    if cols.shape != (a.shape[0],) or (cols.size and (cols.min() < 0 or cols.max() >= a.shape[1])):
        raise InvalidShapeError(f"pick: bad column indices for shape {a.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return _result(a.data[rows, cols], (a,), vjp, "pick")


def where_rows(mask, a: Tensor, row: Tensor) -> Tensor:
    """Row ``i`` of ``a`` where ``mask[i]``, else the vector ``row``."""
    _require_2d(a, "where_rows")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (a.shape[0],) or row.data.size != a.shape[1]:
        raise InvalidShapeError(f"where_rows: mask {mask.shape}, a {a.shape}, row {row.shape}")
    m = mask[:, None]
    rshape = row.shape

    def vjp(g):
        return g * m, (g * ~m).sum(axis=0).reshape(rshape)

    return _result(np.where(m, a.data, row.data.reshape(1, -1)), (a, row), vjp, "where_rows")


def sum_pool_cols(a: Tensor, k: int) -> Tensor:
    """Sum consecutive windows of ``k`` columns: (m, k*d) -> (m, d)."""
    _require_2d(a, "sum_pool_cols")
    m, kd = a.shape
    if k < 1 or kd % k:
        raise InvalidShapeError(f"sum_pool_cols: {kd} columns not divisible by {k}")
    d = kd // k

    def vjp(g):
        return (np.repeat(g, k, axis=1),)

    return _result(a.data.reshape(m, d, k).sum(axis=2), (a,), vjp, "sum_pool_cols")


def signed_sqrt(a: Tensor) -> Tensor:
    """sign(x) * sqrt(|x|); derivative 1 / (2 sqrt(|x|)), floored at |x| = EPS_NORM."""
    x = a.data
    r = np.sqrt(np.abs(x))

    def vjp(g):
        return (g * 0.5 / np.maximum(r, np.sqrt(EPS_NORM)),)

    return _result(np.sign(x) * r, (a,), vjp, "signed_sqrt")


def stop_gradient(a: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._vjp = None
    out._seq = next(_seq)
    out.op = "stop_gradient"
    return out


# ---------------------------------------------------------------------------
# backward


@dataclass
class Tape:
    """Nodes reachable from a loss, in creation (hence topological) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._vjp is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def backward(self, loss: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._vjp is None:
                    p.grad = np.array(pg, dtype=np.float64) if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._vjp is None:
        raise ContractError("loss has an empty tape (no input requires grad)")
    tape = Tape.from_loss(loss)
    tape.backward(loss)
    return tape


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class ParamError:
    max_rel: float
    mean_rel: float


@dataclass
class GradCheckReport:
    seed: int
    params: dict[str, ParamError]

    @property
    def max_rel(self) -> float:
        return max((e.max_rel for e in self.params.values()), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


Builder = Callable[[int], "tuple[dict[str, Tensor], Callable[[], Tensor]]"]


def grad_check(builder: Builder, seed: int, step: float = 1e-5) -> GradCheckReport:
    """Compare backward against central differences for every parameter.

    ``builder(seed)`` returns ``(params, loss_fn)``; ``loss_fn()`` must rebuild
    the graph from the current contents of ``params``.
    """
    params, loss_fn = builder(seed)
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise DegenerateInputError(f"non-finite loss {loss.data} for seed {seed}")
    backward(loss)
    report = {}
    with no_grad():
        for name, p in params.items():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
            numeric = np.empty_like(p.data)
            flat = p.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                num_flat[i] = (up - down) / (2.0 * step)
            rel = relative_error(analytic, numeric)
            report[name] = ParamError(float(rel.max()), float(rel.mean()))
    return GradCheckReport(seed, report)



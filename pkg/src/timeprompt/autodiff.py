"""Dense float64 tensors with reverse-mode automatic differentiation.

A dynamic tape: each op records its gradient-carrying inputs and a local
backward closure on the output tensor. :func:`backward` walks the recorded
graph once in reverse topological order, accumulates gradients additively
across fan-out, and then frees the tape, so calling it twice on the same
loss is an error.

Op set is deliberately small: add, mul, matmul, transpose, reshape, concat,
slice, sum/mean, softmax (optionally masked), layer norm, GELU, dropout and
index gathers. Everything else in the package is composed from these.
Heavy row-wise loops dispatch through :mod:`timeprompt.kernels`.
"""

from __future__ import annotations

import numpy as np

from . import kernels

_grad_enabled = True
_anomaly_check = False


class NumericsError(RuntimeError):
    """A forward op produced non-finite values (raised in anomaly mode)."""


class no_grad:
    """Context manager that disables tape recording (eval-mode forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def set_anomaly_check(enabled: bool) -> None:
    """Toggle per-op finiteness checks, used to locate the first bad op."""
    global _anomaly_check
    _anomaly_check = enabled


class Tensor:
    """A float64 array plus optional gradient and tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op = "leaf"
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; all ops live at module level
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; records the tape only for gradient-carrying inputs."""
    if _anomaly_check and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    out._op = op
    grad_parents = tuple(p for p in parents if p.requires_grad)
    if _grad_enabled and grad_parents:
        out.requires_grad = True
        out._parents = grad_parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    return _make(out_data, "add", (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bwd(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad, b.shape))

    return _make(out_data, "sub", (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    return _make(out_data, "mul", (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data * s

    def bwd(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * s)

    return _make(out_data, "scale", (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product with NumPy batch broadcasting; both >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be >= 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(out):
        if a.requires_grad:
            ga = out.grad @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ out.grad
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(out_data, "matmul", (a, b), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad.transpose(inv))

    return _make(out_data, "transpose", (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bwd(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad.reshape(a.shape))

    return _make(out_data, "reshape", (a,), bwd)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(out):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(start, stop)
                t.accumulate_grad(out.grad[tuple(idx)])

    return _make(out_data, "concat", tuple(tensors), bwd)


def tensor_slice(a: Tensor, key) -> Tensor:
    """Basic slicing (slices and ints only; no repeated-index fancy indexing)."""
    a = as_tensor(a)
    out_data = np.ascontiguousarray(a.data[key])

    def bwd(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[key] += out.grad
            a.accumulate_grad(g)

    return _make(out_data, "slice", (a,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(out):
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, "sum", (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def _rows_view(data: np.ndarray, axis: int) -> tuple[np.ndarray, tuple[int, ...], int]:
    """Move `axis` last and flatten to (rows, cols); returns (rows2d, moved_shape, axis)."""
    moved = np.moveaxis(data, axis, -1)
    moved_shape = moved.shape
    rows = np.ascontiguousarray(moved).reshape(-1, moved_shape[-1])
    return rows, moved_shape, axis


def _rows_restore(rows: np.ndarray, moved_shape: tuple[int, ...], axis: int) -> np.ndarray:
    return np.moveaxis(rows.reshape(moved_shape), -1, axis)


def softmax(a: Tensor, axis: int = -1, keep: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax along `axis`; `keep` masks entries to exactly 0.

    `keep` is a boolean array broadcastable to `a.shape`; every row must keep
    at least one entry.
    """
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ValueError(f"softmax: empty axis {axis} for shape {a.shape}")
    keep_rows = None
    if keep is not None:
        keep_full = np.broadcast_to(keep, a.shape)
        keep_rows = _rows_view(keep_full.astype(np.uint8), axis)[0]
    rows, moved_shape, ax = _rows_view(a.data, axis)
    y_rows = kernels.active().softmax_rows_fwd(rows, keep_rows)
    out_data = np.ascontiguousarray(_rows_restore(y_rows, moved_shape, ax))

    def bwd(out):
        if a.requires_grad:
            g_rows = _rows_view(out.grad, ax)[0]
            gx = kernels.active().softmax_rows_bwd(y_rows, g_rows)
            a.accumulate_grad(np.ascontiguousarray(_rows_restore(gx, moved_shape, ax)))

    return _make(out_data, "softmax", (a,), bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis with affine (gamma, beta)."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    cols = a.shape[-1]
    rows = a.data.reshape(-1, cols)
    y_rows, mu, rstd = kernels.active().layernorm_rows_fwd(rows, gamma.data, beta.data, eps)
    out_data = y_rows.reshape(a.shape)

    def bwd(out):
        g_rows = out.grad.reshape(-1, cols)
        gx, dgamma, dbeta = kernels.active().layernorm_rows_bwd(
            g_rows, rows, gamma.data, mu, rstd)
        if a.requires_grad:
            a.accumulate_grad(gx.reshape(a.shape))
        if gamma.requires_grad:
            gamma.accumulate_grad(dgamma)
        if beta.requires_grad:
            beta.accumulate_grad(dbeta)

    return _make(out_data, "layer_norm", (a, gamma, beta), bwd)


def gelu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    flat = np.ascontiguousarray(a.data)
    out_data = kernels.active().gelu_fwd(flat).reshape(a.shape)

    def bwd(out):
        if a.requires_grad:
            gx = kernels.active().gelu_bwd(flat, np.ascontiguousarray(out.grad))
            a.accumulate_grad(gx.reshape(a.shape))

    return _make(out_data, "gelu", (a,), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; in train mode the mask is drawn from `rng`."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    mask = (rng.random(a.shape) >= p).astype(np.float64) / (1.0 - p)
    out_data = a.data * mask

    def bwd(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * mask)

    return _make(out_data, "dropout", (a,), bwd)


# ---------------------------------------------------------------------------
# gathers
# ---------------------------------------------------------------------------

def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """out[..., :] = table[ids[...]]; scatter-add gradient into selected rows."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range [0, {table.shape[0]})")
    out_data = table.data[ids]

    def bwd(out):
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            table.accumulate_grad(g)

    return _make(out_data, "gather_rows", (table,), bwd)


def take_along_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """Gather along the last axis: out[..., j] = a[..., ids[..., j]]."""
    a = as_tensor(a)
    ids = np.asarray(ids)
    out_data = np.take_along_axis(a.data, ids, axis=-1)

    def bwd(out):
        if a.requires_grad:
            g2 = np.zeros_like(a.data).reshape(-1, a.shape[-1])
            idx2 = ids.reshape(-1, ids.shape[-1])
            rows = np.arange(g2.shape[0])[:, None]
            np.add.at(g2, (rows, idx2), out.grad.reshape(idx2.shape))
            a.accumulate_grad(g2.reshape(a.shape))

    return _make(out_data, "take_along_last", (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate grads of every reachable requires_grad leaf, then free the tape."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._freed:
        raise RuntimeError("backward: tape already consumed; rebuild the graph")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node)
    for node in topo:
        if node._backward_fn is not None:  # interior node: free tape + scratch grad
            node._backward_fn = None
            node._parents = ()
            node._freed = True
            if node is not loss:
                node.grad = None


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps the tensor to a scalar Tensor and must be deterministic. Error
    per coordinate is |analytic - central| / max(1, |analytic|).
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    x.zero_grad()
    out = f(x)
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check: f returned shape {out.shape}, expected scalar")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    flat = x.data.ravel()
    analytic_flat = analytic.ravel()
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = float(f(x).data)
            flat[i] = saved - eps
            lo = float(f(x).data)
            flat[i] = saved
            central = (hi - lo) / (2.0 * eps)
            err = abs(analytic_flat[i] - central) / max(1.0, abs(analytic_flat[i]))
            if err > worst:
                worst = err
    return worst

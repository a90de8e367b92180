"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape`.  With no tape
active, ops run as plain numpy and nothing is recorded, which is what
evaluation uses.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_squared_error(w, Tensor([[0.0, 0.0]]))
    >>> tape.backward(loss)
    >>> w.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

BCE_CLAMP = 1e-7


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPES: list["Tape"] = []
# op name -> multiplier applied to that op's input gradients (fault injection)
_GRAD_FAULTS: dict[str, float] = {}


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, op, inputs, output, backward) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_record():
    """Temporarily suspend recording on every active tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


@contextlib.contextmanager
def inject_gradient_fault(op: str, factor: float = 1.5):
    """Scale the backward output of ``op`` by ``factor``; a gradcheck harness hook."""
    _GRAD_FAULTS[op] = factor
    try:
        yield
    finally:
        _GRAD_FAULTS.pop(op, None)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.output) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        factor = _GRAD_FAULTS.get(node.op)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if factor is not None:
                gi = gi * factor
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if leaf.grad is None:
            leaf.grad = np.array(g, dtype=np.float64)
        else:
            leaf.grad += g


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def record_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as an op output; ``backward_fn(g)`` returns one gradient per input."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unscalar(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "add")
    return record_op("add", a.data + b.data, (a, b),
                 lambda g: (_unscalar(g, a.shape), _unscalar(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "sub")
    return record_op("sub", a.data - b.data, (a, b),
                 lambda g: (_unscalar(g, a.shape), _unscalar(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "mul")
    return record_op("mul", a.data * b.data, (a, b),
                 lambda g: (_unscalar(g * b.data, a.shape), _unscalar(g * a.data, b.shape)))


def elementwise(op: str, a, b) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., n] + bias[n]: the one explicit row-broadcast the model needs."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} vs bias {bias.shape}")
    n = bias.shape[0]
    return record_op("add_bias", x.data + bias.data, (x, bias),
                 lambda g: (g, g.reshape(-1, n).sum(axis=0)))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record_op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record_op("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports [m,k]@[k,n], batched [...,m,k]@[...,k,n] and [...,m,k]@[k,n]."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    if b.data.ndim > a.data.ndim:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record_op("matmul", ad @ bd, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    return record_op("transpose", np.swapaxes(x.data, -1, -2), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return record_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat_features(*parts: Tensor) -> Tensor:
    """Concatenate along the last (feature) axis."""
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"concat_features: row mismatch {parts[0].shape} vs {p.shape}")
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return record_op("concat", out, parts, lambda g: tuple(np.split(g, cuts, axis=-1)))


def gather_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: ``table[index]`` with scatter-add backward."""
    idx = np.asarray(index, dtype=np.int64)
    rows, dim = table.shape

    def bw(g):
        gt = np.zeros((rows, dim))
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, dim))
        return (gt,)

    return record_op("gather", table.data[idx], (table,), bw)


def take_step(x: Tensor, t: int) -> Tensor:
    """Slice ``x[:, t, :]`` from a [B, T, k] tensor."""
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[:, t, :] = g
        return (gx,)

    return record_op("take_step", x.data[:, t, :], (x,), bw)


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """[B, k] -> [B, n, k] by repeating each row n times."""
    b, k = x.shape
    out = np.broadcast_to(x.data[:, None, :], (b, n, k)).copy()
    return record_op("repeat", out, (x,), lambda g: (g.sum(axis=1),))


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    ``mask`` (bool, same shape) marks admissible entries; masked entries get
    weight 0 and a row with nothing admissible is all zeros.
    """
    z = x.data
    if mask is None:
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise DimensionError(f"softmax_rows: mask {mask.shape} vs input {z.shape}")
        filled = np.where(mask, z, -np.inf)
        row_max = filled.max(axis=-1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.where(mask, np.exp(np.where(mask, z - row_max, 0.0)), 0.0)
        denom = e.sum(axis=-1, keepdims=True)
        y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record_op("softmax", y, (x,), bw)


# ---------------------------------------------------------------- reductions / losses


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return record_op("sum", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record_op("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(shape, float(g) / n),))


def sum_squared_error(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise DimensionError(f"sum_squared_error: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data

    def bw(g):
        return 2.0 * g * diff, -2.0 * g * diff

    return record_op("sse", np.asarray((diff * diff).sum()), (a, b), bw)


def binary_cross_entropy(p: Tensor, y) -> Tensor:
    """Mean BCE; predictions are clamped to [1e-7, 1 - 1e-7] before the log."""
    y = _wrap(y)
    if p.shape != y.shape:
        raise DimensionError(f"binary_cross_entropy: {p.shape} vs labels {y.shape}")
    pc = np.clip(p.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    yd = y.data
    n = p.size
    loss = -(yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc)).mean()
    inside = (p.data > BCE_CLAMP) & (p.data < 1.0 - BCE_CLAMP)

    def bw(g):
        gp = float(g) * (-yd / pc + (1.0 - yd) / (1.0 - pc)) / n
        return gp * inside, None

    return record_op("bce", np.asarray(loss), (p, y), bw)


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction; moments persist per parameter across calls."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"adam_step: parameter {p.name or p.shape} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr != 0.0:
                p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# ---------------------------------------------------------------- finite differences


@dataclass
class GradCheck:
    max_rel_error: float
    max_abs_error: float
    ok: bool


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``param``."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size)
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * h)
    return out.reshape(param.shape)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    """Per-entry relative error; entries whose absolute gap is under ``atol`` count as 0."""
    gap = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.divide(gap, scale, out=np.zeros_like(gap), where=scale > 0)
    return np.where(gap <= atol, 0.0, rel)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    rtol: float = 1e-4, atol: float = 1e-6) -> GradCheck:
    """Compare tape gradients of ``loss_fn`` against central differences."""
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst_rel = worst_abs = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_gradient(loss_fn, p, h)
        worst_rel = max(worst_rel, float(relative_errors(analytic, numeric, atol).max(initial=0.0)))
        worst_abs = max(worst_abs, float(np.abs(analytic - numeric).max(initial=0.0)))
    return GradCheck(worst_rel, worst_abs, worst_rel <= rtol)

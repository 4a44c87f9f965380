"""Tape-based reverse-mode differentiation over numpy arrays.

Every op works on whole arrays (usually a batch of pixels along the leading
axis), so a training step records a few hundred tape nodes rather than one
node per scalar.  Tensors keep the dtype they were created with: parameters
and activations are float32 during training, and the gradient checker
rebuilds everything at float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    ``branches`` collects the discrete decisions (ReLU masks, grid cells) taken
    during the forward pass when ``track_branches`` is on; the gradient checker
    uses it to reject finite differences that straddle a kink.
    """

    nodes: list[Node] = field(default_factory=list)
    track_branches: bool = False
    branches: list[bytes] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_tape():
    """Evaluate without recording, even inside an enclosing tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def note_branch(arr: np.ndarray) -> None:
    tape = active_tape()
    if tape is not None and tape.track_branches:
        tape.branches.append(np.ascontiguousarray(arr).tobytes())


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data)
    tape = active_tape()
    if needs and tape is not None:
        out.requires_grad = True
        out.grad = None
        tape.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def affine(x: Tensor, scale: float, shift=0.0) -> Tensor:
    """``x * scale + shift`` with constant (non-differentiable) scale and shift."""
    shift = np.asarray(shift, dtype=x.dtype)
    out = (x.data * x.dtype.type(scale) + shift).astype(x.dtype, copy=False)
    return _record("affine", (x,), out, lambda g: (g * x.dtype.type(scale),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    return _record("relu", (x,), x.data * mask, lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


# ----------------------------------------------------------------- structural


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` for x of shape (..., n_in) and W of shape (n_out, n_in)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1] or (b is not None and b.shape != (W.shape[0],)):
        bshape = None if b is None else b.shape
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape} and bias {bshape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
    inputs = (x, W) if b is None else (x, W, b)

    def backward(g):
        gx = g @ W.data
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ x2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _record("linear", inputs, out, backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, sizes, axis=axis)

    return _record("concat", tensors, out, backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: ``x[index]`` along the first axis.

    Used both for the hash table (index of shape (B, K)) and for broadcasting
    per-view codes to per-pixel rows.
    """
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]
    n = x.shape[0]

    def backward(g):
        flat = index.reshape(-1)
        g2 = g.reshape(flat.size, -1)
        cols = [np.bincount(flat, weights=g2[:, j], minlength=n) for j in range(g2.shape[1])]
        return (np.stack(cols, axis=1).reshape(x.shape).astype(x.dtype, copy=False),)

    return _record("take_rows", (x,), out, backward)


def weighted_sum(w: Tensor, f: Tensor) -> Tensor:
    """Per-row mix of K feature vectors: w (B, K), f (B, K, F) -> (B, F)."""
    if w.shape != f.shape[:-1]:
        raise ShapeError(f"weighted_sum: weights {w.shape} do not match features {f.shape}")
    out = np.matmul(w.data[:, None, :], f.data)[:, 0]
    return _record("weighted_sum", (w, f), out,
                   lambda g: (np.matmul(f.data, g[:, :, None])[..., 0], w.data[..., None] * g[:, None, :]))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), y, backward)


def _im2col(x: np.ndarray) -> np.ndarray:
    # x: (N, C, H, W) -> (N, C*9, H*W) for 3x3 windows with zero padding 1
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, h, w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(n, c * 9, h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(n, c, 3, 3, h, w)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[:, :, dy, dx]
    return xp[:, :, 1:-1, 1:-1]


def conv2d(x: Tensor, kernels: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    Accepts a single image (C, H, W) or a stack (N, C, H, W).
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if kernels.data.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernels must be (C_out, C_in, 3, 3), got {kernels.shape}")
    if xd.ndim != 4 or xd.shape[1] != kernels.shape[1] or b.shape != (kernels.shape[0],):
        raise ShapeError(f"conv2d: input {x.shape} does not match kernels {kernels.shape} / bias {b.shape}")
    n, c, h, w = xd.shape
    co = kernels.shape[0]
    cols = _im2col(xd)
    kmat = kernels.data.reshape(co, -1)
    out = (kmat @ cols).reshape(n, co, h, w) + b.data[:, None, None]
    if single:
        out = out[0]

    def backward(g):
        g4 = (g[None] if single else g).reshape(n, co, h * w)
        gk = np.matmul(g4, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
        gb = g4.sum(axis=(0, 2))
        gx = _col2im(kmat.T @ g4, xd.shape)
        return (gx[0] if single else gx), gk, gb

    return _record("conv2d", (x, kernels, b), out, backward)


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Global mean over the two trailing spatial axes: (..., C, H, W) -> (..., C)."""
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))

    def backward(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).astype(x.dtype),)

    return _record("adaptive_avg_pool", (x,), out, backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)
    scale = pred.dtype.type(2.0 / diff.size)
    return _record("mse_loss", (pred,), out, lambda g: (g * scale * diff,))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _record("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


# ------------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    Repeated calls accumulate; call ``zero_grad`` in between to reset.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=inp.dtype)
                touched[key] = inp
    # what remains are leaves; intermediates were consumed on the way down
    for key, g in grads.items():
        t = touched[key]
        t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g
    if id(loss) not in grads:
        seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    lr: float = 0.00125
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        upd = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= upd.astype(p.dtype, copy=False)
        p.grad = np.zeros_like(p.data)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()

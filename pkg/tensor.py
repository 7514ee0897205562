"""Minimal reverse-mode tensor engine on numpy.

Every differentiable op builds its output through `_make`, which attaches a
ComputationRecord (op name, inputs, backward rule) when any input requires a
gradient. `backward` walks records in reverse creation order, so gradient
accumulation order is fixed and runs are bitwise repeatable.
"""
import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core import NumericError, ShapeError

PROB_FLOOR = 1e-12

# --- PRECISION ---
_ENGINE = {"dtype": np.float32, "grad": True}

def set_precision(bits: int):
    if bits not in (32, 64): raise ValueError("precision must be 32 or 64")
    _ENGINE["dtype"] = np.float64 if bits == 64 else np.float32

def get_dtype():
    return _ENGINE["dtype"]

@contextmanager
def precision(bits: int):
    previous = _ENGINE["dtype"]
    set_precision(bits)
    try: yield
    finally: _ENGINE["dtype"] = previous

@contextmanager
def no_grad():
    """Build no computation records; used for evaluation passes."""
    previous = _ENGINE["grad"]
    _ENGINE["grad"] = False
    try: yield
    finally: _ENGINE["grad"] = previous


_SEQ = itertools.count()


@dataclass(frozen=True)
class ComputationRecord:
    op: str
    inputs: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.record: Optional[ComputationRecord] = None
        self.seq = next(_SEQ)

    @property
    def shape(self): return self.data.shape
    @property
    def ndim(self): return self.data.ndim
    @property
    def size(self): return self.data.size
    @property
    def dtype(self): return self.data.dtype

    def item(self) -> float:
        if self.size != 1: raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.record.op if self.record else None})"

    # arithmetic
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return add(self, mul(other, -1.0))
    def __rsub__(self, other): return add(other, mul(self, -1.0))
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __truediv__(self, scalar: float): return mul(self, 1.0 / float(scalar))
    def __getitem__(self, rows: slice): return take_rows(self, rows)

    def sum(self): return tensor_sum(self)
    def mean(self): return tensor_sum(self) / self.size
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def backward(self): backward(self)


class Parameter(Tensor):
    """A trainable leaf. `role` drives initialization and weight-decay exclusion."""

    def __init__(self, data, role: str):
        super().__init__(data, requires_grad=True)
        self.role = role

    @property
    def decays(self) -> bool:
        return not self.role.startswith("norm")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str):
    if not np.isfinite(data).all(): raise NumericError(f"non-finite values produced by {op}")


def _make(data, inputs: Sequence[Tensor], backward_rule, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _ENGINE["grad"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.record = ComputationRecord(op, tuple(inputs), backward_rule)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape): grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1: grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- BACKWARD ---
def backward(loss: Tensor):
    if loss.size != 1: raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    nodes = {}; stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes: continue
        nodes[id(t)] = t
        if t.record is None: continue
        for parent in t.record.inputs:
            if parent.seq >= t.seq: raise ShapeError(f"cycle in computation records at {t.record.op}")
            if parent.requires_grad: stack.append(parent)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda n: n.seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None or not t.requires_grad: continue
        if t.record is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.record.inputs, t.record.backward(g)):
            if pg is None or not parent.requires_grad: continue
            _check_finite(pg, f"{t.record.op} backward")
            pg = np.asarray(pg, dtype=parent.dtype)
            grads[id(parent)] = pg if id(parent) not in grads else grads[id(parent)] + pg


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


# --- ELEMENTWISE / SHAPE ---
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def tensor_sum(x: Tensor) -> Tensor:
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take_rows(x: Tensor, rows: slice) -> Tensor:
    if not isinstance(rows, slice): raise ShapeError("only leading-axis slices are supported")
    def rule(g):
        full = np.zeros_like(x.data); full[rows] = g
        return (full,)
    return _make(x.data[rows], (x,), rule, "take_rows")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# --- LAYERS ---
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4: raise ShapeError("conv2d expects input [B,C,H,W] and weight [O,C,kh,kw]")
    if stride < 1: raise ShapeError("conv2d stride must be >= 1")
    B, C, H, W = x.shape; O, Cw, kh, kw = weight.shape
    if C != Cw: raise ShapeError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    if bias is not None and bias.shape != (O,): raise ShapeError(f"conv2d bias must have shape ({O},)")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp: raise ShapeError("conv2d kernel does not fit the padded input")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None: out = out + bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def rule(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gmat.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), inputs, rule, "conv2d")


def batchnorm2d(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization; training mode also updates the running stats in place."""
    if x.ndim != 4 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d shape mismatch: input {x.shape}, scale {scale.shape}, shift {shift.shape}")
    axes = (0, 2, 3); bshape = (1, -1, 1, 1)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if n < 2: raise ShapeError("batchnorm2d needs at least two values per channel in training mode")
        mu = x.data.mean(axis=axes); var = x.data.var(axis=axes)
        running_mean *= 1 - momentum; running_mean += momentum * mu
        running_var *= 1 - momentum; running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def rule(g):
        gxhat = g * scale.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / n) * (n * gxhat - gxhat.sum(axis=axes, keepdims=True)
                                                   - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, scale, shift), rule, "batchnorm2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4: raise ShapeError("global_avg_pool expects [B,C,H,W]")
    area = x.shape[2] * x.shape[3]
    return _make(x.data.mean(axis=(2, 3)), (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),), "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear shape mismatch: x {x.shape}, W {weight.shape}, b {bias.shape}")
    return _make(x.data @ weight.data + bias.data, (x, weight, bias),
                 lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)), "linear")


# --- DISTRIBUTIONS / LOSSES ---
def softmax_np(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if tau <= 0: raise ValueError("temperature must be positive")
    shifted = (z - z.max(axis=-1, keepdims=True)) / tau
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if tau <= 0: raise ValueError("temperature must be positive")
    shifted = (z - z.max(axis=-1, keepdims=True)) / tau
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_t(z: Tensor, tau: float) -> Tensor:
    s = softmax_np(z.data, tau)
    return _make(s, (z,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)) / tau,), "softmax_t")


def _check_distribution(target: np.ndarray, op: str):
    if (target < 0).any() or not np.allclose(target.sum(axis=-1), 1.0, rtol=0, atol=1e-6):
        raise ShapeError(f"{op} target rows must be non-negative and sum to 1")


def cross_entropy_soft(logits: Tensor, target, tau: float = 1.0) -> Tensor:
    """Batch mean of -sum(target * log softmax(logits / tau)); target is a constant."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if logits.ndim != 2 or target.shape != logits.shape:
        raise ShapeError(f"cross_entropy_soft shape mismatch: logits {logits.shape}, target {target.shape}")
    _check_distribution(target, "cross_entropy_soft")
    target = target.astype(logits.dtype)
    logp = log_softmax_np(logits.data, tau)
    B = logits.shape[0]
    loss = -(target * logp).sum() / B
    return _make(np.asarray(loss), (logits,), lambda g: ((np.exp(logp) - target) * (g / (tau * B)),), "cross_entropy_soft")


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """sum p * ln(p / q) per row, averaged over leading rows; both sides floored at PROB_FLOOR."""
    if p.shape != q.shape: raise ShapeError(f"kl_div shape mismatch: {p.shape} vs {q.shape}")
    rows = p.size // p.shape[-1]
    pc = np.maximum(p.data, PROB_FLOOR); qc = np.maximum(q.data, PROB_FLOOR)
    value = (p.data * (np.log(pc) - np.log(qc))).sum() / rows

    def rule(g):
        gp = (np.log(pc) - np.log(qc) + (p.data > PROB_FLOOR)) * (g / rows)
        gq = -(p.data / qc) * (q.data > PROB_FLOOR) * (g / rows)
        return gp, gq

    return _make(np.asarray(value), (p, q), rule, "kl_div")


def sum_squared_diff(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape: raise ShapeError(f"sum_squared_diff shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    return _make(np.asarray((diff * diff).sum()), (a, b), lambda g: (2 * g * diff, -2 * g * diff), "sum_squared_diff")

"""Minimal reverse-mode autodiff engine on dense float64 numpy arrays.

Every operation the model and losses need is a free function that computes
the forward value eagerly and, when a Tape is active and an input requires
grad, records a backward rule on the tape. Backward rules are hand-written
and checked against central finite differences (see grad_check).
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

NEG_INF = -1e30  # finite stand-in for -inf in masked attention logits


class Tensor:
    """Dense row-major float64 tensor. Values are treated as immutable once
    an op has produced them; training code replaces .data wholesale."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor],
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Records ops in execution (hence topological) order.

    Use as a context manager around the forward pass; one backward() per
    tape, after which it must be discarded.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    The tape may be walked once; a second call raises.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    if not any(n.output is loss for n in tape.nodes):
        raise ValueError("loss is not recorded on this tape (detached?)")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.backward_fn(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + g if key in grads else g
    # whatever was never popped belongs to leaves (tensors no node produced)
    for node in tape.nodes:
        for t in node.inputs:
            if id(t) in grads:
                g = grads.pop(id(t))
                t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable constant (attention masks)."""
    out = Tensor(a.data + const)
    return _record(out, (a,), lambda g: (g,))


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T.copy())
    return _record(out, (a,), lambda g: (g.T.copy(),))


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    out = Tensor(a.data[:, lo:hi].copy())

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        return (full,)

    return _record(out, (a,), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.data.shape[1] for p in parts]

    def bw(g):
        grads = []
        at = 0
        for w in widths:
            grads.append(g[:, at:at + w])
            at += w
        return grads

    return _record(out, tuple(parts), bw)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    out = Tensor(np.stack([p.data for p in parts], axis=0))

    def bw(g):
        return [g[i] for i in range(len(parts))]

    return _record(out, tuple(parts), bw)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError("row index out of range")
    out = Tensor(table.data[idx].copy())

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (table,), bw)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.full_like(a.data, float(g)),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"invalid softmax axis {axis} for shape {x.data.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bw)


def rms_norm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    """y = weight * x / sqrt(mean(x^2, last axis) + eps)."""
    if x.data.shape[-1] != weight.data.shape[-1] or weight.data.ndim != 1:
        raise ValueError("rms_norm dimension mismatch")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    d = x.data.shape[-1]
    ms = (x.data ** 2).mean(axis=-1, keepdims=True)
    r = np.sqrt(ms + eps)
    xn = x.data / r
    out = Tensor(xn * weight.data)

    def bw(g):
        gw = g * weight.data
        # d/dx of x/r with r = sqrt(mean(x^2)+eps)
        dot = (gw * x.data).sum(axis=-1, keepdims=True)
        dx = gw / r - x.data * dot / (d * r ** 3)
        dweight = (g * xn).reshape(-1, d).sum(axis=0)
        return dx, dweight

    return _record(out, (x, weight), bw)


def swiglu(gate: Tensor, up: Tensor) -> Tensor:
    """silu(gate) * up, elementwise."""
    if gate.data.shape != up.data.shape:
        raise ValueError("swiglu shape mismatch")
    sig = 1.0 / (1.0 + np.exp(-gate.data))
    silu = gate.data * sig
    out = Tensor(silu * up.data)

    def bw(g):
        dsilu = sig * (1.0 + gate.data * (1.0 - sig))
        return g * up.data * dsilu, g * silu

    return _record(out, (gate, up), bw)


def rope_apply(x: Tensor, positions: Sequence[int], theta: float) -> Tensor:
    """Rotate coordinate pairs (2i, 2i+1) of the last axis by
    pos * theta**(-2i/head_dim). Works on [T, hd] or [T, h, hd]."""
    hd = x.data.shape[-1]
    if hd % 2 != 0:
        raise ValueError("rope requires an even head dimension")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape[0] != x.data.shape[0]:
        raise ValueError("positions length must match sequence length")
    freqs = theta ** (-2.0 * np.arange(hd // 2, dtype=np.float64) / hd)
    # angle[t, i] = pos[t] * theta^(-2i/hd)
    ang = pos[:, None] * freqs[None, :]
    cos = np.cos(ang)
    sin = np.sin(ang)
    # broadcast over any middle axes
    bshape = (x.data.shape[0],) + (1,) * (x.data.ndim - 2) + (hd // 2,)
    cos = cos.reshape(bshape)
    sin = sin.reshape(bshape)

    def rotate(arr, c, s):
        even = arr[..., 0::2]
        odd = arr[..., 1::2]
        out = np.empty_like(arr)
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out

    out = Tensor(rotate(x.data, cos, sin))
    # inverse rotation transposes the 2x2 blocks
    return _record(out, (x,), lambda g: (rotate(g, cos, -sin),))


def cross_entropy_from_logits(logits: Tensor, targets: Sequence[int],
                              ignore_index: int = -100) -> Tensor:
    """Mean of -log softmax(logits)[target] over non-ignored positions."""
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or tgt.shape[0] != logits.data.shape[0]:
        raise ValueError("cross_entropy expects [n, V] logits and n targets")
    keep = tgt != ignore_index
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise ValueError("empty loss: all positions ignored")
    V = logits.data.shape[1]
    if tgt[keep].min() < 0 or tgt[keep].max() >= V:
        raise ValueError("target class out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.nonzero(keep)[0]
    out = Tensor(-logp[rows, tgt[rows]].mean())

    def bw(g):
        p = np.exp(logp)
        grad = np.zeros_like(logits.data)
        grad[rows] = p[rows]
        grad[rows, tgt[rows]] -= 1.0
        grad *= float(g) / n_kept
        return (grad,)

    return _record(out, (logits,), bw)


def mean_pool(hidden: Tensor, keep_mask: Sequence[bool]) -> Tensor:
    """Mean of the kept rows of a [T, d] tensor."""
    mask = np.asarray(keep_mask, dtype=bool)
    if mask.shape[0] != hidden.data.shape[0]:
        raise ValueError("keep_mask length mismatch")
    k = int(mask.sum())
    if k == 0:
        raise ValueError("mean_pool: no positions kept")
    out = Tensor(hidden.data[mask].mean(axis=0))

    def bw(g):
        grad = np.zeros_like(hidden.data)
        grad[mask] = g / k
        return (grad,)

    return _record(out, (hidden,), bw)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm (cosine-similarity prep)."""
    r = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True) + eps)
    y = x.data / r
    out = Tensor(y)

    def bw(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        return (g / r - x.data * dot / r ** 3,)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of f at x and central
    finite differences, with denominator max(|a|, |b|, 1e-8).

    f must return a scalar Tensor computed from its argument alone.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    x.zero_grad()
    with Tape() as tape:
        loss = f(x)
    backward(loss, tape)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x.data)).item()
        flat[i] = orig - eps
        fm = f(Tensor(x.data)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(x.data.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


def silu(z: float) -> float:
    """Scalar silu, handy for expected values in tests."""
    return z / (1.0 + math.exp(-z))

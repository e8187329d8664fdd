"""Dense float64 tensors with reverse-mode automatic differentiation.

Layout conventions are fixed package-wide: feature maps are
``[batch, channels, height, width]``, feature vectors are
``[batch, features]``. Everything is 64-bit.

Tensors are immutable once created, with two sanctioned exceptions:
``backward`` accumulates into ``grad``, and the optimizer rewrites parameter
data between recorded graphs. Forward evaluation of disjoint graphs is safe
to run concurrently; a single backward pass walks its own graph
single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "OpRecord",
    "RunningStats",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "add",
    "relu",
    "sigmoid",
    "fully_connected",
    "conv2d",
    "batch_norm",
    "global_avg_pool",
    "channel_scale",
    "concat_channels",
    "softmax",
    "cross_entropy_loss",
    "tensor_sum",
    "backward",
    "computation_record",
    "finite_difference_check",
]

PROB_FLOOR = 1e-12  # cross-entropy clamps probabilities here before log


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ValueError):
    """A tensor would contain NaN or Inf."""


class GraphError(RuntimeError):
    """Backward was requested on a tensor with no recorded provenance."""


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_record")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keep 0-d shapes as-is
        if arr.size and not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._record: Optional[OpRecord] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Copy of the values with no graph attached."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self._record is not None:
            flags.append(f"op={self._record.op}")
        suffix = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor(shape={self.data.shape}{suffix})"


class OpRecord:
    """One executed primitive: inputs plus a rule to replay its gradient."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"OpRecord({self.op}, arity={len(self.inputs)})"


@dataclass
class RunningStats:
    """Per-channel running mean/variance for eval-mode normalization."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def init(cls, channels: int, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels), momentum)

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.momentum)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._record is not None


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(_tracked(t) for t in inputs):
        out._record = OpRecord(op, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual addition)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0.0
    return _make(
        np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,)
    )


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[B,Din] @ weight[Dout,Din]^T + bias[Dout]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("fully_connected expects 2-d input and weight")
    dout, din = weight.shape
    if x.shape[1] != din:
        raise ShapeError(
            f"fully_connected: input width {x.shape[1]} != weight fan-in {din}"
        )
    if bias.shape != (dout,):
        raise ShapeError(f"fully_connected: bias shape {bias.shape} != ({dout},)")

    out = x.data @ weight.data.T + bias.data

    def backward_fn(g):
        return (g @ weight.data, g.T @ x.data, g.sum(axis=0))

    return _make(out, "fully_connected", (x, weight, bias), backward_fn)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           pad: int = 0) -> Tensor:
    """Direct 2-d cross-correlation over [B,Cin,H,W] with a square kernel.

    Kernel size is restricted to 1 or 3; the output extent
    (H + 2*pad - k) / stride + 1 must divide exactly.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be square 1x1 or 3x3, got {kh}x{kw}")
    k = kh
    if cin_w != cin:
        raise ShapeError(f"conv2d: weight expects {cin_w} input channels, got {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError("conv2d: padded input smaller than kernel")
    if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
        raise ShapeError("conv2d: output size is not an exact integer")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((b, cin, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            col[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                                 j:j + stride * (wo - 1) + 1:stride]
    colm = col.reshape(b, cin * k * k, ho * wo)
    wm = weight.data.reshape(cout, cin * k * k)
    out = (wm @ colm).reshape(b, cout, ho, wo) + bias.data[None, :, None, None]

    def backward_fn(g):
        gm = g.reshape(b, cout, ho * wo)
        dbias = g.sum(axis=(0, 2, 3))
        dw = np.einsum("bop,bip->oi", gm, colm).reshape(weight.shape)
        dcol = (wm.T @ gm).reshape(b, cin, k, k, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride] += dcol[:, :, i, j]
        dx = dxp[:, :, pad:pad + h, pad:pad + w]
        return (dx, dw, dbias)

    return _make(out, "conv2d", (x, weight, bias), backward_fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
               train: bool, eps: float = 1e-5,
               update_running: bool = True) -> Tensor:
    """Per-channel normalization of a [B,C,H,W] map.

    Train mode normalizes by batch statistics (biased variance) and, when
    ``update_running`` is set, folds them into ``stats`` with its momentum.
    Eval mode normalizes by the running statistics. ``update_running=False``
    keeps train-mode evaluation pure, which finite-difference checking needs.
    """
    if x.data.ndim != 4:
        raise ShapeError("batch_norm expects a 4-d feature map")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm: gamma/beta must have one entry per channel")
    if stats.mean.shape != (c,) or stats.var.shape != (c,):
        raise ShapeError("batch_norm: running stats have wrong channel count")

    axes = (0, 2, 3)
    if train:
        if b * h * w < 2:
            raise ShapeError("batch_norm train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            m = stats.momentum
            stats.mean = (1.0 - m) * stats.mean + m * mu
            stats.var = (1.0 - m) * stats.var + m * var
    else:
        mu = stats.mean
        var = stats.var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        gh = g * gamma.data[None, :, None, None]
        if train:
            # grad through the batch statistics themselves
            dx = inv[None, :, None, None] * (
                gh
                - gh.mean(axis=axes, keepdims=True)
                - xhat * (gh * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            dx = gh * inv[None, :, None, None]
        return (dx, dgamma, dbeta)

    return _make(out, "batch_norm", (x, gamma, beta), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [B,C,H,W] -> [B,C]."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects a 4-d feature map")
    _, _, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        dx = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy()
        return (dx,)

    return _make(out, "global_avg_pool", (x,), backward_fn)


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply every spatial position of channel c by scale[b, c]."""
    if x.data.ndim != 4 or scale.data.ndim != 2:
        raise ShapeError("channel_scale expects [B,C,H,W] and [B,C]")
    if x.shape[:2] != scale.shape:
        raise ShapeError(
            f"channel_scale: map {x.shape[:2]} vs scale {scale.shape} mismatch"
        )
    s4 = scale.data[:, :, None, None]
    out = x.data * s4

    def backward_fn(g):
        return (g * s4, (g * x.data).sum(axis=(2, 3)))

    return _make(out, "channel_scale", (x, scale), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1: channels of maps, or features of vectors."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 4):
        raise ShapeError("concat_channels expects two 2-d or two 4-d tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: non-channel dims differ, {a.shape} vs {b.shape}"
        )
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        return (g[:, :c1].copy(), g[:, c1:].copy())

    return _make(out, "concat_channels", (a, b), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Row softmax of [B,K] logits, max-shifted for overflow safety."""
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise ShapeError("softmax expects [B,K] with K >= 2")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, "softmax", (x,), backward_fn)


def cross_entropy_loss(probs: Tensor, labels) -> Tensor:
    """Mean of -log p[label] over the batch, with probabilities clamped
    to ``PROB_FLOOR`` before the log so saturated rows stay finite."""
    if probs.data.ndim != 2:
        raise ShapeError("cross_entropy_loss expects [B,K] probabilities")
    b, k = probs.shape
    y = np.asarray(labels)
    if y.shape != (b,):
        raise ShapeError(f"cross_entropy_loss: need {b} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= k:
        raise ShapeError(f"cross_entropy_loss: labels must lie in [0, {k})")
    row_sums = probs.data.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise ShapeError("cross_entropy_loss: probability rows must sum to 1")

    picked = probs.data[np.arange(b), y]
    clamped = np.maximum(picked, PROB_FLOOR)
    out = np.asarray(-np.log(clamped).mean())

    def backward_fn(g):
        dp = np.zeros_like(probs.data)
        live = picked >= PROB_FLOOR  # below the floor the clamp has zero slope
        dp[np.arange(b), y] = np.where(live, -float(g) / (b * clamped), 0.0)
        return (dp,)

    return _make(out, "cross_entropy_loss", (probs,), backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    out = np.asarray(x.data.sum())

    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), backward_fn)


# ---------------------------------------------------------------------------
# reverse-mode engine
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list:
    """Tensors of the graph under ``root``, producers before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._record is not None:
            for inp in reversed(node._record.inputs):
                if id(inp) not in seen:
                    stack.append((inp, False))
    return order


def computation_record(t: Tensor) -> list:
    """Topologically ordered OpRecords that produced ``t``."""
    return [n._record for n in _toposort(t) if n._record is not None]


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    Gradients accumulate (+=) across fan-out within the graph and across
    repeated calls on leaf tensors; intermediate grads are reset per call.
    """
    if loss._record is None:
        raise GraphError("backward: tensor has no recorded provenance")
    if loss.data.shape != ():
        raise ShapeError("backward: loss must be a scalar")
    order = _toposort(loss)
    for node in order:
        if node._record is not None:
            node.grad = None
    loss.grad = np.ones(())
    for node in reversed(order):
        rec = node._record
        if rec is None or node.grad is None:
            continue
        grads = rec.backward_fn(node.grad)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not _tracked(inp):
                continue
            inp.grad = gi if inp.grad is None else inp.grad + gi


def finite_difference_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences of ``f``.

    ``f`` must be a deterministic tensor-to-scalar function. The relative
    error per coordinate uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    base = np.array(x.data, copy=True)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if out.data.shape != ():
        raise ShapeError("finite_difference_check: f must return a scalar")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    worst = 0.0
    for i in range(base.size):
        plus = base.copy()
        plus.flat[i] += h
        minus = base.copy()
        minus.flat[i] -= h
        numeric = (float(f(Tensor(plus)).data) - float(f(Tensor(minus)).data)) / (2 * h)
        a = float(analytic.flat[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst

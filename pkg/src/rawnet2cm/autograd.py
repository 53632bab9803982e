"""Small reverse-mode autodiff engine on top of numpy.

Only the operations the countermeasure network needs are provided, and each
accepts exactly the shapes it is used with (no general broadcasting). Graph
recording follows ``requires_grad``: an op output tracks gradients iff one of
its inputs does and grad mode is enabled for the current thread.

Conventions: feature maps are ``(batch, channels, time)``; dense inputs are
``(batch, features)``; linear weights are ``(out, in)``.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ShapeError", "GradientError", "no_grad", "is_grad_enabled",
    "add", "sub", "mul", "linear", "sigmoid", "tanh", "leaky_relu",
    "conv1d", "maxpool1d", "BatchNormState", "batch_norm", "mean_time",
    "mul_channel", "add_channel", "swap_time_channel", "select_time",
    "split_last", "tensor_sum", "softmax", "softmax_cross_entropy",
    "GruParams", "gru_sequence", "AdamState", "adam_step",
]

# im2col buffers larger than this (elements) are built one batch item at a time.
_IM2COL_LIMIT = 32_000_000


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class GradientError(RuntimeError):
    """Misuse of the backward pass."""


_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    """n-d array plus an optional gradient buffer and the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def backward(self) -> None:
        """Backpropagate from a scalar into every tracked leaf's ``grad``.

        Leaf gradients must be reset (``grad is None``) beforehand; a second
        call without resetting raises instead of silently accumulating.
        """
        if self.data.size != 1:
            raise GradientError(f"backward needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("tensor does not require grad")
        order = _topo_order(self)
        leaves = [t for t in order if t.is_leaf and t.requires_grad]
        if any(t.grad is not None for t in leaves):
            raise GradientError("leaf gradients already populated; reset them before another backward")

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for t in leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(x: Tensor, slope: float = 0.3) -> Tensor:
    pos = x.data >= 0
    y = np.where(pos, x.data, slope * x.data)
    return _make(y, (x,), lambda g: (np.where(pos, g, slope * g),))


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


# ---------------------------------------------------------------- dense

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in) or (in,)."""
    if x.shape[-1] != weight.shape[1] or weight.data.ndim != 2:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data

    def backward(g):
        gx = g @ weight.data
        if x.data.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(y, parents, backward)


def split_last(x: Tensor, parts: int) -> list[Tensor]:
    """Split the last axis into ``parts`` equal chunks."""
    n = x.shape[-1]
    if n % parts:
        raise ShapeError(f"split_last: {n} not divisible by {parts}")
    step = n // parts
    outs = []
    for i in range(parts):
        sl = slice(i * step, (i + 1) * step)

        def backward(g, sl=sl):
            full = np.zeros_like(x.data)
            full[..., sl] = g
            return (full,)

        outs.append(_make(x.data[..., sl], (x,), backward))
    return outs


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    ``logits`` is (N, K) with integer ``labels`` of length N, or a single
    (K,) vector with a scalar label.
    """
    single = logits.data.ndim == 1
    z = logits.data[None, :] if single else logits.data
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.shape[0] != z.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: {lab.shape[0]} labels for {z.shape[0]} rows")
    if lab.min() < 0 or lab.max() >= z.shape[1]:
        raise ValueError(f"label out of range for {z.shape[1]} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(log_norm - shifted[rows, lab])

    def backward(g):
        p = softmax(z)
        p[rows, lab] -= 1.0
        p *= g / z.shape[0]
        return (p[0] if single else p,)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# ---------------------------------------------------------------- feature maps

def _check_btc(op: str, x: Tensor) -> None:
    if x.data.ndim != 3:
        raise ShapeError(f"{op}: expected (batch, channels, time), got {x.shape}")


def _conv_forward(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    k = w.shape[2]
    out = []
    windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    if windows.size <= _IM2COL_LIMIT:
        y = np.tensordot(windows, w, axes=([1, 3], [1, 2]))  # (B, T', O)
        return np.ascontiguousarray(y.transpose(0, 2, 1))
    for b in range(xp.shape[0]):
        out.append(np.tensordot(w, windows[b], axes=([1, 2], [0, 2])))
    return np.stack(out)


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, C_in, T) with (C_out, C_in, K).

    ``padding`` zeros are added on both sides; output length is
    ``floor((T + 2*padding - K) / stride) + 1``.
    """
    _check_btc("conv1d", x)
    if kernels.data.ndim != 3:
        raise ShapeError(f"conv1d: kernels must be (C_out, C_in, K), got {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv1d: stride must be >= 1 and padding >= 0")
    b, c, t = x.shape
    o, ck, k = kernels.shape
    if c != ck:
        raise ShapeError(f"conv1d: input has {c} channels, kernels expect {ck}")
    tp = t + 2 * padding
    if tp < k:
        raise ShapeError(f"conv1d: input length {tp} shorter than kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    y = _conv_forward(xp, kernels.data, stride)
    t_out = y.shape[2]

    def backward(g):
        gx = gw = None
        if kernels.requires_grad:
            windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
            if windows.size <= _IM2COL_LIMIT:
                gw = np.tensordot(g, windows, axes=([0, 2], [0, 2]))
            else:
                gw = sum(np.tensordot(g[i], windows[i], axes=([1], [1])) for i in range(b))
        if x.requires_grad:
            if stride > 1:
                gd = np.zeros((b, o, (t_out - 1) * stride + 1), dtype=g.dtype)
                gd[:, :, ::stride] = g
            else:
                gd = g
            gpad = np.pad(gd, ((0, 0), (0, 0), (k - 1, k - 1)))
            flipped = np.ascontiguousarray(kernels.data[:, :, ::-1].transpose(1, 0, 2))
            full = _conv_forward(gpad, flipped, 1)  # (B, C, (t_out-1)*stride + K)
            gxp = np.zeros_like(xp)
            gxp[:, :, : full.shape[2]] = full
            gx = gxp[:, :, padding: padding + t] if padding else gxp
        return gx, gw

    return _make(y, (x, kernels), backward)


def maxpool1d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max over ``window`` samples; the tail remainder is dropped.

    Gradient goes to the first maximal element of each window.
    """
    _check_btc("maxpool1d", x)
    b, c, t = x.shape
    if window < 1:
        raise ValueError("maxpool1d: window must be positive")
    if t < window:
        raise ShapeError(f"maxpool1d: length {t} shorter than window {window}")
    n = t // window
    xr = x.data[:, :, : n * window].reshape(b, c, n, window)
    idx = np.argmax(xr, axis=3)[..., None]
    y = np.take_along_axis(xr, idx, axis=3)[..., 0]

    def backward(g):
        gr = np.zeros((b, c, n, window), dtype=g.dtype)
        np.put_along_axis(gr, idx, g[..., None], axis=3)
        gx = np.zeros_like(x.data)
        gx[:, :, : n * window] = gr.reshape(b, c, n * window)
        return (gx,)

    return _make(y, (x,), backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> BatchNormState:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Per-channel normalization over batch and time of a (B, C, T) map.

    Training mode uses batch statistics and updates ``state`` in place; eval
    mode uses the running statistics.
    """
    _check_btc("batch_norm", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine params {gamma.shape}/{beta.shape} for {c} channels")
    axes = (0, 2)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // c
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        unbiased = var * n / max(n - 1, 1)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    y = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        dxhat = g * gamma.data[None, :, None]
        if training:
            n = x.data.size // c
            gx = (inv_std[None, :, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=axes)[None, :, None]
                - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None]
            )
        else:
            gx = dxhat * inv_std[None, :, None]
        return gx, ggamma, gbeta

    return _make(y.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def mean_time(x: Tensor) -> Tensor:
    """(B, C, T) -> (B, C) average over time."""
    _check_btc("mean_time", x)
    t = x.shape[2]
    return _make(x.data.mean(axis=2), (x,),
                 lambda g: (np.repeat(g[:, :, None] / t, t, axis=2),))


def _check_channel(op: str, x: Tensor, s: Tensor) -> None:
    _check_btc(op, x)
    if s.shape != x.shape[:2]:
        raise ShapeError(f"{op}: per-channel operand {s.shape} does not match {x.shape[:2]}")


def mul_channel(x: Tensor, s: Tensor) -> Tensor:
    """``x[b, c, t] * s[b, c]``."""
    _check_channel("mul_channel", x, s)
    return _make(x.data * s.data[:, :, None], (x, s),
                 lambda g: (g * s.data[:, :, None], (g * x.data).sum(axis=2)))


def add_channel(x: Tensor, s: Tensor) -> Tensor:
    """``x[b, c, t] + s[b, c]``."""
    _check_channel("add_channel", x, s)
    return _make(x.data + s.data[:, :, None], (x, s), lambda g: (g, g.sum(axis=2)))


def swap_time_channel(x: Tensor) -> Tensor:
    """(B, C, T) <-> (B, T, C)."""
    _check_btc("swap_time_channel", x)
    return _make(np.ascontiguousarray(x.data.transpose(0, 2, 1)), (x,),
                 lambda g: (g.transpose(0, 2, 1),))


def select_time(x: Tensor, t: int) -> Tensor:
    """(B, T, D) -> (B, D) at step ``t``."""
    if x.data.ndim != 3:
        raise ShapeError(f"select_time: expected (batch, time, features), got {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, t, :] = g
        return (full,)

    return _make(x.data[:, t, :], (x,), backward)


# ---------------------------------------------------------------- recurrence

@dataclass
class GruParams:
    """GRU weights, gates stacked in (reset, update, candidate) order."""

    w_ih: Tensor  # (3H, D)
    w_hh: Tensor  # (3H, H)
    b_ih: Tensor  # (3H,)
    b_hh: Tensor  # (3H,)

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]


def gru_sequence(x: Tensor, p: GruParams) -> Tensor:
    """Run a GRU from a zero state over (B, T, D) or (T, D); return the last hidden state.

    r = σ(W_ir x + b_ir + W_hr h + b_hr)
    z = σ(W_iz x + b_iz + W_hz h + b_hz)
    n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
    h' = (1 - z) ⊙ n + z ⊙ h
    """
    single = x.data.ndim == 2
    if single:
        x = _make(x.data[None], (x,), lambda g: (g[0],))
    if x.data.ndim != 3:
        raise ShapeError(f"gru_sequence: expected (T, D) or (B, T, D), got {x.shape}")
    b, t, d = x.shape
    if t == 0:
        raise ShapeError("gru_sequence: empty sequence")
    if p.w_ih.shape[1] != d:
        raise ShapeError(f"gru_sequence: input dim {d} but w_ih is {p.w_ih.shape}")
    h_size = p.hidden_size
    h = Tensor(np.zeros((b, h_size), dtype=x.dtype))
    for step in range(t):
        gx_r, gx_z, gx_n = split_last(linear(select_time(x, step), p.w_ih, p.b_ih), 3)
        gh_r, gh_z, gh_n = split_last(linear(h, p.w_hh, p.b_hh), 3)
        r = sigmoid(add(gx_r, gh_r))
        z = sigmoid(add(gx_z, gh_z))
        n = tanh(add(gx_n, mul(r, gh_n)))
        h = add(n, mul(z, sub(h, n)))
    if single:
        h = _make(h.data[0], (h,), lambda g: (g[None],))
    return h


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    """Moment accumulators and hyperparameters for ADAM."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **hyper) -> AdamState:
        params = list(params)
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState) -> None:
    """Apply one bias-corrected ADAM update to ``params`` in place.

    A ``None`` gradient is treated as zeros.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError(f"adam_step: {len(params)} params, {len(grads)} grads, "
                         f"{len(state.m)} accumulators")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.shape}")
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)

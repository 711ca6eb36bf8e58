"""Sequence layers with hand-written backward passes, losses and Adam.

All layers work on batched sequences shaped ``(B, T, C)`` (time-major per
sample, channels last).  ``Linear`` acts on the last axis of any array, so it
also serves as a per-frame dense layer.  Parameters are float64 arrays held in
``layer.params``; ``layer.grads`` holds buffers of identical shape that
``backward`` *accumulates* into until ``zero_grad`` is called.

The module-level functions at the bottom (``causal_dilated_conv_forward``,
``avg_pool_time`` ...) are single-sequence conveniences over the same maths.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, InputError, UsageError

BCE_EPS = 1e-7


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base class: parameter bookkeeping, mode switching, cache checks."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.training = False
        self._cache = None

    def _add_param(self, name: str, value: np.ndarray) -> None:
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def children(self) -> List[Tuple[str, "Layer"]]:
        return []

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        for key, value in self.params.items():
            yield prefix + key, value, self.grads[key]
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def layers(self) -> Iterator["Layer"]:
        yield self
        for _, child in self.children():
            yield from child.layers()

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g[...] = 0.0

    def train(self, mode: bool = True) -> "Layer":
        for layer in self.layers():
            layer.training = mode
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def _pop_cache(self):
        if self._cache is None:
            raise UsageError(f"{type(self).__name__}.backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    __call__ = forward


def _check_seq(x: np.ndarray, channels: int, who: str) -> None:
    if x.ndim != 3:
        raise InputError(f"{who} expects (B, T, C) input, got shape {x.shape}")
    if x.shape[2] != channels:
        raise ConfigurationError(f"{who} expects {channels} input channels, got {x.shape[2]}")


class CausalConv1d(Layer):
    """Dilated causal convolution.

    ``out[t] = b + sum_j x[t - j*dilation] @ W[j]`` with rows before the start
    of the sequence treated as zero, so the output keeps length T.
    """

    def __init__(self, c_in: int, c_out: int, kernel_size: int, dilation: int = 1,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if kernel_size < 1 or dilation < 1:
            raise ConfigurationError("kernel_size and dilation must be >= 1")
        self.c_in, self.c_out = c_in, c_out
        self.kernel_size, self.dilation = kernel_size, dilation
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(c_in * kernel_size)
        self._add_param("W", _uniform(rng, bound, (kernel_size, c_in, c_out)))
        self._add_param("b", _uniform(rng, bound, (c_out,)))

    def _columns(self, x):
        """(B, T, k*Cin) matrix whose j-th block is x delayed by j*dilation."""
        B, T, C = x.shape
        cols = np.zeros((B, T, self.kernel_size, C))
        for j in range(self.kernel_size):
            shift = j * self.dilation
            if shift >= T:
                break
            cols[:, shift:, j] = x[:, :T - shift]
        return cols.reshape(B, T, -1)

    def forward(self, x):
        _check_seq(x, self.c_in, "CausalConv1d")
        cols = self._columns(x)
        self._cache = cols
        return cols @ self.params["W"].reshape(-1, self.c_out) + self.params["b"]

    def backward(self, dout):
        cols = self._pop_cache()
        B, T, _ = cols.shape
        W = self.params["W"].reshape(-1, self.c_out)
        self.grads["W"] += (cols.reshape(-1, W.shape[0]).T @ dout.reshape(-1, self.c_out)).reshape(
            self.grads["W"].shape)
        self.grads["b"] += dout.sum(axis=(0, 1))
        dcols = (dout @ W.T).reshape(B, T, self.kernel_size, self.c_in)
        dx = np.zeros((B, T, self.c_in))
        for j in range(self.kernel_size):
            shift = j * self.dilation
            if shift >= T:
                break
            dx[:, :T - shift] += dcols[:, shift:, j]
        return dx


class Conv1x1(Layer):
    """Per-time-step affine map (a kernel-1 convolution)."""

    def __init__(self, c_in: int, c_out: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(c_in)
        self._add_param("W", _uniform(rng, bound, (c_in, c_out)))
        self._add_param("b", _uniform(rng, bound, (c_out,)))

    def forward(self, x):
        _check_seq(x, self.c_in, "Conv1x1")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self._pop_cache()
        self.grads["W"] += x.reshape(-1, self.c_in).T @ dout.reshape(-1, self.c_out)
        self.grads["b"] += dout.sum(axis=(0, 1))
        return dout @ self.params["W"].T


class Linear(Layer):
    """Dense layer over the last axis of its input."""

    def __init__(self, d_in: int, d_out: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(d_in)
        self._add_param("W", _uniform(rng, bound, (d_in, d_out)))
        self._add_param("b", _uniform(rng, bound, (d_out,)))

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ConfigurationError(f"Linear expects last dim {self.d_in}, got {x.shape[-1]}")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self._pop_cache()
        self.grads["W"] += x.reshape(-1, self.d_in).T @ dout.reshape(-1, self.d_out)
        self.grads["b"] += dout.reshape(-1, self.d_out).sum(axis=0)
        return dout @ self.params["W"].T


def pool_matrix(T: int, d: int) -> np.ndarray:
    if d < 1:
        raise ConfigurationError("pool factor must be >= 1")
    if T % d:
        raise InputError(f"sequence length {T} is not divisible by pool factor {d}")
    P = np.zeros((T // d, T))
    for i in range(T // d):
        P[i, i * d:(i + 1) * d] = 1.0 / d
    return P


def upsample_matrix(T_small: int, d: int, mode: str = "nearest") -> np.ndarray:
    """Matrix U with ``up = U @ x`` along the time axis, shape (T_small*d, T_small)."""
    if d < 1:
        raise ConfigurationError("upsample factor must be >= 1")
    T = T_small * d
    U = np.zeros((T, T_small))
    if mode == "nearest":
        U[np.arange(T), np.arange(T) // d] = 1.0
    elif mode == "linear":
        # half-pixel centres, edges clamped
        src = np.clip((np.arange(T) + 0.5) / d - 0.5, 0.0, T_small - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, T_small - 1)
        frac = src - lo
        np.add.at(U, (np.arange(T), lo), 1.0 - frac)
        np.add.at(U, (np.arange(T), hi), frac)
    else:
        raise ConfigurationError(f"unknown upsample mode {mode!r}")
    return U


class AvgPoolTime(Layer):
    """Mean over consecutive non-overlapping blocks of ``d`` time steps."""

    def __init__(self, d: int):
        super().__init__()
        if d < 1:
            raise ConfigurationError("pool factor must be >= 1")
        self.d = d

    def forward(self, x):
        B, T, C = x.shape
        if T % self.d:
            raise InputError(f"sequence length {T} is not divisible by pool factor {self.d}")
        self._cache = x.shape
        blocks = x.reshape(B, T // self.d, self.d, C)
        # anchor on the first element so constant blocks average exactly
        first = blocks[:, :, :1]
        return first[:, :, 0] + (blocks - first).mean(axis=2)

    def backward(self, dout):
        self._pop_cache()
        return np.repeat(dout / self.d, self.d, axis=1)


class UpsampleTime(Layer):
    """Restore length T from T/d: row repetition ("nearest") or linear interpolation."""

    def __init__(self, d: int, mode: str = "nearest"):
        super().__init__()
        upsample_matrix(1, d, mode)  # validates d and mode
        self.d, self.mode = d, mode
        self._mats: Dict[int, np.ndarray] = {}

    def _matrix(self, T_small):
        if T_small not in self._mats:
            self._mats[T_small] = upsample_matrix(T_small, self.d, self.mode)
        return self._mats[T_small]

    def forward(self, x):
        self._cache = x.shape
        if self.mode == "nearest":
            return np.repeat(x, self.d, axis=1)
        return np.matmul(self._matrix(x.shape[1]), x)

    def backward(self, dout):
        B, T_small, C = self._pop_cache()
        if self.mode == "nearest":
            return dout.reshape(B, T_small, self.d, C).sum(axis=2)
        return np.matmul(self._matrix(T_small).T, dout)


class LSTM(Layer):
    """Single-layer LSTM returning the hidden state at every step.

    Gate order in the fused weights is input, forget, cell, output.  Initial
    hidden and cell states are zero.
    """

    def __init__(self, c_in: int, hidden: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.c_in, self.hidden = c_in, hidden
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(hidden)
        H = hidden
        self._add_param("Wx", _uniform(rng, bound, (c_in, 4 * H)))
        self._add_param("Wh", _uniform(rng, bound, (H, 4 * H)))
        self._add_param("b", _uniform(rng, bound, (4 * H,)))

    def forward(self, x):
        _check_seq(x, self.c_in, "LSTM")
        B, T, _ = x.shape
        H = self.hidden
        Wh = self.params["Wh"]
        Z = x @ self.params["Wx"] + self.params["b"]
        gates = np.empty((B, T, 4 * H))
        cells = np.empty((B, T + 1, H))
        hs = np.empty((B, T + 1, H))
        cells[:, 0] = 0.0
        hs[:, 0] = 0.0
        for t in range(T):
            z = Z[:, t] + hs[:, t] @ Wh
            g = gates[:, t]
            g[:, :2 * H] = expit(z[:, :2 * H])
            g[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
            g[:, 3 * H:] = expit(z[:, 3 * H:])
            cells[:, t + 1] = g[:, H:2 * H] * cells[:, t] + g[:, :H] * g[:, 2 * H:3 * H]
            hs[:, t + 1] = g[:, 3 * H:] * np.tanh(cells[:, t + 1])
        self._cache = (x, gates, cells, hs)
        return hs[:, 1:].copy()

    def backward(self, dout):
        x, gates, cells, hs = self._pop_cache()
        B, T, _ = x.shape
        H = self.hidden
        Wh = self.params["Wh"]
        dZ = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            g = gates[:, t]
            i, f, c_hat, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
            tanh_c = np.tanh(cells[:, t + 1])
            dh = dout[:, t] + dh_next
            dc = dh * o * (1.0 - tanh_c ** 2) + dc_next
            dz = dZ[:, t]
            dz[:, :H] = dc * c_hat * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cells[:, t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - c_hat ** 2)
            dz[:, 3 * H:] = dh * tanh_c * o * (1.0 - o)
            dh_next = dz @ Wh.T
            dc_next = dc * f
        flat = dZ.reshape(-1, 4 * H)
        self.grads["Wx"] += x.reshape(-1, self.c_in).T @ flat
        self.grads["Wh"] += hs[:, :-1].reshape(-1, H).T @ flat
        self.grads["b"] += flat.sum(axis=0)
        return dZ @ self.params["Wx"].T


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._pop_cache(), dout, 0.0)


class Sigmoid(Layer):
    def forward(self, x):
        y = expit(x)
        self._cache = y
        return y

    def backward(self, dout):
        y = self._pop_cache()
        return dout * y * (1.0 - y)


class Dropout(Layer):
    """Inverted dropout; identity in eval mode or when p == 0."""

    def __init__(self, p: float, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng or np.random.default_rng(0)

    def forward(self, x):
        if not self.training or self.p == 0.0:
            self._cache = None, True
            return x
        mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        self._cache = mask, False
        return x * mask

    def backward(self, dout):
        mask, identity = self._pop_cache()
        return dout if identity else dout * mask


class LastStep(Layer):
    """(B, T, C) -> (B, C): keep the final time step."""

    def forward(self, x):
        self._cache = x.shape
        return x[:, -1].copy()

    def backward(self, dout):
        shape = self._pop_cache()
        dx = np.zeros(shape)
        dx[:, -1] = dout
        return dx


class Flatten(Layer):
    """(B, T, C) -> (B, T*C)."""

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._pop_cache())


class Unflatten(Layer):
    """(B, T*C) -> (B, T, C)."""

    def __init__(self, T: int, C: int):
        super().__init__()
        self.T, self.C = T, C

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], self.T, self.C)

    def backward(self, dout):
        return dout.reshape(self._pop_cache())


class Sequential(Layer):
    def __init__(self, *layers: Layer, names: Optional[Sequence[str]] = None):
        super().__init__()
        self.stack = list(layers)
        self.names = list(names) if names is not None else [str(i) for i in range(len(layers))]

    def children(self):
        return list(zip(self.names, self.stack))

    def forward(self, x):
        for layer in self.stack:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.stack):
            dout = layer.backward(dout)
        return dout


class TemporalBlock(Layer):
    """Residual TCN level: two causal dilated convs, each with ReLU and dropout.

    The skip path is a 1x1 convolution when the channel count changes and the
    identity otherwise; the sum passes through a final ReLU.
    """

    def __init__(self, c_in: int, c_out: int, kernel_size: int, dilation: int, dropout: float,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.branch = Sequential(
            CausalConv1d(c_in, c_out, kernel_size, dilation, rng), ReLU(), Dropout(dropout, rng),
            CausalConv1d(c_out, c_out, kernel_size, dilation, rng), ReLU(), Dropout(dropout, rng),
            names=["conv1", "relu1", "drop1", "conv2", "relu2", "drop2"],
        )
        self.downsample = Conv1x1(c_in, c_out, rng) if c_in != c_out else None
        self.out_relu = ReLU()

    def children(self):
        kids = [("branch", self.branch)]
        if self.downsample is not None:
            kids.append(("downsample", self.downsample))
        return kids + [("relu", self.out_relu)]

    def forward(self, x):
        res = x if self.downsample is None else self.downsample.forward(x)
        return self.out_relu.forward(self.branch.forward(x) + res)

    def backward(self, dout):
        d = self.out_relu.backward(dout)
        dx = self.branch.backward(d)
        if self.downsample is None:
            return dx + d
        return dx + self.downsample.backward(d)


def temporal_conv_net(c_in: int, hidden: int, levels: int, kernel_size: int, dropout: float,
                      rng: Optional[np.random.Generator] = None) -> Sequential:
    """Stack of ``levels`` residual blocks with dilation 2**level."""
    rng = rng or np.random.default_rng(0)
    blocks = [TemporalBlock(c_in if i == 0 else hidden, hidden, kernel_size, 2 ** i, dropout, rng)
              for i in range(levels)]
    return Sequential(*blocks, names=[f"level{i}" for i in range(levels)])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(x: np.ndarray, x_hat: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over every element, and its gradient w.r.t. ``x_hat``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise InputError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    diff = x_hat - x
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def bce_loss(p, y, weight_pos: float = 1.0) -> Tuple[float, np.ndarray]:
    """Binary cross-entropy averaged over samples, with an optional positive-class weight.

    Per sample: ``-(weight_pos * y * log p + (1 - y) * log(1 - p))`` with p
    clamped to ``[1e-7, 1 - 1e-7]``.  Returns the loss and its gradient w.r.t.
    ``p`` (zero where the clamp is active).
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    per = -(weight_pos * y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    grad = (-(weight_pos * y) / pc + (1.0 - y) / (1.0 - pc)) / per.size
    grad = np.where((p > BCE_EPS) & (p < 1.0 - BCE_EPS), grad, 0.0)
    return float(np.mean(per)), grad


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    decay: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    epoch: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigurationError("decay must lie in (0, 1]")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0) or self.eps <= 0:
            raise ConfigurationError("invalid Adam betas/eps")

    @property
    def effective_lr(self) -> float:
        return self.lr * self.decay ** self.epoch


def adam_step(state: AdamState, params: Sequence[Tuple[str, np.ndarray, np.ndarray]]) -> AdamState:
    """One bias-corrected Adam update, applied in place to each (name, param, grad)."""
    state.t += 1
    lr = state.effective_lr
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p, g in params:
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Adam over a fixed parameter list with per-epoch exponential decay."""

    def __init__(self, params, lr=1e-3, decay=0.99, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, decay=decay, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self):
        adam_step(self.state, self.params)

    def set_epoch(self, epoch: int):
        self.state.epoch = epoch


# ---------------------------------------------------------------------------
# single-sequence conveniences
# ---------------------------------------------------------------------------

def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InputError(f"expected a (T, C) sequence, got shape {x.shape}")
    return x[None]


def causal_dilated_conv_forward(x, W, b, dilation=1):
    """Apply a causal dilated conv with weights ``W`` (k, Cin, Cout) to a (T, Cin) sequence."""
    W = np.asarray(W, dtype=np.float64)
    xb = _as_batch(x)
    if W.ndim != 3 or W.shape[1] != xb.shape[2]:
        raise ConfigurationError(f"kernel shape {W.shape} does not match {xb.shape[2]} input channels")
    layer = CausalConv1d(W.shape[1], W.shape[2], W.shape[0], dilation)
    layer.params["W"][...] = W
    layer.params["b"][...] = b
    return layer.forward(xb)[0]


def conv1x1_forward(x, W, b):
    W = np.asarray(W, dtype=np.float64)
    xb = _as_batch(x)
    if W.ndim != 2 or W.shape[0] != xb.shape[2]:
        raise ConfigurationError(f"weight shape {W.shape} does not match {xb.shape[2]} input channels")
    return xb[0] @ W + b


def avg_pool_time(x, d):
    return AvgPoolTime(d).forward(_as_batch(x))[0]


def upsample_time(x, d, mode="nearest"):
    return UpsampleTime(d, mode).forward(_as_batch(x))[0]


def lstm_forward(x, Wx, Wh, b):
    Wx = np.asarray(Wx, dtype=np.float64)
    xb = _as_batch(x)
    if Wx.shape[0] != xb.shape[2]:
        raise ConfigurationError(f"Wx shape {Wx.shape} does not match {xb.shape[2]} input channels")
    layer = LSTM(Wx.shape[0], Wx.shape[1] // 4)
    layer.params["Wx"][...] = Wx
    layer.params["Wh"][...] = Wh
    layer.params["b"][...] = b
    return layer.forward(xb)[0]


def linear_forward(x, W, b):
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if x.shape[-1] != W.shape[0]:
        raise ConfigurationError(f"input dim {x.shape[-1]} does not match weight shape {W.shape}")
    return x @ W + b


def dropout(x, p, mode="train", rng=None):
    layer = Dropout(p, rng)
    layer.train(mode == "train")
    return layer.forward(np.asarray(x, dtype=np.float64))

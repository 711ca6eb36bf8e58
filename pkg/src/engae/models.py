"""Autoencoder and binary-classifier architectures built from :mod:`engae.seqnn`."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, fields
from typing import List, Optional

import numpy as np

from . import seqnn as nn
from .errors import ConfigurationError, FormatError, InputError

AE_ARCHS = ("tcn_ae", "lstm_ae", "ff_ae")
BC_ARCHS = ("tcn_bc", "lstm_bc", "ff_bc")
ARCHS = AE_ARCHS + BC_ARCHS

CHECKPOINT_MAGIC = b"ENGAE"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the full-size TCN settings (L=8, h=24, k=8, p=0.05,
    d=4) with bottleneck b=64 for the LSTM/feedforward models; LSTM models are
    usually built with h=128.
    """

    arch: str = "tcn_ae"
    n: int = 11
    T: int = 300
    L: int = 8
    h: int = 24
    k: int = 8
    p: float = 0.05
    d: int = 4
    b: int = 64
    upsample: str = "nearest"
    ff_per_frame: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        for name in ("n", "T", "L", "h", "k", "d", "b"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigurationError(f"dropout p must lie in [0, 1), got {self.p}")
        if self.arch == "tcn_ae" and self.T % self.d:
            raise ConfigurationError(f"T={self.T} is not divisible by pool factor d={self.d}")
        if self.upsample not in ("nearest", "linear"):
            raise ConfigurationError(f"unknown upsample mode {self.upsample!r}")

    @property
    def is_autoencoder(self) -> bool:
        return self.arch in AE_ARCHS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def receptive_field(config: ModelConfig) -> int:
    """Frames seen by one TCN output: two convs per level, dilation doubling per level."""
    return 1 + 2 * (config.k - 1) * (2 ** config.L - 1)


class Model:
    """A built network plus its config; wraps batching and mode handling."""

    def __init__(self, config: ModelConfig, net: nn.Sequential):
        self.config = config
        self.net = net
        self.net.eval()

    # -- bookkeeping -------------------------------------------------------
    @property
    def mode(self) -> str:
        return "train" if self.net.training else "eval"

    def train(self) -> "Model":
        self.net.train(True)
        return self

    def eval(self) -> "Model":
        self.net.train(False)
        return self

    def named_parameters(self):
        return list(self.net.named_parameters())

    def zero_grad(self):
        self.net.zero_grad()

    def reseed(self, seed: int) -> None:
        """Point every dropout layer at one fresh generator."""
        rng = np.random.default_rng(seed)
        for layer in self.net.layers():
            if isinstance(layer, nn.Dropout):
                layer.rng = rng

    def num_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    # -- passes ------------------------------------------------------------
    def _batch(self, x) -> tuple:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (self.config.T, self.config.n):
            raise InputError(
                f"expected input of shape (T={self.config.T}, n={self.config.n}), got {x.shape[-2:]}")
        if not np.all(np.isfinite(x)):
            raise InputError("input contains non-finite values")
        return x, single

    def forward(self, x) -> np.ndarray:
        xb, single = self._batch(x)
        out = self.net.forward(xb)
        if not self.config.is_autoencoder:
            out = out.reshape(-1)
        return out[0] if single else out

    def backward(self, dout) -> np.ndarray:
        dout = np.asarray(dout, dtype=np.float64)
        if not self.config.is_autoencoder:
            dout = dout.reshape(-1, 1)
        elif dout.ndim == 2:
            dout = dout[None]
        return self.net.backward(dout)


def forward_ae(model: Model, x) -> np.ndarray:
    if not model.config.is_autoencoder:
        raise ConfigurationError(f"{model.config.arch} is not an autoencoder")
    return model.forward(x)


def forward_bc(model: Model, x):
    if model.config.is_autoencoder:
        raise ConfigurationError(f"{model.config.arch} is not a classifier")
    return model.forward(x)


def reconstruction_error(x, x_hat) -> float:
    return nn.mse_loss(x, x_hat)[0]


def _lstm_encoder(c: ModelConfig, rng) -> List[nn.Layer]:
    return [nn.LSTM(c.n, c.h, rng), nn.LSTM(c.h, c.b, rng)]


def _ff_encoder(c: ModelConfig, rng) -> tuple:
    d_in = c.n if c.ff_per_frame else c.T * c.n
    layers = [] if c.ff_per_frame else [nn.Flatten()]
    layers += [nn.Linear(d_in, 2 * c.b, rng), nn.ReLU(), nn.Linear(2 * c.b, c.b, rng), nn.ReLU()]
    return layers, d_in


def build(config: ModelConfig) -> Model:
    c = config
    rng = np.random.default_rng(c.init_seed)
    if c.arch == "tcn_ae":
        net = nn.Sequential(
            nn.temporal_conv_net(c.n, c.h, c.L, c.k, c.p, rng),
            nn.Conv1x1(c.h, c.n, rng),
            nn.AvgPoolTime(c.d),
            nn.UpsampleTime(c.d, c.upsample),
            nn.temporal_conv_net(c.n, c.h, c.L, c.k, c.p, rng),
            nn.Conv1x1(c.h, c.n, rng),
            names=["tcn1", "conv1", "pool", "upsample", "tcn2", "conv2"],
        )
    elif c.arch == "lstm_ae":
        net = nn.Sequential(*_lstm_encoder(c, rng), nn.LSTM(c.b, c.h, rng), nn.LSTM(c.h, c.n, rng),
                            names=["enc1", "enc2", "dec1", "dec2"])
    elif c.arch == "ff_ae":
        enc, d_in = _ff_encoder(c, rng)
        dec = [nn.Linear(c.b, 2 * c.b, rng), nn.ReLU(), nn.Linear(2 * c.b, d_in, rng)]
        if not c.ff_per_frame:
            dec.append(nn.Unflatten(c.T, c.n))
        net = nn.Sequential(*enc, *dec)
    elif c.arch == "tcn_bc":
        net = nn.Sequential(nn.temporal_conv_net(c.n, c.h, c.L, c.k, c.p, rng), nn.LastStep(),
                            nn.Linear(c.h, 1, rng), nn.Sigmoid(),
                            names=["tcn1", "last", "fc", "sigmoid"])
    elif c.arch == "lstm_bc":
        net = nn.Sequential(*_lstm_encoder(c, rng), nn.LastStep(), nn.Linear(c.b, 1, rng), nn.Sigmoid(),
                            names=["enc1", "enc2", "last", "fc", "sigmoid"])
    else:  # ff_bc
        enc, _ = _ff_encoder(c, rng)
        head = [nn.LastStep()] if c.ff_per_frame else []
        net = nn.Sequential(*enc, *head, nn.Linear(c.b, 1, rng), nn.Sigmoid())
    model = Model(c, net)
    model.reseed(c.init_seed)
    return model


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# layout (little-endian):
#   b"ENGAE" | u16 version | u16 len + arch tag | u32 len + config JSON
#   | u32 param count | per param: u16 len + name, u8 ndim, u32 * ndim shape, f64 data

def save_checkpoint(model: Model) -> bytes:
    buf = io.BytesIO()
    arch = model.config.arch.encode()
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<H", len(arch)) + arch)
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    params = model.named_parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, p, _ in params:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(data: bytes) -> Model:
    r = _Reader(bytes(data))
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError("not an ENGAE checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<H")
    arch = r.take(n).decode("utf-8", errors="replace")
    (n,) = r.unpack("<I")
    try:
        cfg = json.loads(r.take(n).decode())
        config = ModelConfig.from_dict(cfg)
    except (ValueError, TypeError, ConfigurationError) as exc:
        raise FormatError(f"bad checkpoint config: {exc}") from exc
    if config.arch != arch:
        raise FormatError(f"arch tag {arch!r} disagrees with config arch {config.arch!r}")
    model = build(config)
    expected = model.named_parameters()
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise FormatError(f"checkpoint has {count} parameter arrays, model expects {len(expected)}")
    for name, p, _ in expected:
        (n,) = r.unpack("<H")
        got = r.take(n).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if got != name or tuple(shape) != p.shape:
            raise FormatError(f"parameter mismatch: file has {got}{tuple(shape)}, model expects {name}{p.shape}")
        p[...] = np.frombuffer(r.take(8 * p.size), dtype="<f8").reshape(p.shape)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after checkpoint payload")
    return model

"""Synthetic engaged/disengaged frame-feature streams.

Engaged streams: positive, slowly varying valence/arousal; gaze and head
rotation jittering around zero; AU45 near zero with regular blinks.  Smooth
jitter is AR(1) noise (coefficient 0.95).

Disengaged streams start from the engaged stream drawn with the same seed and
add one or more anomalies scaled by ``anomaly_intensity``; anomaly randomness
comes from a separate generator so intensity 0 reproduces the engaged stream.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigurationError
from .features import FEATURE_COLUMNS, FrameSeries

ANOMALY_TYPES = ("gaze_away", "high_blink", "negative_affect", "head_motion", "eye_closure")
AR_COEF = 0.95

# stationary std of the AR(1) jitter per feature
DEFAULT_NOISE = {
    "valence": 0.03, "arousal": 0.03, "au45": 0.05,
    "gaze_x": 0.04, "gaze_y": 0.04,
    "head_x": 4.0, "head_y": 4.0, "head_z": 6.0,
    "pitch": 0.03, "yaw": 0.03, "roll": 0.03,
}

_BLINK_SHAPE = np.array([0.8, 1.9, 2.6, 1.9, 0.8])
_BLINK_PERIOD_S = 4.0


@dataclass
class SynthConfig:
    """Generator settings.

    ``anomaly_types`` is the pool disengaged samples draw from: each sample
    gets 1-3 types drawn uniformly from it, or all of them when
    ``pin_types`` is set.
    """

    seed: int = 0
    fps: float = 30.0
    duration_s: float = 10.0
    anomaly_types: Tuple[str, ...] = ANOMALY_TYPES
    anomaly_intensity: float = 1.0
    pin_types: bool = False
    noise_std: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.anomaly_types = tuple(self.anomaly_types)
        unknown = set(self.anomaly_types) - set(ANOMALY_TYPES)
        if unknown:
            raise ConfigurationError(f"unknown anomaly types {sorted(unknown)}")
        if not 0.0 <= self.anomaly_intensity <= 1.0:
            raise ConfigurationError("anomaly_intensity must lie in [0, 1]")
        if self.fps <= 0 or self.duration_s <= 0:
            raise ConfigurationError("fps and duration_s must be positive")
        bad = {k: v for k, v in self.noise_std.items() if k not in DEFAULT_NOISE or v < 0}
        if bad:
            raise ConfigurationError(f"invalid noise_std entries {bad}")

    @property
    def n_frames(self) -> int:
        return int(round(self.fps * self.duration_s))

    def noise(self, name: str) -> float:
        return self.noise_std.get(name, DEFAULT_NOISE[name])


@dataclass
class LabeledSample:
    series: FrameSeries
    label: str
    anomaly_types: Tuple[str, ...] = ()


def _ar1(rng: np.random.Generator, T: int, std: float) -> np.ndarray:
    e = rng.standard_normal(T + 1)
    b = np.sqrt(1.0 - AR_COEF ** 2) * std
    return lfilter([b], [1.0, -AR_COEF], e[1:], zi=[AR_COEF * std * e[0]])[0]


def _add_blink(au45: np.ndarray, centre: int, amp: float) -> None:
    half = len(_BLINK_SHAPE) // 2
    for j, v in enumerate(_BLINK_SHAPE):
        t = centre - half + j
        if 0 <= t < len(au45):
            au45[t] += amp * v


def _envelope(T: int, start: int, length: int, edge: int) -> np.ndarray:
    """1 on [start, start+length) with raised-cosine edges, 0 elsewhere."""
    env = np.zeros(T)
    stop = min(T, start + length)
    env[start:stop] = 1.0
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, edge))
    for j in range(edge):
        if start + j < stop:
            env[start + j] = min(env[start + j], ramp[j])
        if stop - 1 - j >= start:
            env[stop - 1 - j] = min(env[stop - 1 - j], ramp[j])
    return env


def _baseline(config: SynthConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, int]:
    T = config.n_frames
    col = {name: i for i, name in enumerate(FEATURE_COLUMNS)}
    v = np.zeros((T, len(FEATURE_COLUMNS)))
    means = {
        "valence": 0.3 + rng.normal(0.0, 0.05),
        "arousal": 0.2 + rng.normal(0.0, 0.05),
        "au45": 0.2,
        "gaze_x": rng.normal(0.0, 0.02), "gaze_y": rng.normal(0.0, 0.02),
        "head_x": rng.normal(0.0, 10.0), "head_y": rng.normal(0.0, 10.0),
        "head_z": 550.0 + rng.normal(0.0, 20.0),
        "pitch": rng.normal(0.0, 0.02), "yaw": rng.normal(0.0, 0.02), "roll": rng.normal(0.0, 0.02),
    }
    for name in FEATURE_COLUMNS:
        v[:, col[name]] = means[name] + _ar1(rng, T, config.noise(name))
    period = _BLINK_PERIOD_S * config.fps
    t = rng.uniform(0.0, period)
    n_blinks = 0
    au45 = v[:, col["au45"]]
    while t < T:
        _add_blink(au45, int(t), rng.uniform(0.9, 1.1))
        n_blinks += 1
        t += period * rng.uniform(0.8, 1.2)
    confidence = np.clip(0.97 + _ar1(rng, T, 0.01), 0.0, 1.0)
    return v, confidence, n_blinks


def _finish(v: np.ndarray) -> np.ndarray:
    v[:, 0:2] = np.clip(v[:, 0:2], -1.0, 1.0)
    v[:, 2] = np.clip(v[:, 2], 0.0, 5.0)
    return v


def gen_engaged(config: SynthConfig, seed: Optional[int] = None, sample_id: str = "") -> LabeledSample:
    seed = config.seed if seed is None else seed
    v, conf, _ = _baseline(config, np.random.default_rng(seed))
    return LabeledSample(FrameSeries(_finish(v), config.fps, sample_id, conf), "engaged", ())


def _inject(v: np.ndarray, kind: str, s: float, rng: np.random.Generator, fps: float, n_blinks: int) -> None:
    T = len(v)
    col = {name: i for i, name in enumerate(FEATURE_COLUMNS)}
    t = np.arange(T) / fps
    if kind == "gaze_away":
        length = int(rng.uniform(0.4, 0.6) * T)
        start = int(rng.uniform(0.0, 0.4) * T)
        env = _envelope(T, start, length, max(2, T // 20))
        sign = rng.choice([-1.0, 1.0])
        v[:, col["gaze_x"]] += sign * 0.6 * s * env
        v[:, col["yaw"]] += sign * 0.5 * s * env
        v[:, col["gaze_y"]] += rng.choice([-1.0, 1.0]) * 0.2 * s * env
    elif kind == "high_blink":
        extra = int(round(n_blinks * 4 * s))
        for centre in rng.integers(0, T, size=extra):
            _add_blink(v[:, col["au45"]], int(centre), rng.uniform(0.9, 1.1))
    elif kind == "negative_affect":
        ramp = np.clip(np.arange(T) / max(1.0, 0.2 * T), 0.0, 1.0)
        v[:, col["valence"]] += s * (-0.8 * ramp + _ar1(rng, T, 0.1))
        v[:, col["arousal"]] += s * (-0.5 * ramp + _ar1(rng, T, 0.1))
    elif kind == "head_motion":
        for name, amp in (("pitch", 0.35), ("yaw", 0.35), ("roll", 0.2)):
            f = rng.uniform(0.1, 0.3)
            v[:, col[name]] += s * amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    elif kind == "eye_closure":
        plateau = np.zeros(T)
        for _ in range(rng.integers(1, 3)):
            length = int(rng.uniform(0.15, 0.3) * T)
            start = int(rng.uniform(0.0, 1.0) * max(1, T - length))
            plateau = np.maximum(plateau, 3.5 * s * _envelope(T, start, length, max(2, T // 60)))
        v[:, col["au45"]] = np.maximum(v[:, col["au45"]], plateau)
    else:
        raise ConfigurationError(f"unknown anomaly type {kind!r}")


def gen_disengaged(config: SynthConfig, seed: Optional[int] = None, sample_id: str = "") -> LabeledSample:
    if not config.anomaly_types:
        raise ConfigurationError("disengaged generation needs at least one anomaly type")
    seed = config.seed if seed is None else seed
    v, conf, n_blinks = _baseline(config, np.random.default_rng(seed))
    arng = np.random.default_rng([seed, 1])
    pool = list(config.anomaly_types)
    if config.pin_types:
        kinds = pool
    else:
        k = int(arng.integers(1, min(3, len(pool)) + 1))
        kinds = sorted(arng.choice(pool, size=k, replace=False).tolist(), key=pool.index)
    for kind in kinds:
        _inject(v, kind, config.anomaly_intensity, arng, config.fps, n_blinks)
    return LabeledSample(FrameSeries(_finish(v), config.fps, sample_id, conf), "disengaged", tuple(kinds))


SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def sample_seed(master: int, split: str, label: str, index: int) -> int:
    ss = np.random.SeedSequence([master, SPLIT_CODES[split], int(label == "disengaged"), index])
    return int(ss.generate_state(1)[0])


def generate_samples(config: SynthConfig, counts: Dict[Tuple[str, str], int]) -> List[Tuple[str, str, LabeledSample]]:
    """In-memory dataset: list of (split, id, sample) in canonical order.

    ``counts`` maps (split, label) to a sample count.
    """
    out = []
    for split in ("train", "val", "test"):
        for label in ("engaged", "disengaged"):
            n = counts.get((split, label), 0)
            if n < 0:
                raise ConfigurationError("sample counts must be >= 0")
            gen = gen_engaged if label == "engaged" else gen_disengaged
            tag = "eng" if label == "engaged" else "dis"
            for i in range(n):
                sid = f"{split}_{tag}_{i:05d}"
                out.append((split, sid, gen(config, sample_seed(config.seed, split, label, i), sid)))
    return out


def gen_dataset(config: SynthConfig, out_dir, n_engaged_train: int, n_engaged_test: int,
                n_disengaged_test: int, n_disengaged_train: int = 0, n_engaged_val: int = 0,
                n_disengaged_val: int = 0) -> Path:
    """Write one frame CSV per sample plus ``manifest.jsonl``; returns the manifest path."""
    from .io import ManifestEntry, write_frame_csv, write_manifest

    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    counts = {
        ("train", "engaged"): n_engaged_train, ("train", "disengaged"): n_disengaged_train,
        ("val", "engaged"): n_engaged_val, ("val", "disengaged"): n_disengaged_val,
        ("test", "engaged"): n_engaged_test, ("test", "disengaged"): n_disengaged_test,
    }
    entries = []
    for split, sid, sample in generate_samples(config, counts):
        rel = f"samples/{sid}.csv"
        write_frame_csv(out_dir / rel, sample.series)
        entries.append(ManifestEntry(sid, rel, sample.label, split, list(sample.anomaly_types)))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest

"""Frame-level feature schema, segment-level statistics and windowing.

Frame-level model features, in column order::

    valence, arousal, au45 (eye closure), gaze_x, gaze_y,
    head_x, head_y, head_z, pitch, yaw, roll

The first two are affect features; dropping them gives the 9 behavioral
features.  Segment-level vectors summarise one window of frames into 37 values
(33 without affect), see ``SEGMENT_COLUMNS``.

Note on segment features: the source description lists a second group of 12
velocity/acceleration statistics as "x, y and z components of eye gaze
direction", but gaze has only x/y components everywhere else.  The group is
computed from head location (head_x, head_y, head_z), the only 3-component
quantity available, and named accordingly.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from .errors import InputError

AFFECT_COLUMNS = ("valence", "arousal")
BEHAVIORAL_COLUMNS = ("au45", "gaze_x", "gaze_y", "head_x", "head_y", "head_z", "pitch", "yaw", "roll")
FEATURE_COLUMNS = AFFECT_COLUMNS + BEHAVIORAL_COLUMNS
FRAME_CSV_COLUMNS = ("frame", "confidence") + FEATURE_COLUMNS

MODES = ("behavioral", "behavioral+affect")
DEFAULT_FPS = 30.0
DEFAULT_BLINK_THRESHOLD = 1.0

_DYNAMIC_SOURCES = ("gaze_x", "gaze_y", "head_x", "head_y", "head_z", "pitch", "yaw", "roll")


def _segment_columns() -> Tuple[str, ...]:
    cols = []
    for name in AFFECT_COLUMNS:
        cols += [f"mean_{name}", f"std_{name}"]
    cols.append("blink_rate")
    for name in _DYNAMIC_SOURCES:
        cols += [f"{name}_vel_mean", f"{name}_vel_std", f"{name}_acc_mean", f"{name}_acc_std"]
    return tuple(cols)


SEGMENT_COLUMNS = _segment_columns()
SEGMENT_AFFECT_COLUMNS = SEGMENT_COLUMNS[:4]
SEGMENT_BEHAVIORAL_COLUMNS = SEGMENT_COLUMNS[4:]


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise InputError(f"unknown feature mode {mode!r}; expected one of {MODES}")


def feature_names(mode: str, level: str = "frame") -> Tuple[str, ...]:
    _check_mode(mode)
    if level == "frame":
        return FEATURE_COLUMNS if mode == "behavioral+affect" else BEHAVIORAL_COLUMNS
    if level == "segment":
        return SEGMENT_COLUMNS if mode == "behavioral+affect" else SEGMENT_BEHAVIORAL_COLUMNS
    raise InputError(f"unknown feature level {level!r}")


@dataclass
class FrameSeries:
    """Per-frame features for one recording.

    ``values`` is (T, 11) in ``FEATURE_COLUMNS`` order; ``confidence`` and
    ``frames`` are length-T.
    """

    values: np.ndarray
    fps: float = DEFAULT_FPS
    sample_id: str = ""
    confidence: Optional[np.ndarray] = None
    frames: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(FEATURE_COLUMNS):
            raise InputError(f"frame values must be (T, {len(FEATURE_COLUMNS)}), got {self.values.shape}")
        T = len(self.values)
        if self.fps <= 0:
            raise InputError(f"frame rate must be positive, got {self.fps}")
        if self.confidence is None:
            self.confidence = np.ones(T)
        if self.frames is None:
            self.frames = np.arange(T)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.frames = np.asarray(self.frames)
        if len(self.confidence) != T or len(self.frames) != T:
            raise InputError("confidence/frames length does not match values")
        if T > 1 and np.any(np.diff(self.frames) <= 0):
            raise InputError("frame indices must be strictly increasing")

    def __len__(self):
        return len(self.values)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, FEATURE_COLUMNS.index(name)]


def select_features(series: FrameSeries, mode: str) -> np.ndarray:
    """(T, 11) for behavioral+affect, (T, 9) for behavioral only."""
    _check_mode(mode)
    return series.values.copy() if mode == "behavioral+affect" else series.values[:, 2:].copy()


def velocity(x, fps: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 3:
        raise InputError(f"need at least 3 samples for velocity/acceleration, got {len(x)}")
    return np.diff(x) * fps


def acceleration(x, fps: float = 1.0) -> np.ndarray:
    return np.diff(velocity(x, fps)) * fps


def blink_rate(eye_closure, threshold: float = DEFAULT_BLINK_THRESHOLD) -> float:
    """Peaks above ``threshold`` per frame.

    A peak is a frame strictly above its predecessor and at least its
    successor, so a flat-topped peak is counted once (at its first frame).
    """
    x = np.asarray(eye_closure, dtype=np.float64)
    if x.size == 0:
        raise InputError("blink_rate of an empty series")
    if threshold < 0:
        raise InputError("blink threshold must be >= 0")
    if x.size < 3:
        return 0.0
    mid = x[1:-1]
    peaks = (mid > threshold) & (mid > x[:-2]) & (mid >= x[2:])
    return float(np.count_nonzero(peaks)) / x.size


def segment_features(series: FrameSeries, threshold: float = DEFAULT_BLINK_THRESHOLD,
                     mode: str = "behavioral+affect") -> np.ndarray:
    """37 (or 33) summary statistics in ``SEGMENT_COLUMNS`` order; std is population std."""
    _check_mode(mode)
    if len(series) < 3:
        raise InputError(f"segment needs at least 3 frames, got {len(series)}")
    out = []
    for name in AFFECT_COLUMNS:
        col = series.column(name)
        out += [col.mean(), col.std()]
    out.append(blink_rate(series.column("au45"), threshold))
    for name in _DYNAMIC_SOURCES:
        vel = velocity(series.column(name), series.fps)
        acc = np.diff(vel) * series.fps
        out += [vel.mean(), vel.std(), acc.mean(), acc.std()]
    vec = np.array(out)
    return vec if mode == "behavioral+affect" else vec[4:]


def window_params(T: int, fps: float, window_s: float, overlap: float) -> Tuple[int, int, int]:
    """(window length, stride, window count) for a T-frame series."""
    if not 0.0 <= overlap < 1.0:
        raise InputError(f"overlap must lie in [0, 1), got {overlap}")
    w = int(round(window_s * fps))
    if w < 1:
        raise InputError("window shorter than one frame")
    if w > T:
        raise InputError(f"window of {w} frames is longer than the series ({T} frames)")
    s = max(1, int(round(w * (1.0 - overlap))))
    return w, s, (T - w) // s + 1


def window(series: FrameSeries, window_s: float = 10.0, overlap: float = 0.5) -> List[FrameSeries]:
    """Split into fixed-length windows; a trailing partial window is dropped."""
    w, s, count = window_params(len(series), series.fps, window_s, overlap)
    out = []
    for i in range(count):
        sl = slice(i * s, i * s + w)
        out.append(FrameSeries(series.values[sl], series.fps, f"{series.sample_id}#{i}",
                               series.confidence[sl], series.frames[sl]))
    return out


def segment_matrix(series: FrameSeries, mode: str = "behavioral+affect", window_s: float = 10.0,
                   overlap: float = 0.5, threshold: float = DEFAULT_BLINK_THRESHOLD) -> np.ndarray:
    """Stack the segment vectors of every window into a (num_windows, 37|33) matrix."""
    return np.stack([segment_features(win, threshold, mode) for win in window(series, window_s, overlap)])


def impute(series: FrameSeries, min_confidence: float = 0.5) -> Tuple[FrameSeries, int]:
    """Replace low-confidence rows by the previous valid row (first valid row for a leading gap)."""
    valid = series.confidence >= min_confidence
    if not valid.any():
        raise InputError(f"{series.sample_id or 'series'}: no frame reaches confidence {min_confidence}")
    if valid.all():
        return series, 0
    idx = np.where(valid, np.arange(len(series)), -1)
    idx = np.maximum.accumulate(idx)
    idx[idx < 0] = np.argmax(valid)
    return replace(series, values=series.values[idx].copy()), int(np.count_nonzero(~valid))


class Normalizer:
    """Per-feature z-scoring with statistics from engaged training data only."""

    def __init__(self, mean, std, feature_order):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.feature_order = list(feature_order)
        if not (len(self.mean) == len(self.std) == len(self.feature_order)):
            raise InputError("normalizer mean/std/feature_order lengths differ")

    @classmethod
    def fit(cls, arrays, feature_order) -> "Normalizer":
        stacked = np.concatenate([np.asarray(a).reshape(-1, len(feature_order)) for a in arrays])
        std = stacked.std(axis=0)
        std[std < 1e-12] = 1.0
        return cls(stacked.mean(axis=0), std, feature_order)

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != len(self.mean):
            raise InputError(f"normalizer expects {len(self.mean)} features, got {x.shape[-1]}")
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "feature_order": self.feature_order}

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        try:
            return cls(data["mean"], data["std"], data["feature_order"])
        except KeyError as exc:
            raise InputError(f"normalization stats missing field {exc}") from exc


LABELS = ("engaged", "disengaged")


@dataclass
class SequenceSample:
    """A (T, n) model input with identity and label."""

    sample_id: str
    x: np.ndarray
    label: str
    normalized: bool = False

    def __post_init__(self):
        if self.label not in LABELS:
            raise InputError(f"{self.sample_id}: unknown label {self.label!r}")
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or min(self.x.shape) < 1:
            raise InputError(f"{self.sample_id}: expected a (T, n) matrix, got {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise InputError(f"{self.sample_id}: non-finite feature values")

    @property
    def is_anomaly(self) -> bool:
        return self.label == "disengaged"


def normalize(sample: SequenceSample, normalizer: Normalizer) -> SequenceSample:
    if sample.normalized:
        raise InputError(f"{sample.sample_id}: normalization already applied")
    return SequenceSample(sample.sample_id, normalizer.transform(sample.x), sample.label, normalized=True)

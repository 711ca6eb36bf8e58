"""Training loops, anomaly scoring, normal-only thresholds and evaluation metrics."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from . import seqnn as nn
from .errors import ConfigurationError, InputError, ProtocolError
from .features import SequenceSample
from .models import Model

log = logging.getLogger(__name__)

LOSSES = ("mse", "bce", "weighted_bce")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.99
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    loss: str = "mse"
    weight_pos: Optional[float] = None
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigurationError("decay must lie in (0, 1]")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.weight_pos is not None and self.weight_pos <= 0:
            raise ConfigurationError("weight_pos must be > 0")


def config_digest(obj) -> str:
    """sha256 of the canonical JSON form of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _stack(model: Model, samples: Sequence[SequenceSample]) -> np.ndarray:
    want = (model.config.T, model.config.n)
    for s in samples:
        if s.x.shape != want:
            raise InputError(f"{s.sample_id}: shape {s.x.shape} does not match model input {want}")
    return np.stack([s.x for s in samples])


def _clip(params, max_norm: Optional[float]) -> None:
    if max_norm is None:
        return
    total = np.sqrt(sum(float(np.sum(g * g)) for _, _, g in params))
    if total > max_norm:
        for _, _, g in params:
            g *= max_norm / total


def _fit(model: Model, X: np.ndarray, y: Optional[np.ndarray], cfg: TrainConfig, loss_fn) -> List[float]:
    shuffle_seed, dropout_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    rng = np.random.default_rng(int(shuffle_seed))
    model.reseed(int(dropout_seed))
    params = model.named_parameters()
    opt = nn.Adam(params, lr=cfg.lr, decay=cfg.decay)
    history = []
    model.train()
    try:
        for epoch in range(cfg.epochs):
            opt.set_epoch(epoch)
            perm = rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(X), cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                model.zero_grad()
                out = model.forward(X[idx])
                loss, grad = loss_fn(X[idx], None if y is None else y[idx], out)
                model.backward(grad)
                _clip(params, cfg.clip_norm)
                opt.step()
                total += loss * len(idx)
            history.append(total / len(X))
            log.debug("epoch %d loss %.6g", epoch, history[-1])
    finally:
        model.eval()
    return history


def train_ae(model: Model, normal_samples: Sequence[SequenceSample], cfg: TrainConfig) -> Tuple[Model, List[float]]:
    """Minimise reconstruction MSE on engaged samples only."""
    if not model.config.is_autoencoder:
        raise ConfigurationError(f"train_ae needs an autoencoder, got {model.config.arch}")
    if not normal_samples:
        raise InputError("empty training set")
    bad = [s.sample_id for s in normal_samples if s.is_anomaly]
    if bad:
        raise ProtocolError(f"autoencoder training set contains disengaged samples: {bad[:5]}")
    X = _stack(model, normal_samples)
    history = _fit(model, X, None, cfg, lambda xb, _, out: nn.mse_loss(xb, out))
    return model, history


def default_weight_pos(labels) -> float:
    """N_neg / N_pos of a labelled training split."""
    labels = np.asarray(labels)
    n_pos = int(np.count_nonzero(labels))
    if n_pos == 0:
        raise InputError("no positive samples to weight")
    return (len(labels) - n_pos) / n_pos


def train_bc(model: Model, samples: Sequence[SequenceSample], cfg: TrainConfig) -> Tuple[Model, List[float]]:
    """Binary cross-entropy training; ``weighted_bce`` defaults weight_pos to N_neg/N_pos."""
    if model.config.is_autoencoder:
        raise ConfigurationError(f"train_bc needs a classifier, got {model.config.arch}")
    if not samples:
        raise InputError("empty training set")
    y = np.array([1.0 if s.is_anomaly else 0.0 for s in samples])
    if y.min() == y.max():
        raise InputError("classifier training needs both engaged and disengaged samples")
    if cfg.loss == "mse":
        raise ConfigurationError("classifiers are trained with bce or weighted_bce")
    w = 1.0
    if cfg.loss == "weighted_bce":
        w = cfg.weight_pos if cfg.weight_pos is not None else default_weight_pos(y)
    X = _stack(model, samples)
    history = _fit(model, X, y, cfg, lambda _, yb, out: nn.bce_loss(out, yb, w))
    return model, history


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

@dataclass
class ScoreSet:
    ids: List[str]
    scores: np.ndarray
    labels: np.ndarray  # 1 = disengaged (positive), 0 = engaged

    def __post_init__(self):
        self.ids = list(self.ids)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.ids) == len(self.scores) == len(self.labels)):
            raise InputError("ids, scores and labels differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise InputError("duplicate sample ids in score set")
        if not np.all(np.isfinite(self.scores)):
            raise InputError("non-finite scores")
        if not np.isin(self.labels, (0, 1)).all():
            raise InputError("labels must be 0 (engaged) or 1 (disengaged)")

    @classmethod
    def from_arrays(cls, scores, labels, ids=None) -> "ScoreSet":
        scores = np.asarray(scores, dtype=np.float64)
        ids = [str(i) for i in range(len(scores))] if ids is None else ids
        return cls(ids, scores, labels)

    def __len__(self):
        return len(self.ids)

    def to_records(self) -> List[dict]:
        return [{"id": i, "score": float(s), "label": "disengaged" if l else "engaged"}
                for i, s, l in zip(self.ids, self.scores, self.labels)]


def score(model: Model, samples: Sequence[SequenceSample], batch_size: int = 64) -> ScoreSet:
    """Higher = more disengaged: reconstruction MSE for AEs, probability for classifiers."""
    if not samples:
        raise InputError("nothing to score")
    X = _stack(model, samples)
    model.eval()
    out = []
    for start in range(0, len(X), batch_size):
        xb = X[start:start + batch_size]
        pred = model.forward(xb)
        if model.config.is_autoencoder:
            out.append(np.mean((pred - xb) ** 2, axis=(1, 2)))
        else:
            out.append(pred)
    labels = [1 if s.is_anomaly else 0 for s in samples]
    return ScoreSet([s.sample_id for s in samples], np.concatenate(out), labels)


# ---------------------------------------------------------------------------
# thresholds
# ---------------------------------------------------------------------------

def parse_threshold_method(method: str) -> Tuple[str, Optional[float]]:
    """'max', 'percentile:99' / 'percentile(99)', 'mean_plus_k_std:2' -> (name, arg)."""
    text = method.strip().replace("(", ":").rstrip(")")
    name, _, arg = text.partition(":")
    if name == "max":
        if arg:
            raise ConfigurationError("'max' takes no argument")
        return name, None
    if name in ("percentile", "mean_plus_k_std"):
        try:
            value = float(arg)
        except ValueError:
            raise ConfigurationError(f"threshold method {method!r} needs a numeric argument") from None
        if name == "percentile" and not 0.0 <= value <= 100.0:
            raise ConfigurationError("percentile must lie in [0, 100]")
        return name, value
    raise ConfigurationError(f"unknown threshold method {method!r}")


def select_threshold(normal_scores: Union[ScoreSet, Sequence[float]], method: str = "percentile:99") -> float:
    """Pick a decision threshold from engaged scores alone."""
    if isinstance(normal_scores, ScoreSet):
        if normal_scores.labels.any():
            raise ProtocolError("threshold selection was given disengaged scores")
        values = normal_scores.scores
    else:
        values = np.asarray(normal_scores, dtype=np.float64)
    if values.size == 0:
        raise InputError("no normal scores to threshold")
    name, arg = parse_threshold_method(method)
    if name == "max":
        return float(values.max())
    if name == "percentile":
        return float(np.percentile(values, arg))
    return float(values.mean() + arg * values.std())


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _unpack(scores, labels=None):
    if isinstance(scores, ScoreSet):
        return scores.scores, scores.labels
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape:
        raise InputError("scores and labels differ in length")
    return s, y


def roc_auc(scores, labels=None) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(tie), from average ranks."""
    s, y = _unpack(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("ROC AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _tie_blocks(s, y):
    """Cumulative (tp, fp) at each distinct score, descending."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp.astype(np.float64), fp.astype(np.float64), s[last]


def roc_curve(scores, labels=None):
    """(fpr, tpr, thresholds) from (0, 0) to (1, 1); ties form one step."""
    s, y = _unpack(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("ROC curve needs both classes")
    tp, fp, thr = _tie_blocks(s, y)
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos], np.r_[np.inf, thr]


def roc_auc_trapezoid(scores, labels=None) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def pr_curve(scores, labels=None):
    """(recall, precision, thresholds) at each distinct score, descending."""
    s, y = _unpack(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise InputError("PR curve needs at least one positive")
    tp, fp, thr = _tie_blocks(s, y)
    return tp / n_pos, tp / (tp + fp), thr


def pr_auc(scores, labels=None) -> float:
    """Average precision: sum of recall increments times precision."""
    recall, precision, _ = pr_curve(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pr_baseline(labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InputError("empty label set")
    return float(np.count_nonzero(labels)) / labels.size


def confusion(scores, threshold: float, labels=None) -> Dict[str, int]:
    """Counts with 'disengaged' predicted iff score > threshold."""
    s, y = _unpack(scores, labels)
    pred = s > threshold
    return {"tn": int(np.sum(~pred & (y == 0))), "fp": int(np.sum(pred & (y == 0))),
            "fn": int(np.sum(~pred & (y == 1))), "tp": int(np.sum(pred & (y == 1)))}


@dataclass
class EvalReport:
    auc_roc: float
    auc_pr: float
    pr_baseline: float
    threshold: float
    threshold_method: str
    confusion: Dict[str, int]
    scores: ScoreSet
    config_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "auc_roc": self.auc_roc, "auc_pr": self.auc_pr, "pr_baseline": self.pr_baseline,
            "threshold": self.threshold, "threshold_method": self.threshold_method,
            "confusion": dict(self.confusion), "scores": self.scores.to_records(),
            "config_digest": self.config_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def report_from_scores(scores: ScoreSet, threshold: float, threshold_method: str = "",
                       digest: str = "") -> EvalReport:
    return EvalReport(roc_auc(scores), pr_auc(scores), pr_baseline(scores.labels), float(threshold),
                      threshold_method, confusion(scores, threshold), scores, digest)


def evaluate(model: Model, test_samples: Sequence[SequenceSample], threshold: float,
             threshold_method: str = "", digest: str = "") -> EvalReport:
    return report_from_scores(score(model, test_samples), threshold, threshold_method, digest)

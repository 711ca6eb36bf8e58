"""Experiment orchestration shared by the CLI: run configs, train/eval/grid runs.

A trained model directory holds::

    model.ckpt       checkpoint (see engae.models)
    norm.json        normalization sidecar {"mean", "std", "feature_order"}
    train_log.json   run config, loss history, threshold, config digest
"""
from __future__ import annotations

import csv
import io as _stdio
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import detect as D
from . import features as F
from . import io as eio
from .errors import ConfigurationError, FormatError, InputError, ProtocolError
from .models import AE_ARCHS, ARCHS, ModelConfig, build

log = logging.getLogger(__name__)

CKPT_NAME = "model.ckpt"
NORM_NAME = "norm.json"
LOG_NAME = "train_log.json"

GRID_ARCHS = ("ff_ae", "ff_bc", "lstm_ae", "lstm_bc", "tcn_ae", "tcn_bc", "tcn_bc_wl")


@dataclass
class RunConfig:
    """Flat experiment configuration; every key is also a CLI flag."""

    arch: str = "tcn_ae"
    features: str = "behavioral+affect"
    level: str = "frame"
    L: int = 8
    h: Optional[int] = None  # 24 for TCN models, 128 for LSTM/feedforward
    k: int = 8
    p: float = 0.05
    d: int = 4
    b: int = 64
    upsample: str = "nearest"
    lr: float = 1e-3
    decay: float = 0.99
    epochs: int = 100
    batch_size: int = 32
    loss: Optional[str] = None  # mse for AEs, bce for classifiers
    weight_pos: Optional[float] = None
    clip_norm: Optional[float] = None
    threshold_method: str = "percentile:99"
    seed: int = 0
    fps: float = F.DEFAULT_FPS
    window_s: float = 10.0
    overlap: float = 0.5
    blink_threshold: float = F.DEFAULT_BLINK_THRESHOLD
    min_confidence: Optional[float] = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.features not in F.MODES:
            raise ConfigurationError(f"unknown feature mode {self.features!r}")
        if self.level not in ("frame", "segment"):
            raise ConfigurationError(f"unknown feature level {self.level!r}")
        if self.loss is not None and self.loss not in D.LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        D.parse_threshold_method(self.threshold_method)

    @classmethod
    def keys(cls) -> Dict[str, type]:
        return {f.name: f.type for f in fields(cls)}

    @property
    def hidden(self) -> int:
        if self.h is not None:
            return self.h
        return 24 if self.arch.startswith("tcn") else 128

    @property
    def loss_name(self) -> str:
        if self.loss is not None:
            return self.loss
        return "mse" if self.arch in AE_ARCHS else "bce"

    def train_config(self) -> D.TrainConfig:
        return D.TrainConfig(lr=self.lr, decay=self.decay, epochs=self.epochs, batch_size=self.batch_size,
                             seed=self.seed, loss=self.loss_name, weight_pos=self.weight_pos,
                             clip_norm=self.clip_norm)

    def model_config(self, n: int, T: int) -> ModelConfig:
        return ModelConfig(arch=self.arch, n=n, T=T, L=self.L, h=self.hidden, k=self.k, p=self.p, d=self.d,
                           b=self.b, upsample=self.upsample, init_seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


def load_samples(manifest: eio.Manifest, split: str, run: RunConfig) -> List[F.SequenceSample]:
    return eio.load_split(manifest, split, run.features, run.level, run.fps, run.window_s, run.overlap,
                          run.blink_threshold, None, run.min_confidence)


def common_length(samples: Sequence[F.SequenceSample], arch: str, d: int) -> int:
    """Shortest sequence length, rounded down to a multiple of d for tcn_ae."""
    T = min(s.x.shape[0] for s in samples)
    if arch == "tcn_ae":
        T -= T % d
        if T < 1:
            raise InputError(f"sequences of {min(s.x.shape[0] for s in samples)} steps are shorter than d={d}")
    return T


def crop(samples: Sequence[F.SequenceSample], T: int) -> List[F.SequenceSample]:
    out = []
    for s in samples:
        if s.x.shape[0] < T:
            raise InputError(f"{s.sample_id}: {s.x.shape[0]} steps, model needs {T}")
        out.append(s if s.x.shape[0] == T else replace(s, x=s.x[:T]))
    return out


def _split_normal(samples):
    return [s for s in samples if not s.is_anomaly]


def fit_run(train: Sequence[F.SequenceSample], run: RunConfig,
            val: Sequence[F.SequenceSample] = ()) -> Tuple[object, F.Normalizer, dict]:
    """Train one model on already-loaded (unnormalized) samples.

    Returns (model, normalizer, log dict).  Autoencoders refuse disengaged
    training samples; the decision threshold comes from engaged scores only
    (validation engaged samples for classifiers when available).
    """
    if not train:
        raise InputError("training split is empty")
    is_ae = run.arch in AE_ARCHS
    if is_ae and any(s.is_anomaly for s in train):
        raise ProtocolError("autoencoder training split contains disengaged samples")
    T = common_length(train, run.arch, run.d)
    train = crop(train, T)
    names = F.feature_names(run.features, run.level)
    normalizer = F.Normalizer.fit([s.x for s in _split_normal(train)], names)
    train = [F.normalize(s, normalizer) for s in train]
    model = build(run.model_config(len(names), T))
    cfg = run.train_config()
    if is_ae:
        model, history = D.train_ae(model, train, cfg)
    else:
        model, history = D.train_bc(model, train, cfg)
    thr_source = "train"
    normal = _split_normal(train)
    val_normal = _split_normal(val)
    if not is_ae and val_normal:
        normal = [F.normalize(s, normalizer) for s in crop(val_normal, T)]
        thr_source = "val"
    threshold = D.select_threshold(D.score(model, normal), run.threshold_method)
    weight_pos = None
    if cfg.loss == "weighted_bce":
        weight_pos = cfg.weight_pos or D.default_weight_pos([s.is_anomaly for s in train])
    entry = {
        "run": run.to_dict(),
        "config_digest": D.config_digest(run.to_dict()),
        "model": model.config.to_dict(),
        "history": history,
        "threshold": threshold,
        "threshold_method": run.threshold_method,
        "threshold_source": thr_source,
        "weight_pos": weight_pos,
        "n_train": len(train),
    }
    return model, normalizer, entry


def train_to_dir(manifest: eio.Manifest, run: RunConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    train = load_samples(manifest, "train", run)
    val = load_samples(manifest, "val", run) if manifest.split("val") else []
    model, normalizer, entry = fit_run(train, run, val)
    eio.save_checkpoint_file(out_dir / CKPT_NAME, model)
    eio.save_normalizer(out_dir / NORM_NAME, normalizer)
    eio.write_json(out_dir / LOG_NAME, entry)
    return entry


@dataclass
class TrainedModel:
    model: object
    normalizer: F.Normalizer
    log: dict

    @property
    def run(self) -> RunConfig:
        return RunConfig(**self.log["run"])


def load_model_dir(model_dir) -> TrainedModel:
    model_dir = Path(model_dir)
    model = eio.load_checkpoint_file(model_dir / CKPT_NAME)
    normalizer = eio.load_normalizer(model_dir / NORM_NAME)
    log_path = model_dir / LOG_NAME
    entry = eio.read_json(log_path) if log_path.exists() else {}
    if len(normalizer.feature_order) != model.config.n:
        raise FormatError(f"{model_dir}: normalizer has {len(normalizer.feature_order)} features, "
                          f"checkpoint expects n={model.config.n}")
    return TrainedModel(model, normalizer, entry)


def infer_mode_level(feature_order: Sequence[str]) -> Tuple[str, str]:
    order = tuple(feature_order)
    for level in ("frame", "segment"):
        for mode in F.MODES:
            if F.feature_names(mode, level) == order:
                return mode, level
    raise FormatError(f"unrecognised feature order {list(order)}")


def prepare(samples, tm: TrainedModel) -> List[F.SequenceSample]:
    samples = crop(samples, tm.model.config.T)
    return [F.normalize(s, tm.normalizer) for s in samples]


def score_csv(tm: TrainedModel, csv_path, fps: float = F.DEFAULT_FPS, label: str = "engaged") -> D.ScoreSet:
    """Score one frame CSV with nothing but (checkpoint, stats, CSV)."""
    mode, level = infer_mode_level(tm.normalizer.feature_order)
    run = tm.run if tm.log else RunConfig(features=mode, level=level, fps=fps)
    series = eio.read_frame_csv(csv_path, fps)
    x = eio.sample_matrix(series, mode, level, run.window_s, run.overlap, run.blink_threshold)
    sample = F.SequenceSample(series.sample_id, x, label)
    return D.score(tm.model, prepare([sample], tm))


def evaluate_dir(tm: TrainedModel, manifest: eio.Manifest, split: str = "test",
                 threshold: Optional[float] = None) -> D.EvalReport:
    run = tm.run
    samples = prepare(load_samples(manifest, split, run), tm)
    if not samples:
        raise InputError(f"split {split!r} is empty")
    thr = tm.log["threshold"] if threshold is None else threshold
    method = tm.log.get("threshold_method", "") if threshold is None else "fixed"
    return D.evaluate(tm.model, samples, thr, method, tm.log.get("config_digest", ""))


def curve_csvs(report: D.EvalReport) -> Tuple[str, str]:
    fpr, tpr, _ = D.roc_curve(report.scores)
    recall, precision, _ = D.pr_curve(report.scores)
    roc = "fpr,tpr\n" + "".join(f"{eio.fmt(a)},{eio.fmt(b)}\n" for a, b in zip(fpr, tpr))
    pr = "recall,precision\n" + "".join(f"{eio.fmt(a)},{eio.fmt(b)}\n" for a, b in zip(recall, precision))
    return roc, pr


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

def grid_run_config(base: RunConfig, cell_arch: str, features: str) -> RunConfig:
    if cell_arch == "tcn_bc_wl":
        return replace(base, arch="tcn_bc", loss="weighted_bce", features=features)
    return replace(base, arch=cell_arch, loss=None, features=features)


def validate_grid(archs: Sequence[str], feature_sets: Sequence[str]) -> None:
    bad = [a for a in archs if a not in GRID_ARCHS]
    if bad:
        raise ConfigurationError(f"unknown grid arch(s) {bad}; expected names from {GRID_ARCHS}")
    bad = [m for m in feature_sets if m not in F.MODES]
    if bad:
        raise ConfigurationError(f"unknown feature set(s) {bad}")


class GridCellError(RuntimeError):
    pass


def _guarded_cell(manifest_path, base, cell_arch, features):
    try:
        return run_cell(manifest_path, base, cell_arch, features)
    except Exception as exc:
        raise GridCellError(f"grid cell ({cell_arch}, {features}) failed: {exc}") from exc


def run_cell(manifest_path: str, base: dict, cell_arch: str, features: str) -> dict:
    """Train on train (engaged only for AEs) and evaluate on test for one grid cell."""
    manifest = eio.read_manifest(manifest_path)
    run = grid_run_config(RunConfig(**base), cell_arch, features)
    train = load_samples(manifest, "train", run)
    if run.arch in AE_ARCHS:
        train = _split_normal(train)
    val = load_samples(manifest, "val", run) if manifest.split("val") else []
    model, normalizer, entry = fit_run(train, run, val)
    tm = TrainedModel(model, normalizer, entry)
    report = evaluate_dir(tm, manifest, "test")
    return {
        "model": cell_arch, "features": features,
        "auc_roc": report.auc_roc, "auc_pr": report.auc_pr, "pr_baseline": report.pr_baseline,
        "threshold": report.threshold, **report.confusion,
        "config_digest": entry["config_digest"],
    }


def max_jobs(requested: int) -> int:
    cap = os.environ.get("ENGAE_THREADS")
    jobs = max(1, requested)
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise ConfigurationError(f"ENGAE_THREADS must be an integer, got {cap!r}") from None
    return jobs


def run_grid(manifest_path, base: RunConfig, archs: Sequence[str] = GRID_ARCHS,
             feature_sets: Sequence[str] = ("behavioral", "behavioral+affect"), jobs: int = 1) -> List[dict]:
    validate_grid(archs, feature_sets)
    cells = [(a, m) for a in archs for m in feature_sets]
    jobs = max_jobs(jobs)
    args = [(str(manifest_path), base.to_dict(), a, m) for a, m in cells]
    results: Dict[Tuple[str, str], dict] = {}
    if jobs == 1:
        for a in args:
            results[(a[2], a[3])] = _guarded_cell(*a)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_guarded_cell, *a): (a[2], a[3]) for a in args}
            for fut, key in futures.items():
                results[key] = fut.result()
    return [results[c] for c in cells]


GRID_COLUMNS = ("model", "features", "auc_roc", "auc_pr", "pr_baseline", "threshold",
                "tn", "fp", "fn", "tp", "config_digest")


def grid_csv(rows: Sequence[dict]) -> str:
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(GRID_COLUMNS)
    for r in rows:
        writer.writerow([eio.fmt(r[c]) if isinstance(r[c], float) else r[c] for c in GRID_COLUMNS])
    return buf.getvalue()

"""File formats: frame/segment CSVs, JSON-lines manifests, sidecars, reports.

Every writer goes through :func:`atomic_write` (temp file + rename).  Readers
validate strictly and raise :class:`~engae.errors.FormatError` naming the file,
line and column of the first problem.
"""
from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np

from . import features as F
from .errors import FormatError, InputError
from .features import FrameSeries, Normalizer, SequenceSample

PathLike = Union[str, os.PathLike]
SPLITS = ("train", "val", "test")


def atomic_write(path: PathLike, data: Union[str, bytes]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(x: float) -> str:
    return f"{x:.9g}"


# ---------------------------------------------------------------------------
# frame CSV
# ---------------------------------------------------------------------------

def frame_csv_text(series: FrameSeries) -> str:
    lines = [",".join(F.FRAME_CSV_COLUMNS)]
    for frame, conf, row in zip(series.frames, series.confidence, series.values):
        lines.append(",".join([str(int(frame)), fmt(conf)] + [fmt(v) for v in row]))
    return "\n".join(lines) + "\n"


def write_frame_csv(path: PathLike, series: FrameSeries) -> None:
    atomic_write(path, frame_csv_text(series))


def _read_rows(path: Path):
    if not path.exists():
        raise FormatError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    return rows[0], rows[1:]


def _check_header(path: Path, header: List[str], expected) -> None:
    header = [h.strip() for h in header]
    if header == list(expected):
        return
    unknown = [h for h in header if h not in expected]
    missing = [h for h in expected if h not in header]
    detail = []
    if unknown:
        detail.append(f"unexpected column(s) {unknown}")
    if missing:
        detail.append(f"missing column(s) {missing}")
    if not detail:
        detail.append(f"columns out of order, expected {list(expected)}")
    raise FormatError(f"{path}: bad header: " + "; ".join(detail))


def _parse_matrix(path: Path, body, columns) -> np.ndarray:
    out = np.empty((len(body), len(columns)))
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(columns):
            raise FormatError(f"{path}:{line}: expected {len(columns)} fields, got {len(row)}")
        for j, cell in enumerate(row):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise FormatError(f"{path}:{line}: column {columns[j]!r}: not a number: {cell!r}") from None
            if not np.isfinite(out[i, j]):
                raise FormatError(f"{path}:{line}: column {columns[j]!r}: non-finite value {cell!r}")
    return out


def read_frame_csv(path: PathLike, fps: float = F.DEFAULT_FPS, sample_id: Optional[str] = None) -> FrameSeries:
    path = Path(path)
    header, body = _read_rows(path)
    _check_header(path, header, F.FRAME_CSV_COLUMNS)
    if not body:
        raise FormatError(f"{path}: no data rows")
    m = _parse_matrix(path, body, F.FRAME_CSV_COLUMNS)
    frames = m[:, 0]
    if np.any(frames != np.round(frames)):
        raise FormatError(f"{path}: column 'frame' must hold integers")
    try:
        return FrameSeries(m[:, 2:], fps, sample_id or path.stem, m[:, 1], frames.astype(np.int64))
    except InputError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# segment CSV
# ---------------------------------------------------------------------------

def write_segment_csv(path: PathLike, matrix: np.ndarray, mode: str = "behavioral+affect") -> None:
    cols = F.feature_names(mode, "segment")
    matrix = np.atleast_2d(matrix)
    if matrix.shape[1] != len(cols):
        raise InputError(f"segment matrix has {matrix.shape[1]} columns, mode {mode!r} needs {len(cols)}")
    lines = [",".join(("segment",) + cols)]
    for i, row in enumerate(matrix):
        lines.append(",".join([str(i)] + [fmt(v) for v in row]))
    atomic_write(path, "\n".join(lines) + "\n")


def read_segment_csv(path: PathLike, mode: str = "behavioral+affect") -> np.ndarray:
    path = Path(path)
    cols = ("segment",) + F.feature_names(mode, "segment")
    header, body = _read_rows(path)
    _check_header(path, header, cols)
    if not body:
        raise FormatError(f"{path}: no data rows")
    return _parse_matrix(path, body, cols)[:, 1:]


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    path: str
    label: str
    split: str
    anomaly_types: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"id": self.id, "path": self.path, "label": self.label, "split": self.split,
                "anomaly_types": list(self.anomaly_types)}


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p


def _validate_entry(obj, where: str) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected a JSON object")
    keys = {"id", "path", "label", "split", "anomaly_types"}
    missing = keys - set(obj)
    if missing:
        raise FormatError(f"{where}: missing field(s) {sorted(missing)}")
    extra = set(obj) - keys
    if extra:
        raise FormatError(f"{where}: unknown field(s) {sorted(extra)}")
    if obj["label"] not in F.LABELS:
        raise FormatError(f"{where}: unknown label {obj['label']!r}")
    if obj["split"] not in SPLITS:
        raise FormatError(f"{where}: unknown split {obj['split']!r}")
    if not isinstance(obj["anomaly_types"], list):
        raise FormatError(f"{where}: anomaly_types must be an array")
    if not isinstance(obj["id"], str) or not isinstance(obj["path"], str):
        raise FormatError(f"{where}: id and path must be strings")
    return ManifestEntry(obj["id"], obj["path"], obj["label"], obj["split"], list(obj["anomaly_types"]))


def read_manifest(path: PathLike, check_paths: bool = True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: file not found")
    entries, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}: malformed JSON ({exc.msg})") from None
            entry = _validate_entry(obj, where)
            if entry.id in seen:
                raise FormatError(f"{where}: duplicate id {entry.id!r}")
            seen.add(entry.id)
            entries.append(entry)
    manifest = Manifest(entries, path.parent)
    if check_paths:
        for e in entries:
            if not manifest.resolve(e).exists():
                raise FormatError(f"{path}: sample {e.id!r} points to missing file {e.path}")
    return manifest


def write_manifest(path: PathLike, entries: Iterable[ManifestEntry]) -> None:
    entries = list(entries)
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate ids in manifest")
    text = "".join(json.dumps(e.to_dict()) + "\n" for e in entries)
    atomic_write(path, text)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def sample_matrix(series: FrameSeries, mode: str, level: str, window_s: float = 10.0,
                  overlap: float = 0.5, blink_threshold: float = F.DEFAULT_BLINK_THRESHOLD) -> np.ndarray:
    if level == "frame":
        return F.select_features(series, mode)
    if level == "segment":
        return F.segment_matrix(series, mode, window_s, overlap, blink_threshold)
    raise InputError(f"unknown feature level {level!r}")


def load_split(manifest: Manifest, split: str, mode: str = "behavioral+affect", level: str = "frame",
               fps: float = F.DEFAULT_FPS, window_s: float = 10.0, overlap: float = 0.5,
               blink_threshold: float = F.DEFAULT_BLINK_THRESHOLD,
               normalizer: Optional[Normalizer] = None,
               min_confidence: Optional[float] = None) -> List[SequenceSample]:
    """Load every sample of ``split`` as a (T, n) model input.

    Frame level gives one row per frame; segment level windows the recording
    and gives one 37/33-element row per window.
    """
    if split not in SPLITS:
        raise InputError(f"unknown split {split!r}")
    out = []
    for entry in manifest.split(split):
        series = read_frame_csv(manifest.resolve(entry), fps, entry.id)
        if min_confidence is not None:
            series, _ = F.impute(series, min_confidence)
        try:
            x = sample_matrix(series, mode, level, window_s, overlap, blink_threshold)
        except InputError as exc:
            raise InputError(f"{entry.id}: {exc}") from exc
        sample = SequenceSample(entry.id, x, entry.label)
        if normalizer is not None:
            sample = F.normalize(sample, normalizer)
        out.append(sample)
    return out


# ---------------------------------------------------------------------------
# sidecars
# ---------------------------------------------------------------------------

def write_json(path: PathLike, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def read_json(path: PathLike):
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: file not found")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc.msg}, line {exc.lineno})") from None


def save_normalizer(path: PathLike, normalizer: Normalizer) -> None:
    write_json(path, normalizer.to_dict())


def load_normalizer(path: PathLike) -> Normalizer:
    try:
        return Normalizer.from_dict(read_json(path))
    except InputError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_checkpoint_file(path: PathLike, model) -> None:
    from .models import save_checkpoint
    atomic_write(path, save_checkpoint(model))


def load_checkpoint_file(path: PathLike):
    from .models import load_checkpoint
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: file not found")
    try:
        return load_checkpoint(path.read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc

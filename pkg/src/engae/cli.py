"""Command-line entry point: ``engae synth|features|train|score|eval|grid``.

Experiment settings come from three layers, later ones winning:
built-in defaults < ``--config FILE`` (flat ``key = value`` lines, ``#``
comments) < explicit ``--key value`` flags.  Config keys are the
:class:`~engae.pipeline.RunConfig` field names.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import detect as D
from . import features as F
from . import io as eio
from . import pipeline as P
from . import synth
from .errors import ConfigurationError, EngaeError

log = logging.getLogger("engae")


def _coerce(key: str, raw: str):
    # RunConfig annotations are strings ("int", "Optional[float]", ...)
    typ = str(P.RunConfig.keys()[key])
    if typ.startswith("Optional") and raw.lower() in ("none", "null", ""):
        return None
    if "int" in typ:
        return int(raw)
    if "float" in typ:
        return float(raw)
    return raw


def read_config_file(path) -> Dict[str, object]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"{path}: config file not found")
    known = P.RunConfig.keys()
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, _, value = line.partition(" ")
        key = key.strip().replace("-", "_")
        if key not in known:
            raise ConfigurationError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = _coerce(key, value.strip())
        except ValueError:
            raise ConfigurationError(f"{path}:{lineno}: bad value for {key}: {value.strip()!r}") from None
    return out


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment settings (override --config)")
    for key in P.RunConfig.keys():
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"run_{key}", default=None, metavar="VALUE")


def resolve_run(args) -> P.RunConfig:
    values: Dict[str, object] = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in P.RunConfig.keys():
        raw = getattr(args, f"run_{key}", None)
        if raw is not None:
            try:
                values[key] = _coerce(key, raw)
            except ValueError:
                raise ConfigurationError(f"bad value for --{key.replace('_', '-')}: {raw!r}") from None
    return P.RunConfig(**values)


def _print_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    types = tuple(t for t in args.anomaly_types.split(",") if t)
    cfg = synth.SynthConfig(seed=args.seed, fps=args.fps, duration_s=args.duration, anomaly_types=types,
                            anomaly_intensity=args.intensity, pin_types=args.pin_types)
    for name in ("engaged_train", "engaged_test", "disengaged_test", "disengaged_train",
                 "engaged_val", "disengaged_val"):
        if getattr(args, name) < 0:
            raise ConfigurationError(f"--{name.replace('_', '-')} must be >= 0")
    manifest = synth.gen_dataset(cfg, args.out, args.engaged_train, args.engaged_test, args.disengaged_test,
                                 args.disengaged_train, args.engaged_val, args.disengaged_val)
    m = eio.read_manifest(manifest)
    counts: Dict[str, int] = {}
    for e in m:
        counts[f"{e.split}/{e.label}"] = counts.get(f"{e.split}/{e.label}", 0) + 1
    _print_json({"manifest": str(manifest), "samples": len(m), "counts": counts})
    return 0


def cmd_features(args) -> int:
    out = Path(args.out)
    if args.manifest:
        m = eio.read_manifest(args.manifest)
        inputs = [(e.id, m.resolve(e)) for e in m]
    else:
        inputs = [(Path(p).stem, Path(p)) for p in args.inputs]
    if not inputs:
        raise ConfigurationError("no input files (give --manifest or CSV paths)")
    written = []
    for sample_id, path in inputs:
        series = eio.read_frame_csv(path, args.fps, sample_id)
        if args.min_confidence is not None:
            series, _ = F.impute(series, args.min_confidence)
        mat = F.segment_matrix(series, args.features, args.window_s, args.overlap, args.blink_threshold)
        target = out / f"{sample_id}.segments.csv"
        eio.write_segment_csv(target, mat, args.features)
        written.append(str(target))
    _print_json({"written": len(written), "columns": len(F.feature_names(args.features, "segment")),
                 "out": str(out)})
    return 0


def cmd_train(args) -> int:
    run = resolve_run(args)
    manifest = eio.read_manifest(args.manifest)
    entry = P.train_to_dir(manifest, run, args.out)
    hist = entry["history"]
    _print_json({"out": args.out, "arch": run.arch, "epochs": len(hist), "initial_loss": hist[0],
                 "final_loss": hist[-1], "threshold": entry["threshold"], "weight_pos": entry["weight_pos"],
                 "config_digest": entry["config_digest"]})
    return 0


def cmd_score(args) -> int:
    tm = P.load_model_dir(args.model)
    if args.csv:
        scores = P.score_csv(tm, args.csv)
    else:
        if not args.manifest:
            raise ConfigurationError("score needs --csv or --manifest")
        manifest = eio.read_manifest(args.manifest)
        scores = D.score(tm.model, P.prepare(P.load_samples(manifest, args.split, tm.run), tm))
    if args.csv:
        text = "id,score\n" + "".join(f"{r['id']},{r['score']!r}\n" for r in scores.to_records())
    else:
        text = "id,score,label\n" + "".join(
            f"{r['id']},{r['score']!r},{r['label']}\n" for r in scores.to_records())
    if args.out:
        eio.atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    tm = P.load_model_dir(args.model)
    if not tm.log:
        raise ConfigurationError(f"{args.model}: missing {P.LOG_NAME}; cannot recover run settings")
    manifest = eio.read_manifest(args.manifest)
    report = P.evaluate_dir(tm, manifest, args.split, args.threshold)
    if args.out:
        eio.atomic_write(args.out, report.to_json())
    else:
        sys.stdout.write(report.to_json())
    if args.curves:
        roc, pr = P.curve_csvs(report)
        eio.atomic_write(Path(args.curves) / "roc.csv", roc)
        eio.atomic_write(Path(args.curves) / "pr.csv", pr)
    log.info("auc_roc=%.4f auc_pr=%.4f", report.auc_roc, report.auc_pr)
    return 0


def cmd_grid(args) -> int:
    run = resolve_run(args)
    archs = [a for a in args.archs.split(",") if a]
    modes = [m for m in args.feature_sets.split(",") if m]
    P.validate_grid(archs, modes)
    rows = P.run_grid(args.manifest, run, archs, modes, args.jobs)
    out = Path(args.out)
    eio.atomic_write(out / "grid.csv", P.grid_csv(rows))
    eio.write_json(out / "grid.json", {"config_digest": D.config_digest(run.to_dict()), "rows": rows})
    sys.stdout.write(P.grid_csv(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="engae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labelled synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--engaged-train", type=int, default=400)
    p.add_argument("--engaged-test", type=int, default=100)
    p.add_argument("--disengaged-test", type=int, default=100)
    p.add_argument("--disengaged-train", type=int, default=0)
    p.add_argument("--engaged-val", type=int, default=0)
    p.add_argument("--disengaged-val", type=int, default=0)
    p.add_argument("--anomaly-types", default=",".join(synth.ANOMALY_TYPES))
    p.add_argument("--intensity", type=float, default=1.0)
    p.add_argument("--pin-types", action="store_true", help="apply every listed anomaly type to each sample")
    p.add_argument("--fps", type=float, default=F.DEFAULT_FPS)
    p.add_argument("--duration", type=float, default=10.0, help="seconds per sample")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="write segment-level feature CSVs")
    p.add_argument("inputs", nargs="*", help="frame CSV files (alternative to --manifest)")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--features", choices=F.MODES, default="behavioral+affect")
    p.add_argument("--fps", type=float, default=F.DEFAULT_FPS)
    p.add_argument("--window-s", type=float, default=10.0)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--blink-threshold", type=float, default=F.DEFAULT_BLINK_THRESHOLD)
    p.add_argument("--min-confidence", type=float)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train one model and write checkpoint + sidecars")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score samples with a trained model")
    p.add_argument("--model", required=True, help="model directory written by train")
    p.add_argument("--csv", help="a single frame CSV")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate a trained model on a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, help="override the stored threshold")
    p.add_argument("--out")
    p.add_argument("--curves", help="directory for roc.csv and pr.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="train and evaluate the model x feature-set comparison grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--archs", default=",".join(P.GRID_ARCHS))
    p.add_argument("--feature-sets", default="behavioral,behavioral+affect")
    p.add_argument("--jobs", type=int, default=1)
    _add_run_flags(p)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (EngaeError, P.GridCellError, OSError) as exc:
        print(f"engae {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

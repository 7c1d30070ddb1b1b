"""Command-line interface: ``ssvep-ensemble <subcommand> ...``.

Subcommands: ``synth``, ``train``, ``classify``, ``evaluate``, ``report``
and ``import``. Every artifact embeds the resolved configuration and seed,
and is written atomically with deterministic bytes.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bundles
from .ensemble import classify_instance
from .evaluation import (ALL_METHODS, EvalConfig, MetricsRow, loo_evaluate,
                         significance_table, train_ensemble)
from .network import TrainingConfig, TrainingDivergedError
from .signal import DegenerateInputError, FilteredEpoch, SpellerLayout
from .synth import SynthParams, generate_cohort

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BUNDLE = 3
EXIT_FINGERPRINT = 4
EXIT_INPUT = 5
EXIT_DIVERGED = 6
EXIT_DEGENERATE = 7
EXIT_MISSING_CHANNEL = 8

CSV_COLUMNS = ("method", "duration_s", "mean_acc", "se_acc", "mean_itr", "se_itr",
               "mean_k", "std_k")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# output helpers

def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python ones."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path: Path, obj) -> None:
    payload = json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"
    bundles._atomic_write(path, payload.encode())


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if not math.isfinite(v) else f"{v:.10g}"
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict], config: dict) -> None:
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(_clean(config), sort_keys=True, allow_nan=False) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) for c in columns])
    bundles._atomic_write(path, buf.getvalue().encode())


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _load_json_arg(value: Optional[str]) -> dict:
    if value is None:
        return {}
    p = Path(value)
    text = p.read_text() if p.exists() else value
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config is neither a JSON file nor JSON text: {exc}") from None


# ---------------------------------------------------------------------------
# configuration from flags

def _add_training_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--training-config", help="JSON file or text with TrainingConfig fields")
    g.add_argument("--epochs-global", type=int)
    g.add_argument("--epochs-finetune", type=int)
    g.add_argument("--lr", type=float, help="learning rate for both stages")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--maps", type=int, help="feature maps of both temporal convolutions")
    g.add_argument("--combinations", type=int, help="channel combinations in layer 2")


def _training_config(args) -> TrainingConfig:
    base = TrainingConfig.from_dict(_load_json_arg(args.training_config)) \
        if args.training_config else TrainingConfig()
    over = {"seed": args.seed, "epochs_global": args.epochs_global,
            "epochs_finetune": args.epochs_finetune, "batch_size": args.batch_size,
            "conv3_maps": args.maps, "conv4_maps": args.maps,
            "n_combinations": args.combinations}
    if args.lr is not None:
        over.update(learning_rate=args.lr, finetune_learning_rate=args.lr)
    return replace(base, **{k: v for k, v in over.items() if v is not None})


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    cfg = _load_json_arg(args.config)
    if "layout" not in cfg and (args.classes or args.f0 is not None or args.df is not None):
        cfg["layout"] = SpellerLayout.linear(args.classes or 8, 8.0 if args.f0 is None else args.f0,
                                             1.0 if args.df is None else args.df).to_dict()
    flags = {"n_participants": args.participants, "n_channels": args.channels,
             "n_blocks": args.blocks, "fs": args.fs, "duration_s": args.duration,
             "snr_db": args.snr_db, "n_clusters": args.clusters}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.seed is not None:
        cfg["mixing_seed"], cfg["noise_seed"] = args.seed, args.seed + 1
    params = SynthParams.from_dict(cfg)
    cohort = generate_cohort(params)
    bundles.save_cohort(cohort, args.out, args.dtype)
    print(f"wrote cohort of {cohort.n_participants} participants to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cohort = bundles.load_cohort(args.cohort)
    training = _training_config(args)
    global_w, ens, templates = train_ensemble(cohort, training)
    bundle = bundles.ModelBundle(global_w, ens, templates, training, cohort.layout, cohort.fs,
                                 cohort.participant_ids, bundles.read_fingerprint(args.cohort),
                                 args.nh, cohort.channel_names)
    bundles.save_model(bundle, args.out)
    print(f"wrote model with {len(ens)} fine-tuned networks to {args.out}")
    return EXIT_OK


def cmd_classify(args) -> int:
    model = bundles.load_model(args.model)
    if args.cohort is not None:
        model.check_cohort(bundles.read_fingerprint(args.cohort))
    x = np.load(args.instance, allow_pickle=False)
    expected = model.global_weights.arch.input_shape
    if x.shape != expected:
        raise ValueError(f"instance has shape {x.shape}, the model expects {expected} "
                         f"(channels, samples, sub-bands)")
    decision = classify_instance(FilteredEpoch(np.asarray(x, dtype=np.float64), model.fs),
                                 model.ensemble, model.templates, model.layout, model.nh,
                                 args.mode)
    out = decision.to_dict()
    out["participant_ids"] = model.participant_ids
    out["config"] = {"mode": args.mode, "nh": model.nh, "model": model.manifest(),
                     "instance": Path(args.instance).name}
    write_json(Path(args.out), out)
    print(f"label {decision.label} (k={decision.chosen_k}, confidence {decision.confidence:.4g})")
    return EXIT_OK


def metrics_table_rows(rows: Sequence[MetricsRow]) -> list:
    return [{"method": r.method, "duration_s": r.duration_s, "mean_acc": r.mean_acc,
             "se_acc": r.se_acc, "mean_itr": r.mean_itr, "se_itr": r.se_itr,
             "mean_k": r.mean_k, "std_k": r.std_k} for r in rows]


def cmd_evaluate(args) -> int:
    cohort = bundles.load_cohort(args.cohort)
    methods = []
    for group in (args.method or []) + ([args.methods] if args.methods else []):
        methods.extend(m.strip() for m in group.split(",") if m.strip())
    training = _training_config(args)
    cfg = EvalConfig(durations_s=_floats(args.durations) if args.durations else (1.0,),
                     gaze_shift_s=args.gaze_shift, methods=tuple(methods) or ALL_METHODS,
                     fixed_ks=_ints(args.fixed_ks) if args.fixed_ks else None, nh=args.nh,
                     training=training, n_jobs=args.n_jobs)
    rows = loo_evaluate(cohort, cfg)
    config = {"eval": cfg.to_dict(), "seed": training.seed,
              "cohort_fingerprint": bundles.read_fingerprint(args.cohort)}
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", CSV_COLUMNS, metrics_table_rows(rows), config)
    sig = significance_table(rows) if any(r.method == "ensemble-dynamic" for r in rows) else []
    write_json(out / "metrics.json", {"config": config, "n_classes": cohort.layout.n_classes,
                                      "rows": [r.to_dict() for r in rows],
                                      "significance": sig})
    print(f"wrote {len(rows)} metric rows to {out}")
    return EXIT_OK


def report_tables(metrics: dict) -> dict:
    """Figure- and table-shaped views of an ``evaluate`` metrics file."""
    rows = [MetricsRow(**r) for r in metrics["rows"]]
    base = ("method", "duration_s", "mean_acc", "se_acc", "mean_itr", "se_itr",
            "mean_itr_no_gaze")
    fig2_3 = [{k: getattr(r, k) for k in base} for r in rows
              if not r.method.startswith("ensemble-fixed:")]
    fig4 = []
    for r in rows:
        if r.method.startswith("ensemble-fixed:") or r.method in ("ensemble-dynamic",
                                                                  "ensemble-majority"):
            k = int(r.method.split(":")[1]) if r.method.startswith("ensemble-fixed:") else None
            fig4.append({"method": r.method, "k": k, "duration_s": r.duration_s,
                         "mean_acc": r.mean_acc, "se_acc": r.se_acc, "mean_k": r.mean_k})
    fig4.sort(key=lambda d: (d["duration_s"], d["k"] is None, d["k"] or 0, d["method"]))
    durations = sorted({r.duration_s for r in rows})
    methods = [m for m in dict.fromkeys(r.method for r in rows)
               if not m.startswith("ensemble-fixed:")]
    by_key = {(r.method, r.duration_s): r for r in rows}
    sig = {(s["method"], s["duration_s"]): s["flag"] for s in metrics.get("significance", [])}
    table1 = []
    for m in methods:
        row = {"method": m}
        for t in durations:
            r = by_key.get((m, t))
            row[f"acc_{t:g}s"] = None if r is None else r.mean_acc
            row[f"itr_{t:g}s"] = None if r is None else r.mean_itr
            row[f"sig_{t:g}s"] = sig.get((m, t), "")
        table1.append(row)
    fig5 = []
    for r in rows:
        if r.method != "ensemble-dynamic" or r.user_mean_k is None:
            continue
        for pid, mk, sk in zip(r.participant_ids, r.user_mean_k, r.user_std_k):
            fig5.append({"duration_s": r.duration_s, "participant": pid, "mean_k": mk,
                         "std_k": sk})
        fig5.append({"duration_s": r.duration_s, "participant": "mean", "mean_k": r.mean_k,
                     "std_k": r.std_k})
    table1_cols = ["method"] + [f"{kind}_{t:g}s" for t in durations
                                for kind in ("acc", "itr", "sig")]
    return {
        "fig2_3": (list(base), fig2_3),
        "fig4": (["method", "k", "duration_s", "mean_acc", "se_acc", "mean_k"], fig4),
        "table1": (table1_cols, table1),
        "fig5_chosen_k": (["duration_s", "participant", "mean_k", "std_k"], fig5),
        "significance": (["duration_s", "reference", "method", "metric", "t", "p", "flag"],
                         metrics.get("significance", [])),
    }


def cmd_report(args) -> int:
    try:
        metrics = json.loads(Path(args.metrics).read_text())
        config = metrics["config"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"{args.metrics} is not an evaluate metrics file: {exc}") from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, (cols, rows) in report_tables(metrics).items():
        write_csv(out / f"{name}.csv", cols, rows, config)
        write_json(out / f"{name}.json", {"config": config, "columns": cols, "rows": rows})
    print(f"wrote report tables to {out}")
    return EXIT_OK


def cmd_import(args) -> int:
    cohort = bundles.import_matrix_dump(args.dump_dir, args.mapping)
    bundles.save_cohort(cohort, args.out, args.dtype)
    print(f"imported {cohort.n_participants} participants to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssvep-ensemble",
                     description="Training-free SSVEP target identification with a "
                                 "similarity-weighted ensemble of participant networks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic cohort bundle")
    p.add_argument("--out", required=True, help="cohort bundle directory")
    p.add_argument("--seed", type=int, help="mixing seed; the noise seed is seed + 1")
    p.add_argument("--config", help="JSON file or text with SynthParams fields")
    p.add_argument("--participants", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--f0", type=float, help="lowest stimulus frequency (Hz)")
    p.add_argument("--df", type=float, help="frequency step (Hz)")
    p.add_argument("--channels", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--fs", type=float)
    p.add_argument("--duration", type=float)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--clusters", type=int)
    p.add_argument("--dtype", choices=sorted(bundles.DTYPES), default="f32le")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the global network and the ensemble")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="model bundle (.zip)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nh", type=int, default=5, help="reference harmonics for similarity")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="identify the target of one filtered epoch")
    p.add_argument("--model", required=True)
    p.add_argument("--instance", required=True, help=".npy array (channels, samples, sub-bands)")
    p.add_argument("--mode", default="dynamic", help="dynamic, majority or fixed:K")
    p.add_argument("--cohort", help="cohort bundle whose fingerprint must match the model")
    p.add_argument("--out", required=True, help="decision JSON")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="leave-one-participant-out evaluation")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--method", action="append", help="method name; repeatable")
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--durations", help="comma-separated window lengths in seconds")
    p.add_argument("--fixed-ks", help="comma-separated fixed ensemble sizes to report")
    p.add_argument("--gaze-shift", type=float, default=0.5)
    p.add_argument("--nh", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-jobs", type=int, default=1)
    _add_training_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="figure/table views of evaluate output")
    p.add_argument("--metrics", required=True, help="metrics.json from evaluate")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("import", help="build a cohort bundle from raw array dumps")
    p.add_argument("--dump-dir", required=True)
    p.add_argument("--mapping", required=True, help="JSON mapping config")
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", choices=sorted(bundles.DTYPES), default="f32le")
    p.set_defaults(func=cmd_import)
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit status."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except bundles.FingerprintMismatchError as exc:
        print(f"error: incompatible model and cohort: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except bundles.MissingChannelError as exc:
        print(f"error: missing channel: {exc}", file=sys.stderr)
        return EXIT_MISSING_CHANNEL
    except bundles.BundleError as exc:
        print(f"error: bad bundle ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_BUNDLE
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DegenerateInputError as exc:
        print(f"error: degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(run_cli())

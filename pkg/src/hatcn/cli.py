"""Command line entry point: ``hatcn <command> [flags]``.

Exit status: 0 success, 1 usage error, 2 data error, 3 training failure.
Option values resolve as flag > config file (``--config``, flat
``key = value`` lines) > built-in default.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as D
from .explain import explain_sample, explanation_report
from .features import analyse, train_margin_classifier
from .model import (
    CheckpointError, ConfigError, HatcnConfig, HatcnModel, InputError, forward, load_checkpoint,
    save_checkpoint,
)
from .training import (
    TrainConfig, TrainingError, binary_metrics, cross_validate, evaluate, fold_seed, summarize, train,
)

log = logging.getLogger("hatcn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "out": ".",
    "model": "hatcn",
    "layers": [2],
    "channels": 8,
    "kernel": 50,
    "folds": 10,
    "repeats": 5,
    "epochs": 100,
    "lr": 1e-3,
    "batch": 32,
    "layer_pct": 0.10,
    "step_pct": 0.10,
    "jobs": 1,
}

SYNTH_KEYS = {f.name for f in fields(D.SynthConfig)} - {"seed"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# parser


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


FLAGS = {
    "seed": dict(type=int, help="random seed (master seed for cv)"),
    "out": dict(help="output directory"),
    "data": dict(help="input dataset CSV (long or wide layout)"),
    "model": dict(choices=["hatcn", "tcn"], help="model variant: attention (hatcn) or last-activation (tcn)"),
    "layers": dict(type=int, nargs="+", help="hidden layers K; cv accepts several values for a depth sweep"),
    "channels": dict(type=int, help="channels C per hidden layer"),
    "kernel": dict(type=int, help="convolution kernel size l"),
    "folds": dict(type=int, help="number of subject-level folds"),
    "repeats": dict(type=int, help="repeats of the full k-fold run"),
    "epochs": dict(type=int, help="training epochs"),
    "lr": dict(type=float, help="Adam learning rate"),
    "batch": dict(type=int, help="mini-batch size"),
    "layer_pct": dict(type=float, help="fraction of layers kept by across-layer attention"),
    "step_pct": dict(type=float, help="fraction of time steps kept by within-layer attention"),
    "jobs": dict(type=int, help="parallel worker processes for cv"),
    "checkpoint": dict(help="model checkpoint file"),
    "series": dict(help="CSV with the series to explain"),
    "config": dict(help="flat key = value config file; flags take precedence"),
}

COMMANDS = {
    "gen-data": ("write a synthetic handgrip cohort (CSV + ground-truth JSON)", ["seed", "out", "config"]),
    "train": ("train one model and save a checkpoint and loss curve",
              ["data", "model", "layers", "channels", "kernel", "epochs", "lr", "batch", "seed", "out", "config"]),
    "eval": ("score a checkpoint on a dataset", ["checkpoint", "data", "model", "out", "config"]),
    "cv": ("repeated subject-level cross-validation with optional depth sweep",
           ["data", "model", "layers", "channels", "kernel", "folds", "repeats", "epochs", "lr", "batch",
            "seed", "jobs", "out", "config"]),
    "explain": ("explain predictions: relevance frequency, segments, SVG overlay",
                ["checkpoint", "series", "layer_pct", "step_pct", "out", "config"]),
    "baseline": ("relaxation-time feature and margin classifier under subject-level CV",
                 ["data", "folds", "seed", "out", "config"]),
    "plot": ("render stored cv results or explanations to SVG", ["data", "out", "config"]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hatcn", description="Hierarchical attention TCN for handgrip series.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        for opt in opts:
            kw = dict(FLAGS[opt])
            if name == "plot" and opt == "data":
                kw = dict(nargs="+", help="stored results.json or explanation.json files")
            p.add_argument("--" + opt.replace("_", "-"), dest=opt, default=None, **kw)
    return parser


# ---------------------------------------------------------------------------
# option resolution


def read_config(path) -> dict[str, str]:
    text = Path(path).read_text()
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        cp.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    return {k.replace("-", "_"): v for k, v in cp["config"].items()}


def _coerce(key: str, raw: str):
    kw = FLAGS[key]
    if kw.get("nargs") == "+":
        try:
            return _int_list(raw)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"config key {key}: {exc}") from None
    conv = kw.get("type", str)
    try:
        val = conv(raw)
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {raw!r}") from None
    if "choices" in kw and val not in kw["choices"]:
        raise UsageError(f"config key {key}: {val!r} not in {kw['choices']}")
    return val


def resolve(args: argparse.Namespace) -> tuple[dict, dict]:
    """Merge flags, config file and defaults. Returns ``(options, synth_overrides)``."""
    opts = COMMANDS[args.command][1]
    conf = read_config(args.config) if getattr(args, "config", None) else {}
    synth = {}
    merged = {}
    for key, raw in conf.items():
        if key in SYNTH_KEYS and args.command in ("gen-data", "cv"):
            synth[key] = raw
        elif key not in opts or key == "config":
            raise UsageError(f"config key {key!r} is not valid for {args.command}")
    for key in opts:
        if key == "config":
            continue
        val = getattr(args, key)
        if val is None and key in conf:
            val = _coerce(key, conf[key])
        if val is None and not (args.command == "eval" and key == "model"):
            val = DEFAULTS.get(key)
        merged[key] = val
    return merged, synth


def _require(o: dict, *keys):
    for k in keys:
        if o.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _positive(o: dict, *keys):
    for k in keys:
        v = o[k]
        vals = v if isinstance(v, list) else [v]
        if any(x <= 0 for x in vals):
            raise UsageError(f"--{k.replace('_', '-')} must be positive")


def _fraction(o: dict, *keys):
    for k in keys:
        if not 0 < o[k] <= 1:
            raise UsageError(f"--{k.replace('_', '-')} must lie in (0, 1]")


def _out_dir(o: dict) -> Path:
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _synth(seed: int, overrides: dict) -> D.SynthConfig:
    try:
        return D.SynthConfig.from_mapping({**overrides, "seed": seed})
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(o, synth) -> None:
    ds = D.generate_synthetic(_synth(o["seed"], synth))
    out = _out_dir(o)
    D.write_long_csv(ds, out / "series.csv")
    D.write_truth_json(ds, out / "truth.json")
    log.info("wrote %d series to %s", len(ds), out)


def _model_config(o, layers: int) -> HatcnConfig:
    try:
        return HatcnConfig(layers, o["channels"], o["kernel"], D.SERIES_LENGTH)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(o, _synth_unused) -> None:
    _require(o, "data")
    _positive(o, "layers", "channels", "kernel", "epochs", "batch")
    if len(o["layers"]) != 1:
        raise UsageError("train takes a single --layers value")
    if o["lr"] < 0:
        raise UsageError("--lr must be >= 0")
    cfg = _model_config(o, o["layers"][0])
    ds = D.read_csv(o["data"])
    x, y = ds.matrix(), ds.labels.astype(np.float64)
    model = HatcnModel(cfg, seed=o["seed"])
    tcfg = TrainConfig(lr=o["lr"], epochs=o["epochs"], batch_size=o["batch"], seed=o["seed"], variant=o["model"])
    try:
        result = train(model, x, y, tcfg)
    except ValueError as exc:
        raise D.DataFormatError(str(exc)) from None
    out = _out_dir(o)
    meta = {"seed": o["seed"], "epochs": o["epochs"], "lr": o["lr"], "batch": o["batch"],
            "variant": o["model"], "data": str(o["data"]), "final_loss": result.losses[-1]}
    save_checkpoint(out / "model.bin", model, meta)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        w.writerow([0, repr(result.initial_loss)])
        for e, loss in enumerate(result.losses, start=1):
            w.writerow([e, repr(loss)])
    log.info("trained in %.1fs, final loss %.4f", result.seconds, result.losses[-1])


def cmd_eval(o, _synth_unused) -> None:
    _require(o, "checkpoint", "data")
    model, meta = load_checkpoint(o["checkpoint"])
    ds = D.read_csv(o["data"])
    variant = o["model"] if o["model"] else meta.get("variant", "hatcn")
    m = evaluate(model, ds.matrix(model.config.input_length), ds.labels, variant)
    _write_json(_out_dir(o) / "metrics.json", {"variant": variant, "n": len(ds), **m.to_dict()})


def cmd_cv(o, synth) -> None:
    _positive(o, "layers", "channels", "kernel", "folds", "repeats", "epochs", "batch", "jobs")
    if o["lr"] < 0:
        raise UsageError("--lr must be >= 0")
    for k in o["layers"]:
        _model_config(o, k)
    if o["folds"] < 2:
        raise UsageError("--folds must be at least 2")
    if o["data"]:
        ds = D.read_csv(o["data"])
    else:
        ds = D.generate_synthetic(_synth(o["seed"], synth))
    if o["folds"] < 2 or o["folds"] > len(set(ds.subjects)):
        raise UsageError(f"--folds must lie in [2, {len(set(ds.subjects))}]")
    tcfg = TrainConfig(lr=o["lr"], epochs=o["epochs"], batch_size=o["batch"], variant=o["model"],
                       depths=tuple(o["layers"]))

    def progress(rec):
        log.info("K=%d repeat %d fold %d: accuracy %.3f f1 %.3f", rec.depth, rec.repeat, rec.fold,
                 rec.accuracy, rec.f1)

    res = cross_validate(ds, _model_config(o, o["layers"][0]), tcfg, o["folds"], o["repeats"],
                         o["seed"], o["jobs"], progress)
    out = _out_dir(o)
    _write_json(out / "results.json", res.results_dict())
    _write_json(out / "metrics.json", res.metrics_dict())
    summary = res.depth_summary()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "layers", "accuracy_mean", "accuracy_std", "f1_mean", "f1_std"])
        for d, s in summary.items():
            w.writerow([res.variant, d, s["accuracy"]["mean"], s["accuracy"]["std"], s["f1"]["mean"], s["f1"]["std"]])
    with open(out / "depth_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "depth", "accuracy_mean", "accuracy_std", "seconds"])
        for d, s in summary.items():
            w.writerow([res.variant, d, s["accuracy"]["mean"], s["accuracy"]["std"], s["seconds"]])


def _safe_name(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in text)


def cmd_explain(o, _synth_unused) -> None:
    from .plots import plot_class_frequency, plot_explanation

    _require(o, "checkpoint", "series")
    _fraction(o, "layer_pct", "step_pct")
    model, _ = load_checkpoint(o["checkpoint"])
    ds = D.read_csv(o["series"])
    x = ds.matrix(model.config.input_length)
    out = _out_dir(o)
    reports = []
    by_class: dict[str, list] = {}
    for s0 in range(0, len(ds), 64):
        trace = forward(model, x[s0:s0 + 64])
        for j in range(trace.batch_size):
            s = ds.series[s0 + j]
            prof = explain_sample(trace, j, o["layer_pct"], o["step_pct"], 0.10)
            reports.append(explanation_report(trace, prof, s.id, j))
            plot_explanation(out / f"{_safe_name(s.id)}.svg", x[s0 + j], prof.freq, prof.segments,
                             title=f"{s.id} p={trace.probability[j]:.3f}")
            by_class.setdefault("patient" if s.label == D.PATIENT else "healthy", []).append(prof.freq)
    _write_json(out / "explanation.json", {"explanations": reports})
    plot_class_frequency(out / "class_frequency.svg", {k: np.mean(v, axis=0) for k, v in sorted(by_class.items())})


def baseline_features(ds: D.Dataset) -> list[dict]:
    rows = []
    for s, x in zip(ds.series, ds.matrix()):
        a = analyse(x)
        rows.append({"series_id": s.id, "subject_id": s.subject_id, "label": s.label, "eta": a.eta,
                     "start_index": a.start, "rt90_5": a.rt90_5, "censored": a.censored})
    return rows


def run_baseline(ds: D.Dataset, folds: int, seed: int) -> tuple[list[dict], dict]:
    rows = baseline_features(ds)
    f = np.array([r["rt90_5"] for r in rows])
    y = ds.labels
    runs = []
    for k, (tr, te) in enumerate(D.subject_kfold(ds, folds, fold_seed(seed))):
        clf = train_margin_classifier(f[tr], y[tr])
        m = binary_metrics(y[te], clf.predict(f[te]))
        runs.append({"fold": k, "boundary": clf.boundary, **m.to_dict()})
    metrics = {
        "folds": folds, "seed": seed, "runs": runs,
        "summary": {"accuracy": summarize([r["accuracy"] for r in runs]),
                    "f1": summarize([r["f1"] for r in runs])},
    }
    return rows, metrics


def cmd_baseline(o, _synth_unused) -> None:
    _require(o, "data")
    ds = D.read_csv(o["data"])
    if o["folds"] < 2 or o["folds"] > len(set(ds.subjects)):
        raise UsageError(f"--folds must lie in [2, {len(set(ds.subjects))}]")
    rows, metrics = run_baseline(ds, o["folds"], o["seed"])
    out = _out_dir(o)
    with open(out / "features.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "censored": int(r["censored"])})
    _write_json(out / "metrics.json", metrics)


def cmd_plot(o, _synth_unused) -> None:
    from .plots import plot_class_frequency, plot_depth_sweep

    _require(o, "data")
    if isinstance(o["data"], str):
        o["data"] = o["data"].split()
    out = _out_dir(o)
    sweep = []
    for path in o["data"]:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise D.DataFormatError(f"{path}: {exc}") from None
        if "summary" in doc and "variant" in doc and "runs" in doc:
            for d, s in doc["summary"].items():
                sweep.append({"variant": doc["variant"], "depth": int(d), "accuracy_mean": s["accuracy"]["mean"],
                              "accuracy_std": s["accuracy"]["std"], "seconds": s.get("seconds", 0.0)})
        elif "explanations" in doc:
            curves = {"mean": np.mean([e["freq"] for e in doc["explanations"]], axis=0)}
            plot_class_frequency(out / f"{_safe_name(Path(path).stem)}_frequency.svg", curves)
        else:
            raise D.DataFormatError(f"{path}: neither cv results nor explanations")
    if sweep:
        plot_depth_sweep(out / "depth_sweep.svg", sweep)


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "cv": cmd_cv,
    "explain": cmd_explain, "baseline": cmd_baseline, "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        opts, synth = resolve(args)
        HANDLERS[args.command](opts, synth)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (OSError, D.DataFormatError, D.DegenerateSeriesError, CheckpointError, InputError,
            ConfigError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``zdt <subcommand> ...``.

Every subcommand reads and writes files named on the command line, so the
workflow composes: ``synth`` -> ``train-ad`` -> ``train-nd`` -> ``score``.
Settings resolve as command-line flag, then ``--config`` JSON, then built-in
default. Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import Sequence

import numpy as np

from .bundle import BundleError, load_bundle, save_bundle
from .eval_harness import (
    ATTACK_CLASSES,
    METRIC,
    RECON,
    HoldoutExperimentConfig,
    SyntheticConfig,
    UndefinedAUC,
    generate_synthetic_dataset,
    run_holdout_experiment,
    run_knn_experiment,
    write_cata_distribution,
    write_holdout_rows,
)
from .flow_data import FEATURE_NAMES, FlowDataError, parse_flow_csv, write_flow_csv
from .graph_features import graph_artifacts, write_host_csv
from .neural_core import AutoencoderConfig, TrainingDiverged
from .novelty_training import MiningError, TrainingConfig
from .pipeline import (
    BENIGN,
    AnomalyConfig,
    NoveltyConfig,
    export_latent,
    featurize,
    fit_novelty_detector,
    refit_scaler,
    score_features,
    train_anomaly_detector,
    write_verdicts_csv,
)
from .preprocess import FitError

logger = logging.getLogger("zdt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_AE = AutoencoderConfig()
_ND = TrainingConfig()

DEFAULTS: dict = {
    "seed": 0,
    "alpha": _ND.alpha,
    "beta": None,
    "gamma": None,
    "metric_learning": True,
    "widths": list(_ND.widths),
    "latent_dim": _ND.latent_dim,
    "lr": _ND.lr,
    "batch_size": _ND.batch_size,
    "ad_epochs": _AE.epochs,
    "nd_epochs": _ND.epochs,
    "patience": _AE.patience,
    "ad_quantile": AnomalyConfig().quantile,
    "nd_quantile": NoveltyConfig().quantile,
    "k": NoveltyConfig().k,
    "refit_scaler": None,  # None: refit only when --benign-sample is given
    "seeds": [0, 1, 2, 3, 4],
    "holdout": "botnet",
    "max_fraction": 0.02,
    "modes": [METRIC, RECON],
    "ks": [1, 5, 10, 20, 50, 100],
    "n_benign": 40000,
    "n_per_class": 2500,
}

_TYPES: dict = {
    "seed": int, "latent_dim": int, "batch_size": int, "ad_epochs": int, "nd_epochs": int,
    "patience": int, "k": int, "n_benign": int, "n_per_class": int,
    "alpha": float, "lr": float, "ad_quantile": float, "nd_quantile": float, "max_fraction": float,
    "beta": (float, type(None)), "gamma": (float, type(None)),
    "metric_learning": bool, "refit_scaler": (bool, type(None)),
    "widths": list, "seeds": list, "modes": list, "ks": list, "holdout": str,
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- configuration -----------------------------------------------------------


def _check_value(key: str, value):
    want = _TYPES[key]
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(want, tuple) and float in want and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, bool):
        raise UsageError(f"config key {key!r} expects int, got bool")
    if not isinstance(value, want):
        raise UsageError(f"config key {key!r} has wrong type {type(value).__name__}")
    if key in ("widths", "seeds", "ks") and not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise UsageError(f"config key {key!r} must be a list of integers")
    if key == "modes" and not set(value) <= {METRIC, RECON}:
        raise UsageError(f"modes must be drawn from {[METRIC, RECON]}")
    return value


def load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = sorted(set(data) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _check_value(k, v) for k, v in data.items()}


def resolve_config(cli: dict, file_cfg: dict | None = None) -> dict:
    """Flags beat the config file, which beats the defaults."""
    out = dict(DEFAULTS)
    out.update(file_cfg or {})
    out.update({k: v for k, v in cli.items() if v is not None and k in DEFAULTS})
    return out


def _training_config(cfg: dict) -> TrainingConfig:
    beta, gamma = cfg["beta"], cfg["gamma"]
    if not cfg["metric_learning"]:
        gamma = 0.0
        beta = 1.0 if beta is None else beta
    return TrainingConfig(
        alpha=cfg["alpha"], beta=beta, gamma=gamma, batch_size=cfg["batch_size"],
        epochs=cfg["nd_epochs"], lr=cfg["lr"], seed=cfg["seed"],
        widths=tuple(cfg["widths"]), latent_dim=cfg["latent_dim"],
    )


def _novelty_config(cfg: dict) -> NoveltyConfig:
    return NoveltyConfig(training=_training_config(cfg), quantile=cfg["nd_quantile"], k=cfg["k"])


def _anomaly_config(cfg: dict) -> AnomalyConfig:
    net = AutoencoderConfig(
        widths=tuple(cfg["widths"]), latent_dim=cfg["latent_dim"], lr=cfg["lr"],
        batch_size=cfg["batch_size"], epochs=cfg["ad_epochs"], patience=cfg["patience"],
        seed=cfg["seed"],
    )
    return AnomalyConfig(network=net, quantile=cfg["ad_quantile"])


# -- file helpers ------------------------------------------------------------


def _require_input(path: str) -> None:
    if not os.path.isfile(path):
        raise DataError(f"input file not found: {path}")


def _require_output(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise DataError(f"output directory does not exist: {parent}")


def write_features_csv(x: np.ndarray, labels, dest: str) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("record_id",) + FEATURE_NAMES + ("label",))
        for i, (row, lab) in enumerate(zip(x, labels)):
            w.writerow([i] + [repr(float(v)) for v in row] + [lab or ""])


def _read_header(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return next(csv.reader(fh), [])


def load_rows(path: str, seed: int):
    """Feature matrix, labels and per-row errors from a flow or feature CSV.

    A file whose header carries every feature name is read as precomputed
    features; anything else is parsed as flows and featurized over a graph
    built from the same file.
    """
    _require_input(path)
    header = _read_header(path)
    if set(FEATURE_NAMES) <= set(header):
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        try:
            x = np.array([[float(r[f]) for f in FEATURE_NAMES] for r in rows], dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric feature value ({exc})") from exc
        if not np.all(np.isfinite(x)):
            raise DataError(f"{path}: non-finite feature values")
        labels = np.array([r.get("label") or BENIGN for r in rows], dtype=object)
        return x.reshape(-1, len(FEATURE_NAMES)), labels, [None] * len(rows), None
    report = parse_flow_csv(path)
    if report.n_errors:
        logger.warning("%s: skipped %d malformed rows (first at line %d)",
                       path, report.n_errors, report.errors[0].line)
    if not report.records:
        raise DataError(f"{path}: no valid flow records")
    art = graph_artifacts(report.records, seed=seed)
    x, errors = featurize(report.records, art, strict=False)
    labels = np.array([r.label or BENIGN for r in report.records], dtype=object)
    return x, labels, errors, art


# -- subcommands -------------------------------------------------------------


def cmd_synth(args, cfg) -> None:
    counts = {BENIGN: cfg["n_benign"], **{c: cfg["n_per_class"] for c in ATTACK_CLASSES}}
    records = generate_synthetic_dataset(SyntheticConfig(counts=counts, seed=cfg["seed"]))
    write_flow_csv(records, args.out)
    logger.info("wrote %d flows to %s", len(records), args.out)


def cmd_featurize(args, cfg) -> None:
    x, labels, errors, art = load_rows(args.input, cfg["seed"])
    write_features_csv(x, labels, args.out)
    if args.hosts and art is not None:
        write_host_csv(art, args.hosts)
    logger.info("wrote %d feature rows to %s", len(x), args.out)


def cmd_train_ad(args, cfg) -> None:
    x, labels, _, _ = load_rows(args.input, cfg["seed"])
    benign = x[labels == BENIGN]
    if len(benign) < 2:
        raise DataError("anomaly training needs at least two benign (or unlabelled) rows")
    ad = train_anomaly_detector(benign, _anomaly_config(cfg))
    save_bundle(ad, None, args.out)
    logger.info("anomaly threshold %.6g; bundle written to %s", ad.threshold, args.out)


def cmd_train_nd(args, cfg) -> None:
    ad = None
    if args.bundle:
        _require_input(args.bundle)
        ad, _ = load_bundle(args.bundle)
    x, labels, _, _ = load_rows(args.input, cfg["seed"])
    attack = labels != BENIGN
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        nd, result = fit_novelty_detector(x[attack], labels[attack], _novelty_config(cfg), log_fh)
    finally:
        if log_fh:
            log_fh.close()
    save_bundle(ad, nd, args.out)
    logger.info("novelty threshold %.6g (beta=%.4g gamma=%.4g); bundle written to %s",
                nd.threshold, result.beta, result.gamma, args.out)


def cmd_score(args, cfg) -> None:
    ad, nd = load_bundle(args.bundle)
    if ad is None or nd is None:
        raise DataError(f"{args.bundle} must hold both detectors for scoring")
    refit = cfg["refit_scaler"]
    if refit and not args.benign_sample:
        raise UsageError("--refit-scaler needs --benign-sample")
    if args.benign_sample and refit is not False:
        bx, blabels, _, _ = load_rows(args.benign_sample, cfg["seed"])
        ad = refit_scaler(ad, bx[blabels == BENIGN])
        logger.info("min-max scaler refitted on %d benign rows", int(np.sum(blabels == BENIGN)))
    else:
        logger.info("using the min-max scaler stored in the bundle")
    x, _, errors, _ = load_rows(args.input, cfg["seed"])
    verdicts = score_features(x, ad, nd, errors=errors)
    write_verdicts_csv(verdicts, args.out)
    logger.info("wrote %d verdicts to %s", len(verdicts), args.out)


def cmd_eval_holdout(args, cfg) -> None:
    from .eval_harness import LabeledDataset

    x, labels, _, art = load_rows(args.input, cfg["seed"])
    config = HoldoutExperimentConfig(
        holdout=cfg["holdout"], max_fraction=cfg["max_fraction"], seeds=tuple(cfg["seeds"]),
        modes=tuple(cfg["modes"]), anomaly=_anomaly_config(cfg), novelty=_novelty_config(cfg),
    )
    report = run_holdout_experiment(LabeledDataset(x, labels, art), config)
    write_holdout_rows(report.rows, args.out)
    if args.cata_out:
        mode = METRIC if METRIC in config.modes else config.modes[0]
        write_cata_distribution(config.holdout, report.cata_distribution(mode), args.cata_out)
    for r in report.rows:
        print(f"seed={r.seed} mode={r.mode} precision={r.precision:.4f} "
              f"recall={r.recall:.4f} auc={r.auc:.4f}")


def cmd_knn_sweep(args, cfg) -> None:
    from .eval_harness import LabeledDataset

    x, labels, _, art = load_rows(args.input, cfg["seed"])
    rows = run_knn_experiment(
        LabeledDataset(x, labels, art), cfg["ks"], cfg["seeds"], cfg["modes"], _novelty_config(cfg)
    )
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "mode", "k", "accuracy"))
        for r in rows:
            for k, acc in r.accuracy.items():
                w.writerow((r.seed, r.mode, k, repr(acc)))


def cmd_export_latent(args, cfg) -> None:
    _, nd = load_bundle(args.bundle)
    if nd is None:
        raise DataError(f"{args.bundle} holds no novelty detector")
    x, labels, _, _ = load_rows(args.input, cfg["seed"])
    export_latent(nd, x, labels, args.out)


# -- argument parsing --------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of settings (flags take precedence)")
    p.add_argument("--seed", type=int)
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--widths", type=int, nargs="+")
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zdt", description="Two-stage zero-day threat detection on flow records.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="generate a labelled synthetic flow CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--n-benign", type=int)
    p.add_argument("--n-per-class", type=int)
    _add_common(p)

    p = sub.add_parser("featurize", help="flows to the 24-column feature CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hosts", help="optional per-host graph feature CSV")
    _add_common(p)

    p = sub.add_parser("train-ad", help="train the anomaly detector on benign rows")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ad-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--ad-quantile", type=float)
    _add_training(p)
    _add_common(p)

    p = sub.add_parser("train-nd", help="train the novelty detector on labelled attack rows")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bundle", help="bundle holding the anomaly detector to pair with")
    p.add_argument("--log", help="JSON-lines training log")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--nd-epochs", type=int)
    p.add_argument("--nd-quantile", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--no-metric-learning", dest="metric_learning", action="store_const", const=False)
    _add_training(p)
    _add_common(p)

    p = sub.add_parser("score", help="score flows into verdicts")
    p.add_argument("--bundle", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--benign-sample", help="benign flows from the target network for min-max refit")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--refit-scaler", dest="refit_scaler", action="store_const", const=True)
    g.add_argument("--no-refit-scaler", dest="refit_scaler", action="store_const", const=False)
    _add_common(p)

    p = sub.add_parser("eval-holdout", help="held-out-class ZDT experiment")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cata-out")
    p.add_argument("--holdout")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--max-fraction", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--nd-epochs", type=int)
    p.add_argument("--ad-epochs", type=int)
    _add_common(p)

    p = sub.add_parser("knn-sweep", help="latent kNN accuracy against k")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ks", type=int, nargs="+")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--alpha", type=float)
    p.add_argument("--nd-epochs", type=int)
    _add_common(p)

    p = sub.add_parser("export-latent", help="latent and PCA coordinates for plotting")
    p.add_argument("--bundle", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "train-ad": cmd_train_ad,
    "train-nd": cmd_train_nd,
    "score": cmd_score,
    "eval-holdout": cmd_eval_holdout,
    "knn-sweep": cmd_knn_sweep,
    "export-latent": cmd_export_latent,
}

_OUTPUTS = ("out", "hosts", "log", "cata_out")
_INPUTS = ("input", "bundle", "benign_sample")


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        logger.setLevel(args.log_level)
        file_cfg = load_config_file(args.config) if args.config else None
        cfg = resolve_config(vars(args), file_cfg)
        for key in ("widths", "seeds", "ks", "modes"):
            cfg[key] = _check_value(key, list(cfg[key]))
        for name in _INPUTS:
            if getattr(args, name, None):
                _require_input(getattr(args, name))
        for name in _OUTPUTS:
            if getattr(args, name, None):
                _require_output(getattr(args, name))
        print("resolved config: " + json.dumps(cfg, sort_keys=True), file=sys.stderr)
        print(f"seed: {cfg['seed']}", file=sys.stderr)
        _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"zdt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FlowDataError, BundleError, MiningError, FitError, UndefinedAUC, OSError) as exc:
        print(f"zdt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"zdt: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Staged command-line pipeline.

Subcommands mirror the pipeline stages and persist artifacts between them
so each stage can be rerun independently:

    gen-data        synthetic entity collections (simulate or resample)
    pretrain        boosted-tree base model on a public-style corpus
    extract-priors  attribution-based Gaussian prior from the base model
    fit             hierarchical Bayesian fit (NUTS) on the collection
    calibrate       conformal threshold from held-out calibration rows
    predict         per-customer probabilities, intervals, and sets
    evaluate        cross-validated comparison against baselines

Configuration is a flat INI file with [gbdt], [hierarchical], [conformal],
and [run] sections; every key can be overridden on the command line.  Exit
codes: 0 success, 2 configuration error, 3 diagnostic failure, 4 data error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conformal import (CalibrationResult, calibrate_pooled, conservative_adjust,
                        predict_set, select_strategy)
from .data import (Dataset, SMECollection, apply_standardization,
                   StandardizationStats, generate_hierarchical_population,
                   load_collection, load_csv, make_synthetic_smes,
                   save_collection, standardize, stratified_split)
from .errors import (ChurnpoolError, DataError, DiagnosticError,
                     ValidationError)
from .evaluate import ExperimentConfig, classification_metrics, run_experiment
from .gbdt import GradientBoostedTrees, TreeEnsemble
from .hier_model import HierarchicalLogistic, posterior_predict_matrix
from .nuts import PosteriorTrace
from .shap_prior import PriorSpec, extract_priors, prior_only_auc

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIAGNOSTIC = 3
EXIT_DATA = 4

# Convergence gates for persisting a fit as converged.
RHAT_GATE = 1.01
ESS_GATE = 400.0

_UNCERTAINTY_WORD = {0: "invalid", 1: "low", 2: "high"}
_ACTION_TIER = {
    frozenset({1}): "high-risk churner",
    frozenset({0}): "low-risk retained",
    frozenset({0, 1}): "uncertain: gather more data",
    frozenset(): "recalibrate",
}


class ConfigError(ChurnpoolError):
    """Raised for malformed configuration values."""


@dataclass
class RunConfig:
    """Flat configuration with range validation.

    Field names follow the hyperparameter table keys; bounds are enforced
    at parse time so downstream stages can trust the values.
    """

    # [gbdt]
    iterations: int = 1000
    learning_rate: float = 0.03
    tree_depth: int = 6
    min_samples_leaf: int = 20
    l2_regularization: float = 3.0
    subsample_ratio: float = 0.8
    feature_subsample_ratio: float = 0.8
    early_stopping_rounds: int = 50
    # [hierarchical]
    tau: float = 2.0
    prior_scaling_lambda: float = 1.0
    warmup_iterations: int = 2000
    sampling_iterations: int = 2000
    chains: int = 4
    target_accept_rate: float = 0.90
    max_tree_depth: int = 10
    divergence_threshold: float = 1000.0
    # [conformal]
    miscoverage_alpha: float = 0.10
    calibration_split: float = 0.20
    # [run]
    seed: int = 42
    smes: int = 15
    n_per: int = 100
    features: int = 20
    mu_scale: float = 1.0
    sigma_true: float = 0.5
    folds: int = 5
    l2_c: float = 1.0
    label_column: str = "target"
    tag_column: str = "source"

    _SECTIONS = {
        "gbdt": ("iterations", "learning_rate", "tree_depth",
                 "min_samples_leaf", "l2_regularization", "subsample_ratio",
                 "feature_subsample_ratio", "early_stopping_rounds"),
        "hierarchical": ("tau", "prior_scaling_lambda", "warmup_iterations",
                         "sampling_iterations", "chains", "target_accept_rate",
                         "max_tree_depth", "divergence_threshold"),
        "conformal": ("miscoverage_alpha", "calibration_split"),
        "run": ("seed", "smes", "n_per", "features", "mu_scale", "sigma_true",
                "folds", "l2_c", "label_column", "tag_column"),
    }

    _RANGES = {
        "tau": (1.0, 5.0),
        "prior_scaling_lambda": (0.5, 2.0),
        "warmup_iterations": (1000, 3000),
        "sampling_iterations": (1000, 5000),
        "chains": (2, 8),
        "target_accept_rate": (0.80, 0.95),
        "miscoverage_alpha": (0.05, 0.20),
        "calibration_split": (0.15, 0.30),
    }

    @classmethod
    def load(cls, path: str | None, overrides: dict | None = None) -> "RunConfig":
        config = cls()
        if path is not None:
            parser = configparser.ConfigParser()
            read = parser.read(path, encoding="utf-8")
            if not read:
                raise ConfigError(f"cannot read config file {path}")
            for section, keys in cls._SECTIONS.items():
                if not parser.has_section(section):
                    continue
                for key, raw in parser.items(section):
                    if key not in keys:
                        raise ConfigError(
                            f"unknown key {key!r} in section [{section}]")
                    config._assign(key, raw)
        for key, value in (overrides or {}).items():
            if value is not None:
                config._assign(key, value)
        config.validate()
        return config

    def _assign(self, key: str, raw) -> None:
        current = getattr(self, key)
        try:
            if isinstance(current, bool):
                value = str(raw).lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                value = int(str(raw))
            elif isinstance(current, float):
                value = float(str(raw))
            else:
                value = str(raw)
        except ValueError:
            raise ConfigError(f"invalid value {raw!r} for {key}") from None
        setattr(self, key, value)

    def validate(self) -> None:
        for key, (low, high) in self._RANGES.items():
            value = getattr(self, key)
            if not low <= value <= high:
                raise ConfigError(
                    f"{key}={value} outside allowed range [{low}, {high}]")
        for key in ("iterations", "tree_depth", "min_samples_leaf",
                    "early_stopping_rounds", "smes", "n_per", "features",
                    "folds"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")

    def echo(self) -> dict:
        return {section: {key: getattr(self, key) for key in keys}
                for section, keys in self._SECTIONS.items()}

    def gbdt_params(self) -> dict:
        return {
            "iterations": self.iterations,
            "learning_rate": self.learning_rate,
            "max_depth": self.tree_depth,
            "min_samples_leaf": self.min_samples_leaf,
            "l2_leaf": self.l2_regularization,
            "row_subsample": self.subsample_ratio,
            "feature_subsample": self.feature_subsample_ratio,
            "early_stopping_rounds": self.early_stopping_rounds,
            "seed": self.seed,
        }


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: {path} (run the earlier stage first)")
    return path


def _check_force(paths, force: bool) -> None:
    for path in paths:
        if Path(path).exists() and not force:
            raise DataError(f"{path} exists (use --force to overwrite)")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(config: RunConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = out / "smes"
    truth_path = out / "ground_truth.json"
    if args.mode == "simulate":
        _check_force([truth_path], args.force)
        collection, truth = generate_hierarchical_population(
            config.features, config.smes, config.n_per, config.mu_scale,
            config.sigma_true, config.seed)
        save_collection(collection, data_dir, force=args.force)
        truth_path.write_text(truth.to_json() + "\n", encoding="utf-8")
    else:
        if args.source is None:
            raise ConfigError("--mode resample requires --source CSV")
        source = load_csv(args.source, config.label_column, config.tag_column)
        if args.stats is not None:
            stats_doc = json.loads(Path(args.stats).read_text(encoding="utf-8"))
            stats = StandardizationStats(np.asarray(stats_doc["means"]),
                                         np.asarray(stats_doc["stds"]))
            source = apply_standardization(source, stats)
        collection = make_synthetic_smes(source, config.smes, config.n_per,
                                         config.seed)
        save_collection(collection, data_dir, force=args.force)
    print(f"wrote {config.smes} entity files under {data_dir}")
    return EXIT_OK


def cmd_pretrain(config: RunConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.json"
    stats_path = out / "standardization.json"
    metrics_path = out / "pretrain_metrics.json"
    val_path = out / "pretrain_val.csv"
    _check_force([model_path, stats_path, metrics_path, val_path], args.force)

    if args.source is None:
        raise ConfigError("pretrain requires --source CSV")
    corpus = load_csv(args.source, config.label_column, config.tag_column)
    train_raw, val_raw = stratified_split(corpus, 0.2, config.seed)
    train_std, stats = standardize(train_raw)
    val_std = apply_standardization(val_raw, stats)

    model = GradientBoostedTrees(**config.gbdt_params())
    model.fit(train_std.features, train_std.labels, val_std.features,
              val_std.labels, feature_names=train_std.feature_names)
    model.ensemble_.save(model_path)
    _write_json(stats_path, {"means": [float(v) for v in stats.means],
                             "stds": [float(v) for v in stats.stds],
                             "feature_names": list(train_std.feature_names)})

    probs = model.predict_proba(val_std.features)
    report = classification_metrics(probs, val_std.labels)
    _write_json(metrics_path, {
        "auc_roc": report.auc, "accuracy": report.accuracy,
        "precision": report.precision, "recall": report.recall,
        "f1_score": report.f1, "log_loss": report.log_loss,
        "best_iteration": model.best_iteration_,
        "n_validation": report.n,
    })
    _write_dataset_csv(val_std, val_path, config.label_column,
                       config.tag_column)
    print(f"pretrained {model.best_iteration_} trees; "
          f"validation AUC {report.auc:.4f}")
    return EXIT_OK


def _write_dataset_csv(ds: Dataset, path: Path, label_column: str,
                       tag_column: str) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = list(ds.feature_names) + [label_column]
        if ds.source_tags is not None:
            header.append(tag_column)
        writer.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.features[i]]
            row.append(str(int(ds.labels[i])))
            if ds.source_tags is not None:
                row.append(ds.source_tags[i])
            writer.writerow(row)


def cmd_extract_priors(config: RunConfig, args) -> int:
    out = Path(args.out)
    prior_path = out / "prior.json"
    check_path = out / "prior_check.json"
    _check_force([prior_path, check_path], args.force)

    ensemble = TreeEnsemble.load(_require(out / "model.json", "model artifact"))
    stats_doc = json.loads(
        _require(out / "standardization.json", "standardization stats")
        .read_text(encoding="utf-8"))
    stats = StandardizationStats(np.asarray(stats_doc["means"]),
                                 np.asarray(stats_doc["stds"]))
    val = load_csv(_require(out / "pretrain_val.csv", "validation data"),
                   config.label_column, config.tag_column)
    if val.source_tags is None or len(set(val.source_tags)) < 2:
        print("warning: no usable source tags; "
              "falling back to single-source prior widths", file=sys.stderr)
    prior = extract_priors(ensemble, val, stats, config.prior_scaling_lambda)
    prior.save(prior_path)

    sanity_auc = prior_only_auc(prior, val, draws=args.prior_draws,
                                seed=config.seed)
    _write_json(check_path, {"prior_only_auc": sanity_auc,
                             "draws": args.prior_draws, "seed": config.seed})
    print(f"prior-only AUC over {args.prior_draws} draws: {sanity_auc:.4f}")
    return EXIT_OK


def cmd_fit(config: RunConfig, args) -> int:
    out = Path(args.out)
    trace_path = out / "trace.bin"
    diag_path = out / "diagnostics.json"
    meta_path = out / "fit_meta.json"
    calib_dir = out / "calibration_data"
    _check_force([trace_path, diag_path, meta_path], args.force)

    collection = load_collection(_require(out / "smes", "entity collection"))
    if args.weak_prior:
        prior = PriorSpec(collection.feature_names,
                          np.zeros(collection.p), np.ones(collection.p),
                          0.0, {"fallback": True, "tags": [],
                                "note": "weak prior requested"})
    else:
        prior = PriorSpec.load(_require(out / "prior.json", "prior artifact"))

    fit_parts, cal_parts = [], []
    for j, ds in enumerate(collection.smes):
        train, cal = stratified_split(ds, config.calibration_split,
                                      config.seed + j)
        fit_parts.append(train)
        cal_parts.append(cal)
    fit_collection = SMECollection(tuple(fit_parts), collection.ids)
    save_collection(SMECollection(tuple(cal_parts), collection.ids),
                    calib_dir, force=True)

    model = HierarchicalLogistic(
        prior=prior, tau=config.tau, chains=config.chains,
        warmup=config.warmup_iterations, draws=config.sampling_iterations,
        target_accept=config.target_accept_rate,
        max_tree_depth=config.max_tree_depth,
        divergence_energy_threshold=config.divergence_threshold,
        seed=config.seed)
    try:
        model.fit(fit_collection)
    except DiagnosticError as exc:
        print(f"sampling failed: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTIC

    diag = model.diagnostics_
    converged = (diag.max_rhat() < RHAT_GATE and diag.min_ess() > ESS_GATE)
    model.trace_.save(trace_path)
    diag_path.write_text(diag.to_json(model.trace_.param_names),
                         encoding="utf-8")
    _write_json(meta_path, {
        "converged": converged,
        "max_rhat": diag.max_rhat(),
        "min_ess": diag.min_ess(),
        "n_divergent": diag.n_divergent,
        "mean_accept": diag.mean_accept,
        "calibration_dir": str(calib_dir),
        "config": config.echo(),
    })
    print(f"max rhat {diag.max_rhat():.4f}, min ess {diag.min_ess():.0f}, "
          f"{diag.n_divergent} divergences")
    if not converged:
        print("diagnostics failed convergence gates "
              f"(rhat < {RHAT_GATE}, ess > {ESS_GATE:.0f}); "
              "consider target_accept_rate=0.95 or more warmup",
              file=sys.stderr)
        return EXIT_DIAGNOSTIC
    return EXIT_OK


def cmd_calibrate(config: RunConfig, args) -> int:
    out = Path(args.out)
    calib_path = out / "calibration.json"
    _check_force([calib_path], args.force)

    trace = PosteriorTrace.load(_require(out / "trace.bin", "trace artifact"))
    cal_collection = load_collection(
        _require(out / "calibration_data", "calibration rows"))
    recommended, conservative = select_strategy(
        cal_collection.J, [ds.n for ds in cal_collection.smes])
    if recommended == "cross":
        # This stage always scores the rows the fit held out, which is a
        # pooled split calibration; cross-conformal refitting is available
        # in the library for single-entity workflows.
        print("note: scale table recommends cross-conformal; scoring the "
              "held-out calibration rows instead (pooled)", file=sys.stderr)
    per_sme_scores = []
    for j, ds in enumerate(cal_collection.smes):
        X = np.column_stack([ds.features, np.ones(ds.n)])
        mean, _, _ = posterior_predict_matrix(trace, X, j)
        per_sme_scores.append(np.abs(ds.labels.astype(float) - mean))
    result = calibrate_pooled(per_sme_scores, config.miscoverage_alpha)
    if args.inflation is not None:
        result = conservative_adjust(result, args.inflation)
    elif args.strategy == "auto" and conservative:
        result = conservative_adjust(result, 0.2)
    result.save(calib_path)
    print(f"q_hat {result.q_hat:.4f} from {result.n_cal} scores "
          f"({result.strategy})")
    return EXIT_OK


def _load_prediction_rows(path: Path, feature_names, tag_column: str):
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path} is empty")
        missing = [name for name in feature_names if name not in header]
        if missing:
            raise DataError(f"{path} lacks feature columns {missing}")
        idx = [header.index(name) for name in feature_names]
        tag_idx = header.index(tag_column) if tag_column in header else None
        features, tags = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                features.append([float(row[i]) for i in idx])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            tags.append(row[tag_idx] if tag_idx is not None else None)
    return np.asarray(features, dtype=np.float64), tags


def cmd_predict(config: RunConfig, args) -> int:
    out = Path(args.out)
    pred_path = out / "predictions.csv"
    _check_force([pred_path], args.force)

    trace = PosteriorTrace.load(_require(out / "trace.bin", "trace artifact"))
    calibration = CalibrationResult.load(
        _require(out / "calibration.json", "calibration artifact"))
    collection = load_collection(_require(out / "smes", "entity collection"))
    if args.customers is None:
        raise ConfigError("predict requires --customers CSV")
    X, tags = _load_prediction_rows(Path(args.customers),
                                    collection.feature_names,
                                    config.tag_column)
    ids = list(collection.ids)

    rows = []
    for i in range(X.shape[0]):
        sme = tags[i] if tags[i] else args.sme
        if sme is None:
            raise ConfigError(
                "customer rows need a tag column or --sme override")
        if sme not in ids:
            raise DataError(f"unknown entity id {sme!r}")
        j = ids.index(sme)
        x = np.append(X[i], 1.0)
        mean, lo, hi = posterior_predict_matrix(trace, x[None, :], j)
        pset = predict_set(float(mean[0]), calibration.q_hat)
        rows.append({
            "sme": sme,
            "probability": float(mean[0]),
            "prediction": int(mean[0] >= 0.5),
            "ci_lower": float(lo[0]),
            "ci_upper": float(hi[0]),
            "conformal_set": str(pset),
            "uncertainty": _UNCERTAINTY_WORD[pset.size],
            "action": _ACTION_TIER[pset.labels],
        })
    with pred_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} predictions to {pred_path}")
    return EXIT_OK


def cmd_evaluate(config: RunConfig, args) -> int:
    out = Path(args.out)
    report_path = out / "report.json"
    rows_path = out / "evaluations.csv"
    _check_force([report_path, rows_path], args.force)

    collection = load_collection(_require(out / "smes", "entity collection"))
    if args.weak_prior or not (out / "prior.json").exists():
        if not args.weak_prior:
            print("note: no prior.json found; evaluating with a "
                  "standard-normal prior", file=sys.stderr)
        prior = PriorSpec(collection.feature_names, np.zeros(collection.p),
                          np.ones(collection.p), 0.0,
                          {"fallback": True, "tags": [],
                           "note": "weak prior for evaluation"})
    else:
        prior = PriorSpec.load(out / "prior.json")
    experiment = ExperimentConfig(
        folds=config.folds, l2_c=config.l2_c, alpha=config.miscoverage_alpha,
        tau=config.tau, chains=config.chains, warmup=config.warmup_iterations,
        draws=config.sampling_iterations,
        target_accept=config.target_accept_rate,
        max_tree_depth=config.max_tree_depth, protocol=args.protocol)
    report = run_experiment(collection, prior, experiment, config.seed)
    report.save(report_path)
    report.rows_to_csv(rows_path)
    hier = report.aggregates.get("hierarchical", {})
    print(f"hierarchical AUC {hier.get('auc_mean', float('nan')):.4f} over "
          f"{report.n_evaluations} evaluations; report at {report_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="churnpool",
        description="hierarchical Bayesian churn pipeline with conformal sets")
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument("--out", default="artifacts",
                        help="artifact directory (default: artifacts)")
    parser.add_argument("--force", action="store_true",
                        help="overwrite existing artifacts")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate an entity collection")
    gen.add_argument("--mode", choices=("simulate", "resample"),
                     default="simulate")
    gen.add_argument("--source", help="source CSV for resample mode")
    gen.add_argument("--stats", help="standardization stats JSON to apply")
    gen.add_argument("--smes", type=int, help="number of entities")
    gen.add_argument("--n-per", type=int, help="rows per entity")
    gen.add_argument("--features", type=int, help="simulated feature count")
    gen.add_argument("--sigma-true", type=float,
                     help="between-entity coefficient scale")
    gen.add_argument("--mu-scale", type=float,
                     help="population coefficient scale")

    pre = sub.add_parser("pretrain", help="fit the boosted-tree base model")
    pre.add_argument("--source", help="harmonized training CSV")

    ext = sub.add_parser("extract-priors",
                         help="attribution-based prior extraction")
    ext.add_argument("--prior-draws", type=int, default=200,
                     help="draws for the prior-only AUC check")
    ext.add_argument("--lambda", dest="lambda_scale", type=float,
                     help="override prior_scaling_lambda")

    fit = sub.add_parser("fit", help="hierarchical Bayesian fit")
    fit.add_argument("--chains", type=int, help="override chain count")
    fit.add_argument("--warmup", type=int, help="override warmup iterations")
    fit.add_argument("--draws", type=int, help="override sampling iterations")
    fit.add_argument("--weak-prior", action="store_true",
                     help="use a standard-normal prior instead of prior.json")

    cal = sub.add_parser("calibrate", help="conformal calibration")
    cal.add_argument("--alpha", type=float, help="override miscoverage rate")
    cal.add_argument("--strategy", choices=("auto", "pooled"), default="auto",
                     help="'pooled' suppresses the automatic conservative "
                          "wrapper for small samples")
    cal.add_argument("--inflation", type=float,
                     help="force a conservative inflation factor")

    prd = sub.add_parser("predict", help="per-customer prediction rows")
    prd.add_argument("--customers", help="CSV of customers to score")
    prd.add_argument("--sme", help="entity id when rows carry no tag")

    ev = sub.add_parser("evaluate", help="cross-validated comparison")
    ev.add_argument("--protocol", choices=("fit-once", "refit"),
                     default="fit-once")
    ev.add_argument("--weak-prior", action="store_true")
    return parser


_OVERRIDE_KEYS = {
    "seed": "seed", "smes": "smes", "n_per": "n_per", "features": "features",
    "sigma_true": "sigma_true", "mu_scale": "mu_scale", "chains": "chains",
    "warmup": "warmup_iterations", "draws": "sampling_iterations",
    "alpha": "miscoverage_alpha", "lambda_scale": "prior_scaling_lambda",
}

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "extract-priors": cmd_extract_priors,
    "fit": cmd_fit,
    "calibrate": cmd_calibrate,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    overrides = {config_key: getattr(args, arg_key)
                 for arg_key, config_key in _OVERRIDE_KEYS.items()
                 if hasattr(args, arg_key)}
    try:
        config = RunConfig.load(args.config, overrides)
        if args.command == "fit" and config.chains < 2:
            raise ConfigError("fit needs at least 2 chains for rhat")
    except (ConfigError, ValidationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DiagnosticError as exc:
        print(f"diagnostic failure: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTIC
    except (DataError, ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``marsest <command> ...``.

Every option has a flat dotted key (``roles.label``, ``split.fraction``). A
``--config`` JSON document supplies values for those keys and command-line
flags override it. Each run that writes an output file also writes the
resolved configuration next to it (``<output>.config.json``); running the
same command with ``--config`` pointing at that file reproduces the outputs
bit for bit.

Errors are printed to stderr as JSON and mapped to exit codes: 2 config,
3 data validation, 4 numerical, 5 estimator.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import aggregate, design, eif, impute, simulate, split
from .errors import ConfigError, DataValidationError, EstimatorError, MarsError
from .frame import DEFAULT_ETA, Role, RoleBinding, Table, bind_roles, load_binding, load_csv
from .mels import MeRegressionProblem, log_diff_propagate, mels_fit

ROLE_FLAGS = {
    "label": Role.LABEL,
    "annotated": Role.ANNOTATED,
    "pi": Role.SCORE,
    "pred": Role.PREDICTION,
    "feature": Role.FEATURE,
    "context": Role.CONTEXT,
    "control": Role.CONTROL,
    "outcome": Role.OUTCOME,
    "instrument": Role.INSTRUMENT,
    "cohort": Role.COHORT,
    "never-treated": Role.NEVER_TREATED,
    "running": Role.RUNNING,
    "treated": Role.TREATED,
    "cluster": Role.CLUSTER,
    "group": Role.GROUP,
    "period": Role.PERIOD,
    "weight": Role.WEIGHT,
}
CONSTANT_SCORE_COLUMN = "__score__"

DEFAULTS: dict[str, Any] = {
    "alpha": 0.05,
    "split.fraction": 0.5,
    "imputer.k": 5,
    "imputer.ridge": 0.0,
    "imputer.use_context": False,
    "cluster": False,
    "strict": False,
    "threads": 1,
    "design.floor": 1e-3,
    "mels.center": True,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route usage errors through the JSON error path
        raise ConfigError(message, module="cli", rule="usage")


def _opt(p, flag, key, **kw):
    p.add_argument(flag, dest=key, default=argparse.SUPPRESS, **kw)


def _common(p):
    _opt(p, "--config", "_config", help="JSON file of dotted keys; flags override it")
    _opt(p, "--output", "output", help="output file (stdout when omitted)")


def _data_options(p):
    _opt(p, "--input", "input", help="input CSV")
    _opt(p, "--binding", "binding", help="JSON role binding file")
    for flag, role in ROLE_FLAGS.items():
        if role in (Role.FEATURE, Role.CONTEXT, Role.CONTROL):
            _opt(p, f"--{flag}-col", f"roles.{role.value}", action="append", help=f"column for role {role.value} (repeatable)")
        else:
            _opt(p, f"--{flag}-col", f"roles.{role.value}", help=f"column for role {role.value}")
    _opt(p, "--pi", "score.constant", type=float, help="constant annotation score for every row")
    _opt(p, "--eta", "eta", type=float, help="overlap floor for scores")
    _opt(p, "--strict", "strict", action="store_true", help="reject labels on unannotated rows")
    _opt(p, "--imputer", "imputer.kind", choices=impute.KINDS)
    _opt(p, "--k", "imputer.k", type=int, help="neighbours for the k-NN imputer")
    _opt(p, "--ridge", "imputer.ridge", type=float)
    _opt(p, "--use-context", "imputer.use_context", action="store_true")
    _opt(p, "--split-fraction", "split.fraction", type=float, help="share of rows in the estimation part")
    _opt(p, "--crossfit", "split.crossfit", type=int, help="number of cross-fitting folds")
    _opt(p, "--seed", "seed", type=int, help="seed for all randomness")
    _opt(p, "--alpha", "alpha", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="marsest", description="Debiased estimation with imputed structured labels.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    est = sub.add_parser("estimate", help="estimate a mean, regression, IV, DiD or RDD target")
    est.add_argument("estimator", choices=("mean", "ols", "iv", "did", "rdd"))
    _common(est)
    _data_options(est)
    _opt(est, "--target-col", "ols.target", help="regressor whose coefficient is reported (ols)")
    _opt(est, "--window", "rdd.window", help="closed window lo,hi around the cutoff (rdd)")
    _opt(est, "--cluster", "cluster", action="store_true", help="cluster-robust variance by the cluster role")
    _opt(est, "--phi-output", "phi_output", help="write per-row influence values to this CSV")

    idx = sub.add_parser("index", help="per-period scaled means (index construction)")
    _common(idx)
    _data_options(idx)
    _opt(idx, "--constants", "index.constants", help="CSV with columns group,c")
    _opt(idx, "--log-diff", "index.log_diff", action="store_true", help="also write log differences")
    _opt(idx, "--log-diff-output", "index.log_diff_output")

    me = sub.add_parser("mels", help="measurement-error-corrected least squares")
    _common(me)
    _opt(me, "--input", "input")
    _opt(me, "--outcome-col", "mels.outcome")
    _opt(me, "--regressor-col", "mels.regressors", action="append")
    _opt(me, "--sigma-col", "mels.sigma", action="append", help="error variance column (or number) per regressor")
    _opt(me, "--cluster-col", "mels.cluster")
    _opt(me, "--index", "mels.index", help="index CSV joined as an extra regressor with variance se^2")
    _opt(me, "--key-col", "mels.key", help="column of --input matching the index group")
    _opt(me, "--no-center", "mels.center", action="store_false")
    _opt(me, "--alpha", "alpha", type=float)

    des = sub.add_parser("design", help="annotation design utilities")
    des.add_argument("task", choices=("scores", "ess", "bound", "labels"))
    des.add_argument("strata", nargs="?", help="strata CSV (stratum,size,err) for 'scores'")
    _common(des)
    _opt(des, "--budget", "design.budget", type=float)
    _opt(des, "--floor", "design.floor", type=float)
    _opt(des, "--labeled", "design.labeled", type=float)
    _opt(des, "--unlabeled", "design.unlabeled", type=float)
    _opt(des, "--rho", "design.rho", type=float)
    _opt(des, "--var-m", "design.var_m", type=float)
    _opt(des, "--pi", "design.pi", type=float)
    _opt(des, "--r2", "design.r2", type=float)
    _opt(des, "--width", "design.width", type=float)
    _opt(des, "--total", "design.total", type=int)
    _opt(des, "--alpha", "alpha", type=float)

    sim = sub.add_parser("simulate", help="run a Monte Carlo preset")
    _common(sim)
    _opt(sim, "--preset", "simulate.preset", help="preset name (see --list)")
    _opt(sim, "--list", "simulate.list", action="store_true")
    _opt(sim, "--seed", "seed", type=int)
    _opt(sim, "--threads", "threads", type=int)
    _opt(sim, "--reps", "simulate.reps", type=int)
    _opt(sim, "--records-output", "simulate.records_output", help="per-replication CSV")
    return parser


# ---------------------------------------------------------------- config handling


def resolve(argv: Sequence[str]) -> dict[str, Any]:
    """Parse flags, merge them over a config file and the defaults."""
    parser = build_parser()
    parsed, extra = parser.parse_known_args(list(argv))
    # a trailing strata path after options is not picked up by the positional
    if extra and getattr(parsed, "strata", "absent") is None and len(extra) == 1 and not extra[0].startswith("-"):
        parsed.strata = extra.pop()
    if extra:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    ns = vars(parsed)
    cfg: dict[str, Any] = dict(DEFAULTS)
    path = ns.pop("_config", None)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", module="cli", rule="config") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object", module="cli", rule="config")
        for key in ("command", "estimator", "task"):
            if key in doc and key in ns and doc[key] != ns[key]:
                raise ConfigError(
                    f"config was written for {key}={doc[key]!r}, not {ns[key]!r}", module="cli", rule="config"
                )
        cfg.update(doc)
    cfg.update({k: v for k, v in ns.items() if v is not None or k not in cfg})
    return cfg


def _write_config(cfg: dict[str, Any]) -> None:
    out = cfg.get("output")
    if not out:
        return
    resolved = {k: v for k, v in cfg.items() if k != "output"}
    Path(str(out) + ".config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _emit_json(cfg: dict[str, Any], doc: dict[str, Any]) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"
    if cfg.get("output"):
        Path(cfg["output"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _need(cfg, key, what=None):
    if cfg.get(key) is None:
        raise ConfigError(f"missing required option {what or key}", module="cli", rule="missing-option", key=key)
    return cfg[key]


# ---------------------------------------------------------------- data pipeline


def _load_dataset(cfg: dict[str, Any]):
    table = load_csv(_need(cfg, "input", "--input"))
    roles: dict[str, Any] = {}
    eta = DEFAULT_ETA
    if cfg.get("binding"):
        binding, eta = load_binding(cfg["binding"])
        roles.update(binding.to_dict())
    if cfg.get("eta") is None:
        cfg["eta"] = eta
    for key, value in cfg.items():
        if key.startswith("roles.") and value:
            roles[key[len("roles."):]] = value
    if cfg.get("score.constant") is not None:
        if Role.SCORE.value in roles:
            raise ConfigError("give either --pi or --pi-col, not both", module="cli", rule="score")
        columns = dict(table.columns)
        columns[CONSTANT_SCORE_COLUMN] = np.full(table.n_rows, float(cfg["score.constant"]))
        table = Table.from_columns(columns)
        roles[Role.SCORE.value] = CONSTANT_SCORE_COLUMN
    return bind_roles(table, RoleBinding.from_dict(roles), float(cfg["eta"]), strict=bool(cfg["strict"]))


def _predictions(cfg: dict[str, Any], ds) -> tuple[np.ndarray, np.ndarray | None, dict[str, Any]]:
    """Predictions for every row (NaN outside the estimation part) and the estimation rows."""
    kind = cfg.get("imputer.kind")
    if kind is None:
        kind = "fixed-column" if ds.has(Role.PREDICTION) else "constant-mean"
        cfg["imputer.kind"] = kind
    spec = impute.ImputerSpec(kind, int(cfg["imputer.k"]), float(cfg["imputer.ridge"]), bool(cfg["imputer.use_context"]))
    if kind == "fixed-column":
        fitted = impute.fit(spec, ds, None)
        return impute.predict(fitted, ds), None, {"imputer": kind}
    seed = cfg.get("seed")
    if seed is None:
        raise ConfigError(
            f"--seed is required: the {kind} imputer needs a random sample split", module="cli", rule="missing-seed"
        )
    pred = np.full(ds.n, np.nan)
    info: dict[str, Any] = {"imputer": kind, "seed": int(seed)}
    if cfg.get("split.crossfit"):
        plan = split.make_crossfit(ds, int(cfg["split.crossfit"]), int(seed))
        audits = []
        for i, fold in enumerate(plan.folds):
            fitted = impute.fit(spec, ds, plan.complement(i))
            audit = impute.leakage_audit(fitted, fold)
            if not audit.passed:
                raise EstimatorError("leakage audit failed", module="impute", rule="leakage", **audit.to_dict())
            pred[fold] = impute.predict(fitted, ds, fold)
            audits.append(audit.to_dict())
        info.update(crossfit=plan.k, audits=audits)
        return pred, None, info
    plan = split.make_split(ds, float(cfg["split.fraction"]), int(seed))
    fitted = impute.fit(spec, ds, plan.tuning)
    audit = impute.leakage_audit(fitted, plan.estimation)
    if not audit.passed:
        raise EstimatorError("leakage audit failed", module="impute", rule="leakage", **audit.to_dict())
    pred[plan.estimation] = impute.predict(fitted, ds, plan.estimation)
    info.update(split_fraction=float(cfg["split.fraction"]), n_estimation=int(plan.estimation.size), audit=audit.to_dict())
    return pred, plan.estimation, info


def _window(value) -> tuple[float, float]:
    if isinstance(value, (list, tuple)):
        lo, hi = value
    else:
        try:
            lo, hi = (float(v) for v in str(value).split(","))
        except ValueError:
            raise ConfigError("--window takes lo,hi", module="cli", rule="window") from None
    return float(lo), float(hi)


def cmd_estimate(cfg: dict[str, Any]) -> None:
    ds = _load_dataset(cfg)
    pred, rows, info = _predictions(cfg, ds)
    kind, cluster = cfg["estimator"], bool(cfg["cluster"])
    if kind == "mean":
        est = eif.aipw_mean(ds, pred, rows, cluster=cluster)
    elif kind == "ols":
        est = eif.ols_coefficient(ds, pred, _need(cfg, "ols.target", "--target-col"), None, rows, cluster=cluster)
    elif kind == "iv":
        est = eif.iv_effect(ds, pred, None, rows, cluster=cluster)
    elif kind == "did":
        est = eif.did_attgt(ds, pred, rows, cluster=cluster)
    else:
        est = eif.rdd_local(ds, pred, _window(_need(cfg, "rdd.window", "--window")), rows, cluster=cluster)
    doc = est.to_dict(float(cfg["alpha"]))
    doc["pipeline"] = info
    _emit_json(cfg, doc)
    if cfg.get("phi_output"):
        eif.write_phi_csv(est, cfg["phi_output"])
    _write_config(cfg)


def _read_constants(path: str) -> dict[str, float]:
    out: dict[str, float] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not {"group", "c"} <= set(reader.fieldnames or ()):
            raise DataValidationError("constants file needs columns group,c", module="cli", rule="constants-format")
        for row in reader:
            try:
                out[row["group"]] = float(row["c"])
            except ValueError:
                raise DataValidationError(
                    f"cannot parse constant {row['c']!r}", module="cli", rule="constants-format"
                ) from None
    return out


def cmd_index(cfg: dict[str, Any]) -> None:
    ds = _load_dataset(cfg)
    pred, rows, _ = _predictions(cfg, ds)
    scale = None
    if cfg.get("index.constants"):
        constants = _read_constants(cfg["index.constants"])
        role = Role.PERIOD if ds.has(Role.PERIOD) else Role.GROUP
        ds.require(role, estimator="index")
        keys = np.unique(np.asarray(ds.table[ds.binding.get(role)]))
        scale = {k.item(): constants.get(str(k.item()), 1.0) for k in keys}
    series = aggregate.group_series(ds, pred, rows, scale)
    out = _need(cfg, "output", "--output")
    aggregate.write_index_csv(series, out, float(cfg["alpha"]))
    if cfg.get("index.log_diff"):
        diffs = log_diff_propagate([(e.theta, e.se**2) for _, e in series])
        target = cfg.get("index.log_diff_output") or str(Path(out).with_suffix("")) + ".logdiff.csv"
        with Path(target).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", "dlog", "var", "se"])
            for (key, _), (d, v) in zip(series[1:], diffs):
                w.writerow([key, repr(d), repr(v), repr(math.sqrt(v))])
    _write_config(cfg)


def _numeric(table: Table, name: str) -> np.ndarray:
    if name not in table:
        raise ConfigError(f"no column {name!r}", module="cli", rule="missing-column", column=name)
    try:
        return np.asarray(table[name], dtype=np.float64)
    except (TypeError, ValueError):
        raise DataValidationError(f"column {name!r} is not numeric", module="cli", rule="non-numeric") from None


def cmd_mels(cfg: dict[str, Any]) -> None:
    table = load_csv(_need(cfg, "input", "--input"))
    y = _numeric(table, _need(cfg, "mels.outcome", "--outcome-col"))
    names = list(cfg.get("mels.regressors") or [])
    sig_specs = list(cfg.get("mels.sigma") or [])
    if len(sig_specs) not in (0, len(names)):
        raise ConfigError("give one --sigma-col per --regressor-col", module="cli", rule="sigma")
    cols, sigmas = [], []
    for j, name in enumerate(names):
        cols.append(_numeric(table, name))
        spec = sig_specs[j] if sig_specs else "0"
        try:
            sigmas.append(np.full(table.n_rows, float(spec)))
        except ValueError:
            sigmas.append(_numeric(table, spec))
    if cfg.get("mels.index"):
        key_col = _need(cfg, "mels.key", "--key-col")
        index = {row["group"]: row for row in aggregate.read_index_csv(cfg["mels.index"])}
        keys = [str(k) for k in table[key_col]]
        missing = sorted({k for k in keys if k not in index})
        if missing:
            raise DataValidationError(f"keys without an index row: {missing[:5]}", module="cli", rule="index-join")
        cols.append(np.array([index[k]["theta"] for k in keys]))
        sigmas.append(np.array([index[k]["se"] ** 2 for k in keys]))
        names.append("index")
    if not cols:
        raise ConfigError("no regressors given", module="cli", rule="missing-option")
    clusters = np.asarray(table[cfg["mels.cluster"]]) if cfg.get("mels.cluster") else None
    problem = MeRegressionProblem(
        y, np.column_stack(cols), np.column_stack(sigmas), clusters, tuple(names), bool(cfg["mels.center"])
    )
    _emit_json(cfg, mels_fit(problem).to_dict(float(cfg["alpha"])))
    _write_config(cfg)


def cmd_design(cfg: dict[str, Any]) -> None:
    task = cfg["task"]
    if task == "scores":
        sizes, err = design.read_strata_csv(_need(cfg, "strata", "strata CSV"))
        d = design.DesignInput(sizes, err, _need(cfg, "design.budget", "--budget"), float(cfg["design.floor"]))
        scores = design.feasible_scores(d)
        if cfg.get("output"):
            design.write_scores_csv(d, scores, cfg["output"])
        else:
            _emit_json(cfg, {"scores": scores})
    elif task == "ess":
        n0 = design.effective_sample_size(
            _need(cfg, "design.labeled", "--labeled"),
            _need(cfg, "design.unlabeled", "--unlabeled"),
            _need(cfg, "design.rho", "--rho"),
        )
        _emit_json(cfg, {"effective_sample_size": n0})
    elif task == "bound":
        v = design.variance_bound(
            _need(cfg, "design.var_m", "--var-m"), _need(cfg, "design.pi", "--pi"), _need(cfg, "design.r2", "--r2")
        )
        _emit_json(cfg, {"variance_bound": v})
    else:
        n = design.labels_for_width(
            _need(cfg, "design.width", "--width"),
            float(cfg["alpha"]),
            _need(cfg, "design.var_m", "--var-m"),
            _need(cfg, "design.r2", "--r2"),
            _need(cfg, "design.total", "--total"),
        )
        _emit_json(cfg, {"labels": n, "feasible": n is not None})
    _write_config(cfg)


def cmd_simulate(cfg: dict[str, Any]) -> None:
    if cfg.get("simulate.list"):
        sys.stdout.write("\n".join(sorted(simulate.PRESETS)) + "\n")
        return
    name = _need(cfg, "simulate.preset", "--preset")
    seed = cfg.get("seed")
    if seed is None:
        raise ConfigError("--seed is required for simulation", module="cli", rule="missing-seed")
    report = simulate.run_preset(name, int(seed), threads=int(cfg["threads"]), reps=cfg.get("simulate.reps"))
    doc = report.to_dict()
    doc["preset"] = name
    _emit_json(cfg, doc)
    if cfg.get("simulate.records_output"):
        report.save_csv(cfg["simulate.records_output"])
    _write_config(cfg)


COMMANDS = {
    "estimate": cmd_estimate,
    "index": cmd_index,
    "mels": cmd_mels,
    "design": cmd_design,
    "simulate": cmd_simulate,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = resolve(argv)
        COMMANDS[cfg["command"]](cfg)
    except MarsError as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), sort_keys=True) + "\n")
        return exc.exit_code
    except OSError as exc:
        err = ConfigError(f"{exc.strerror or exc}: {exc.filename}", module="cli", rule="io")
        sys.stderr.write(json.dumps(err.to_dict(), sort_keys=True) + "\n")
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

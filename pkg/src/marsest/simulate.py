"""Data-generating processes and a Monte Carlo harness.

Imputer quality is set analytically: the oracle conditional mean
``mu(S) = theta + sigma*sqrt(r2)*S`` explains a share ``r2`` of the label
variance, and the imputer adds a constant bias ``b`` (and optionally
independent noise). Annotation is Bernoulli with a known score, drawn
independently of the label given the covariates.

Replication ``r`` is seeded by ``SeedSequence(master, spawn_key=(r,))`` so a
report depends only on the master seed, never on scheduling.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import eif
from .aggregate import AggregationSpec, linear_agg_mean
from .errors import ConfigError, EstimatorError, MarsError
from .frame import RoleBinding, RoleBoundDataset, Table, bind_roles
from .mels import MeRegressionProblem, mels_fit

KINDS = ("mean", "regression", "iv", "did", "rdd", "aggregate", "me-regression")


@dataclass(frozen=True)
class DgpSpec:
    """Knobs for one reference design.

    ``n`` counts estimation rows (groups for ``aggregate``). ``full_factor``
    enlarges the generated sample for designs whose marginal shares are
    treated as known; estimation then uses a random subset of ``n`` rows.
    """

    kind: str = "mean"
    n: int = 2000
    theta: float = 1.0
    r2: float = 0.5
    bias: float = 0.0
    pi: float = 0.3
    pi_strata: tuple[float, float] | None = None
    sigma: float = 1.0
    pred_noise: float = 0.0
    full_factor: int = 1
    group_size: float = 5.0
    sigma_eta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown DGP kind {self.kind!r}", module="simulate", rule="kind")
        if not 0.0 <= self.r2 <= 1.0:
            raise ConfigError("r2 must lie in [0, 1]", module="simulate", rule="r2")
        pis = self.pi_strata or (self.pi,)
        if not all(0.0 < p <= 1.0 for p in pis):
            raise ConfigError("annotation scores must lie in (0, 1]", module="simulate", rule="pi")
        if self.n < 10 or self.full_factor < 1:
            raise ConfigError("need n >= 10 and full_factor >= 1", module="simulate", rule="n")
        if self.sigma <= 0 or self.pred_noise < 0 or self.sigma_eta < 0:
            raise ConfigError("scale knobs must be nonnegative", module="simulate", rule="scale")
        if self.kind == "aggregate" and self.group_size < 1:
            raise ConfigError("mean group size must be >= 1", module="simulate", rule="group-size")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["pi_strata"] = list(self.pi_strata) if self.pi_strata else None
        return d

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "DgpSpec":
        doc = dict(doc)
        if doc.get("pi_strata") is not None:
            doc["pi_strata"] = tuple(doc["pi_strata"])
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown DGP fields {sorted(unknown)}", module="simulate", rule="fields")
        return cls(**doc)


@dataclass(frozen=True)
class Draw:
    """One simulated dataset with its truth and the imputer's predictions."""

    data: RoleBoundDataset | MeRegressionProblem
    truth: float
    predictions: np.ndarray | None = None
    indices: np.ndarray | None = None
    oracle: np.ndarray | None = None
    extras: dict[str, Any] = field(default_factory=dict)


def _rng(seed: int, r: int | None = None) -> np.random.Generator:
    ss = np.random.SeedSequence(seed) if r is None else np.random.SeedSequence(seed, spawn_key=(r,))
    return np.random.default_rng(ss)


def _signal(spec: DgpSpec, rng, n):
    s = rng.standard_normal(n)
    e = rng.standard_normal(n)
    sr, nr = math.sqrt(spec.r2), math.sqrt(1.0 - spec.r2)
    return s, e, spec.sigma * sr * s, spec.sigma * (sr * s + nr * e)


def _imputer(spec: DgpSpec, rng, mu):
    pred = mu + spec.bias
    if spec.pred_noise > 0:
        pred = pred + spec.pred_noise * rng.standard_normal(mu.size)
    return pred


def _annotate(rng, score):
    return rng.random(score.size) < score


def _dataset(cols: dict[str, np.ndarray], roles: dict[str, Any]) -> RoleBoundDataset:
    return bind_roles(Table.from_columns(cols), RoleBinding.from_dict(roles), 1e-6)


def _base(m, a, score, pred, s):
    cols = {"m": np.where(a, m, np.nan), "a": a.astype(np.int64), "pi": score, "pred": pred, "s": s}
    roles = {"label": "m", "annotated": "a", "score": "pi", "prediction": "pred", "feature": ("s",)}
    return cols, roles


def _subset(spec: DgpSpec, rng, n_full):
    if n_full == spec.n:
        return None
    return np.sort(rng.choice(n_full, spec.n, replace=False))


def _gen_mean(spec: DgpSpec, rng) -> Draw:
    n = spec.n
    x = rng.integers(0, 2, n) if spec.pi_strata else np.zeros(n, dtype=np.int64)
    s, _, mu_part, noise = _signal(spec, rng, n)
    # under stratified scores the label level depends on the stratum, so complete cases are biased
    shift = 0.5 * (x - 0.5) if spec.pi_strata else 0.0
    m = spec.theta + shift + noise
    mu = spec.theta + shift + mu_part
    pred = _imputer(spec, rng, mu)
    score = np.where(x == 1, spec.pi_strata[1], spec.pi_strata[0]) if spec.pi_strata else np.full(n, spec.pi)
    a = _annotate(rng, score)
    cols, roles = _base(m, a, score, pred, s)
    cols["x"] = x.astype(np.float64)
    roles["context"] = ("x",)
    return Draw(_dataset(cols, roles), spec.theta, pred, None, mu, {"labels": m})


def _gen_regression(spec: DgpSpec, rng) -> Draw:
    n = spec.n
    x = rng.standard_normal(n)
    v = rng.standard_normal(n)
    c = x + v
    s, _, mu_part, noise = _signal(spec, rng, n)
    # the label depends on c only through its part orthogonal to the control
    m = spec.theta * v + noise
    mu = spec.theta * v + mu_part
    pred = _imputer(spec, rng, mu)
    score = np.full(n, spec.pi)
    a = _annotate(rng, score)
    cols, roles = _base(m, a, score, pred, s)
    cols.update(c=c, x=x)
    roles["feature"] = ("s", "c")
    roles["control"] = ("x",)
    return Draw(_dataset(cols, roles), spec.theta, pred, None, mu)


def _gen_iv(spec: DgpSpec, rng) -> Draw:
    n = spec.n
    z = rng.standard_normal(n)
    s, e, mu_part, noise = _signal(spec, rng, n)
    m = 0.5 + 0.8 * z + noise
    mu = 0.5 + 0.8 * z + mu_part
    # outcome error shares the label's unexplained shock, making the label endogenous
    y = spec.theta * m + 0.5 * e + rng.standard_normal(n)
    pred = _imputer(spec, rng, mu)
    score = np.full(n, spec.pi)
    a = _annotate(rng, score)
    cols, roles = _base(m, a, score, pred, s)
    cols.update(y=y, z=z)
    roles.update(outcome="y", instrument="z")
    return Draw(_dataset(cols, roles), spec.theta, pred, None, mu)


def _gen_did(spec: DgpSpec, rng) -> Draw:
    n = spec.n * spec.full_factor
    u = rng.random(n)
    g = (u < 0.4).astype(np.float64)
    never = (u >= 0.6).astype(np.float64)  # the rest are not-yet-treated units
    s, _, mu_part, noise = _signal(spec, rng, n)
    level = 0.2 + spec.theta * g
    m = level + noise  # first-differenced label
    mu = level + mu_part
    pred = _imputer(spec, rng, mu)
    root = math.sqrt(spec.pi)
    a = _annotate(rng, np.full(n, root)) & _annotate(rng, np.full(n, root))
    cols, roles = _base(m, a, np.full(n, spec.pi), pred, s)
    cols.update(g=g, never=never)
    roles.update(cohort="g", never_treated="never")
    return Draw(_dataset(cols, roles), spec.theta, pred, _subset(spec, rng, n), mu)


RDD_WINDOW = (-0.5, 0.5)


def _gen_rdd(spec: DgpSpec, rng) -> Draw:
    n = spec.n * spec.full_factor
    r = rng.uniform(-1.0, 1.0, n)
    d = (r >= 0).astype(np.float64)
    s, _, mu_part, noise = _signal(spec, rng, n)
    # flat inside the window; the slope outside it is irrelevant to the local contrast
    level = 0.5 + spec.theta * d + 0.8 * np.where(np.abs(r) > 0.5, r, 0.0)
    m = level + noise
    mu = level + mu_part
    pred = _imputer(spec, rng, mu)
    score = np.full(n, spec.pi)
    a = _annotate(rng, score)
    cols, roles = _base(m, a, score, pred, s)
    cols.update(r=r, d=d)
    roles.update(running="r", treated="d")
    return Draw(_dataset(cols, roles), spec.theta, pred, _subset(spec, rng, n), mu, {"window": RDD_WINDOW})


def _gen_aggregate(spec: DgpSpec, rng) -> Draw:
    sizes = 1 + rng.poisson(spec.group_size - 1.0, spec.n)
    groups = np.repeat(np.arange(spec.n), sizes)
    n = groups.size
    s, _, mu_part, noise = _signal(spec, rng, n)
    m = spec.theta + noise
    mu = spec.theta + mu_part
    pred = _imputer(spec, rng, mu)
    score = np.full(n, spec.pi)
    a = _annotate(rng, score)
    a[0] = True
    cols, roles = _base(m, a, score, pred, s)
    cols["grp"] = groups
    roles["group"] = "grp"
    return Draw(_dataset(cols, roles), spec.group_size * spec.theta, pred, None, mu, {"sizes": sizes, "labels": m})


def _gen_me(spec: DgpSpec, rng) -> Draw:
    n = spec.n
    xs = rng.standard_normal(n)
    x = xs + spec.sigma_eta * rng.standard_normal(n)
    y = spec.theta * xs + spec.sigma * rng.standard_normal(n)
    return Draw(MeRegressionProblem(y, x, [spec.sigma_eta**2]), spec.theta)


_GENERATORS: dict[str, Callable[[DgpSpec, np.random.Generator], Draw]] = {
    "mean": _gen_mean,
    "regression": _gen_regression,
    "iv": _gen_iv,
    "did": _gen_did,
    "rdd": _gen_rdd,
    "aggregate": _gen_aggregate,
    "me-regression": _gen_me,
}


def generate(spec: DgpSpec, rng: np.random.Generator | None = None) -> Draw:
    """Simulate one dataset; deterministic given ``spec.seed`` (or ``rng``)."""
    return _GENERATORS[spec.kind](spec, rng if rng is not None else _rng(spec.seed))


# ---------------------------------------------------------------- estimators run on a draw


def _est_mean(d: Draw):
    return eif.aipw_mean(d.data, d.predictions, d.indices)


def _est_naive(d: Draw):
    # plug-in mean of the imputations, no bias correction
    pred = d.predictions if d.indices is None else d.predictions[d.indices]
    return eif.constant_mean_estimate(pred, "naive")


def _est_sample_mean(d: Draw):
    ds = d.data
    return eif.constant_mean_estimate(ds.label[ds.annotated], "complete_case")


def _est_ols(d: Draw):
    return eif.ols_coefficient(d.data, d.predictions, "c", ["x"], d.indices)


def _est_iv(d: Draw):
    return eif.iv_effect(d.data, d.predictions, [], d.indices)


def _est_did(d: Draw):
    return eif.did_attgt(d.data, d.predictions, d.indices)


def _est_rdd(d: Draw):
    return eif.rdd_local(d.data, d.predictions, d.extras.get("window", RDD_WINDOW), d.indices)


def _est_aggregate(d: Draw):
    return linear_agg_mean(d.data, d.predictions, AggregationSpec("sum")).combined


def _est_mels(d: Draw):
    fit = mels_fit(d.data)
    return float(fit.beta[0]), float(fit.se[0])


def _est_mels_naive(d: Draw):
    p = d.data
    fit = mels_fit(replace(p, sigma=np.zeros_like(p.sigma)))
    return float(fit.beta[0]), float(fit.se[0])


ESTIMATORS: dict[str, tuple[Callable[[Draw], Any], tuple[str, ...]]] = {
    "mean": (_est_mean, ("mean",)),
    "naive": (_est_naive, ("mean", "did", "rdd", "regression", "iv", "aggregate")),
    "complete-case": (_est_sample_mean, ("mean",)),
    "ols": (_est_ols, ("regression",)),
    "iv": (_est_iv, ("iv",)),
    "did": (_est_did, ("did",)),
    "rdd": (_est_rdd, ("rdd",)),
    "aggregate": (_est_aggregate, ("aggregate",)),
    "mels": (_est_mels, ("me-regression",)),
    "mels-naive": (_est_mels_naive, ("me-regression",)),
}


def run_estimator(name: str, draw: Draw) -> tuple[float, float]:
    fn, _ = ESTIMATORS[name]
    out = fn(draw)
    if isinstance(out, tuple):
        return out
    return out.theta, out.se


# ---------------------------------------------------------------- harness


@dataclass(frozen=True)
class McReport:
    estimator: str
    dgp: dict[str, Any]
    replications: int
    master_seed: int
    truth: float
    mean_estimate: float
    mean_bias: float
    sd: float
    mean_se: float
    coverage: float
    mean_width: float
    failures: int
    alpha: float = 0.05
    records: tuple[tuple[int, float, float, float], ...] = ()

    @property
    def mc_se(self) -> float:
        """Monte Carlo standard error of the mean estimate."""
        return self.sd / math.sqrt(self.replications - self.failures)

    def to_dict(self, records: bool = False) -> dict[str, Any]:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "records"}
        d["mc_se"] = self.mc_se
        if records:
            d["records"] = [list(r) for r in self.records]
        return d

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def save_csv(self, path: str | Path) -> None:
        """One row per replication: r, theta, se, truth."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replication", "theta", "se", "truth"])
            for r, t, s, tr in self.records:
                w.writerow([r, repr(t), repr(s), repr(tr)])


MAX_FAILURE_RATE = 0.01


def monte_carlo(
    estimator: str,
    spec: DgpSpec,
    reps: int,
    master_seed: int,
    *,
    threads: int = 1,
    alpha: float = 0.05,
) -> McReport:
    """Run ``reps`` independent replications of ``estimator`` on ``spec``."""
    if estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}", module="simulate", rule="estimator")
    if spec.kind not in ESTIMATORS[estimator][1]:
        raise ConfigError(
            f"estimator {estimator!r} does not apply to DGP kind {spec.kind!r}", module="simulate", rule="estimator"
        )
    if reps < 1 or threads < 1:
        raise ConfigError("need reps >= 1 and threads >= 1", module="simulate", rule="reps")

    def one(r: int):
        draw = generate(spec, _rng(master_seed, r))
        try:
            theta, se = run_estimator(estimator, draw)
        except MarsError as exc:
            return r, math.nan, math.nan, draw.truth, f"{exc.module}/{exc.rule}: {exc}"
        return r, float(theta), float(se), float(draw.truth), None

    if threads == 1:
        results = [one(r) for r in range(reps)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(reps)))

    failed = [res for res in results if res[4] is not None]
    if len(failed) > MAX_FAILURE_RATE * reps:
        raise EstimatorError(
            f"{len(failed)} of {reps} replications failed",
            module="simulate",
            rule="failure-rate",
            first_errors=[f[4] for f in failed[:5]],
        )
    ok = [res for res in results if res[4] is None]
    theta = np.array([o[1] for o in ok])
    se = np.array([o[2] for o in ok])
    truth = np.array([o[3] for o in ok])
    z = eif.z_value(alpha)
    cover = np.abs(theta - truth) <= z * se
    return McReport(
        estimator=estimator,
        dgp=spec.to_dict(),
        replications=reps,
        master_seed=int(master_seed),
        truth=float(truth.mean()),
        mean_estimate=float(theta.mean()),
        mean_bias=float((theta - truth).mean()),
        sd=float(theta.std(ddof=1)) if theta.size > 1 else 0.0,
        mean_se=float(se.mean()),
        coverage=float(cover.mean()),
        mean_width=float((2 * z * se).mean()),
        failures=len(failed),
        alpha=alpha,
        records=tuple((int(o[0]), o[1], o[2], o[3]) for o in ok),
    )


# ---------------------------------------------------------------- named presets


@dataclass(frozen=True)
class Preset:
    estimator: str
    spec: DgpSpec
    reps: int


def _presets() -> dict[str, Preset]:
    base = DgpSpec(n=2000, pi=0.3, r2=0.5)
    p = {
        "mean-double-robustness": Preset("mean", replace(base, bias=0.5), 2000),
        "mean-naive": Preset("naive", replace(base, bias=0.5), 2000),
        "coverage-mean": Preset("mean", base, 2000),
        "coverage-mean-stratified": Preset("mean", replace(base, pi_strata=(0.2, 0.6)), 2000),
        "coverage-ols": Preset("ols", replace(base, kind="regression"), 2000),
        "coverage-iv": Preset("iv", replace(base, kind="iv"), 2000),
        "coverage-did": Preset("did", replace(base, kind="did", full_factor=10), 2000),
        "coverage-rdd": Preset("rdd", replace(base, kind="rdd", full_factor=10), 2000),
        "aggregate-product": Preset("aggregate", replace(base, kind="aggregate", pi=0.5), 2000),
        "mels-coverage": Preset("mels", DgpSpec(kind="me-regression", n=2000), 2000),
        "mels-naive": Preset("mels-naive", DgpSpec(kind="me-regression", n=2000), 2000),
    }
    for pi in (0.1, 0.5):
        for r2 in (0.0, 0.5, 0.9):
            name = f"bound-pi{pi:g}-r{r2:g}"
            p[name] = Preset("mean", replace(base, pi=pi, r2=r2), 4000)
    return p


PRESETS: dict[str, Preset] = _presets()


def run_preset(name: str, master_seed: int, *, threads: int = 1, reps: int | None = None) -> McReport:
    try:
        pre = PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}", module="simulate", rule="preset"
        ) from None
    return monte_carlo(pre.estimator, pre.spec, reps or pre.reps, master_seed, threads=threads)

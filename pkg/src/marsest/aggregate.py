"""Targets built from aggregates of record-level labels.

A group-level aggregate ``omega_j * sum_i M_ij`` with ``omega_j = h(N_j)``
has mean ``E[omega_j N_j] * E[M_ij]`` when group size is independent of the
records. The first factor is a plain group-level mean, the second a debiased
record-level mean; the product and its smooth transforms are estimated with
the delta method, treating groups as the independent sampling units.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import kernels
from .eif import Estimate, _aligned, aipw_mean, estimate_from_phi
from .errors import ConfigError, DataValidationError, NumericalError
from .frame import Role, RoleBoundDataset, as_indices

INDEPENDENCE_NOTE = "assumes group size is independent of record labels (not testable from one dataset)"
TAYLOR_NOTE = "second-order approximation; the Taylor remainder is not quantified"


@dataclass(frozen=True)
class Transform:
    """A smooth transform with its derivatives (third is optional)."""

    name: str
    f: Callable[[float], float]
    d1: Callable[[float], float]
    d2: Callable[[float], float]
    d3: Callable[[float], float] | None = None

    def third(self, x: float) -> float:
        if self.d3 is not None:
            return self.d3(x)
        h = 1e-4 * max(1.0, abs(x))
        return (self.d2(x + h) - self.d2(x - h)) / (2 * h)


def _safe_log(x: float) -> float:
    return math.log(x) if x > 0 else float("nan")


TRANSFORMS: dict[str, Transform] = {
    "identity": Transform("identity", lambda x: x, lambda x: 1.0, lambda x: 0.0, lambda x: 0.0),
    "log": Transform(
        "log",
        _safe_log,
        lambda x: 1.0 / x if x != 0 else float("inf"),
        lambda x: -1.0 / (x * x) if x != 0 else float("-inf"),
        lambda x: 2.0 / x**3 if x != 0 else float("inf"),
    ),
    "sqrt": Transform(
        "sqrt",
        lambda x: math.sqrt(x) if x >= 0 else float("nan"),
        lambda x: 0.5 / math.sqrt(x) if x > 0 else float("inf"),
        lambda x: -0.25 * x**-1.5 if x > 0 else float("-inf"),
        lambda x: 0.375 * x**-2.5 if x > 0 else float("inf"),
    ),
    "exp": Transform("exp", math.exp, math.exp, math.exp, math.exp),
}


@dataclass(frozen=True)
class AggregationSpec:
    """How records combine into a group value: ``omega_j = h(N_j)``."""

    weight: str = "sum"
    h: Mapping[int, float] | None = None
    transform: Transform | None = None

    def __post_init__(self):
        if self.weight not in ("sum", "average", "custom"):
            raise ConfigError(f"unknown weight rule {self.weight!r}", module="aggregate", rule="weight")
        if self.weight == "custom" and not self.h:
            raise ConfigError("custom weights need a tabulated h(N)", module="aggregate", rule="weight")

    def omega_n(self, sizes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (omega_j * N_j, omega_j**2 * N_j) per group."""
        sizes = sizes.astype(np.float64)
        if self.weight == "sum":
            return sizes, sizes
        if self.weight == "average":
            # omega * N is exactly one by definition; avoid (1/N)*N rounding
            return np.ones_like(sizes), 1.0 / sizes
        omega = np.empty_like(sizes)
        for j, n in enumerate(sizes.astype(np.int64)):
            if int(n) not in self.h:
                raise DataValidationError(
                    f"h(N) is not tabulated for N={int(n)}", module="aggregate", rule="custom-weight", size=int(n)
                )
            omega[j] = float(self.h[int(n)])
        if not np.all(np.isfinite(omega)):
            raise DataValidationError("h(N) must be finite", module="aggregate", rule="custom-weight")
        return omega * sizes, omega * omega * sizes


@dataclass(frozen=True)
class AggregateEstimate:
    theta1: Estimate
    theta2: Estimate
    combined: Estimate
    theta3: Estimate | None = None

    @property
    def theta(self) -> float:
        return self.combined.theta


@dataclass(frozen=True)
class _Groups:
    keys: np.ndarray
    codes: np.ndarray  # per dataset row
    sizes: np.ndarray


def _groups(ds: RoleBoundDataset) -> _Groups:
    ds.require(Role.GROUP, estimator="aggregate")
    raw = np.asarray(ds.table[ds.binding.get(Role.GROUP)])
    if raw.dtype.kind == "f":
        missing = np.isnan(raw)
    else:
        missing = np.array([v is None or (isinstance(v, str) and v == "") for v in raw])
    if missing.any():
        i = int(np.flatnonzero(missing)[0])
        raise DataValidationError(f"row {i}: missing group key", module="aggregate", rule="missing-group", row=i)
    keys, codes = np.unique(raw, return_inverse=True)
    sizes = np.bincount(codes.reshape(-1), minlength=keys.size)
    if np.any(sizes == 0):
        raise DataValidationError("a group has no records", module="aggregate", rule="empty-group")
    return _Groups(keys, codes.reshape(-1).astype(np.int64), sizes)


def _record_totals(groups: _Groups, rows: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return kernels.cluster_totals(phi, groups.codes[rows], groups.keys.size)


def linear_agg_mean(
    ds: RoleBoundDataset, predictions, spec: AggregationSpec, indices=None
) -> AggregateEstimate:
    """Estimate ``E[omega_j N_j] * E[M_ij]`` with a group-level influence function.

    Record-level influence values are summed within their groups and
    rescaled, so the covariance between the two factors is estimated
    empirically.
    """
    groups = _groups(ds)
    rows = as_indices(indices, ds.n)
    x, _ = spec.omega_n(groups.sizes)
    J = groups.keys.size
    theta1 = kernels.pairwise_sum(x) / J
    psi1 = x - theta1
    est1 = estimate_from_phi(theta1, psi1, "group_cardinality")
    est2 = aipw_mean(ds, predictions, rows)
    t2 = _record_totals(groups, rows, est2.phi)
    chi = est2.theta * psi1 + theta1 * (J / rows.size) * t2
    combined = estimate_from_phi(
        theta1 * est2.theta,
        chi,
        "aggregate_mean",
        options={"weight": spec.weight, "groups": J},
        notes=(INDEPENDENCE_NOTE,),
    )
    return AggregateEstimate(est1, est2, combined)


def theta3_hat(
    ds: RoleBoundDataset,
    predictions,
    spec: AggregationSpec,
    indices=None,
    predictions_sq=None,
) -> Estimate:
    """Variance of the group aggregate, ``Var(omega N) E[M]^2 + E[omega^2 N] Var(M)``.

    ``Var(M)`` is the debiased mean of ``M**2`` minus the squared debiased
    mean. ``predictions_sq`` imputes ``M**2`` (default: squared predictions;
    pass the predictions themselves for 0/1 labels). A negative plug-in
    record variance is clamped to zero with a warning.
    """
    groups = _groups(ds)
    rows = as_indices(indices, ds.n)
    J, n = groups.keys.size, rows.size
    x, w2n = spec.omega_n(groups.sizes)
    theta1 = kernels.pairwise_sum(x) / J
    dev = (x - theta1) ** 2
    a = kernels.pairwise_sum(dev) / J
    b = kernels.pairwise_sum(w2n) / J

    est2 = aipw_mean(ds, predictions, rows)
    pred = _aligned(predictions, rows, ds.n, "predictions")
    sq = pred * pred if predictions_sq is None else _aligned(predictions_sq, rows, ds.n, "predictions_sq")
    label = ds.label[rows]
    terms_s = kernels.pseudo_outcomes(sq, label * label, ds.annotated[rows], ds.score[rows], np.ones(n))
    s = kernels.pairwise_sum(terms_s) / n
    phi_s = terms_s - s

    t2 = est2.theta
    v = s - t2 * t2
    clamped = v < 0
    if clamped:
        warnings.warn(f"plug-in record variance {v!r} is negative; clamped to 0", stacklevel=2)
        v = 0.0
    theta3 = a * t2 * t2 + b * v
    d_t2 = 2 * a * t2 - (0.0 if clamped else 2 * b * t2)
    d_s = 0.0 if clamped else b
    record = d_t2 * est2.phi + d_s * phi_s
    chi = t2 * t2 * (dev - a) + v * (w2n - b) + (J / n) * _record_totals(groups, rows, record)
    return estimate_from_phi(
        theta3, chi, "aggregate_variance", options={"weight": spec.weight, "clamped": bool(clamped)}
    )


def taylor_transform(transform: Transform | str, agg: AggregateEstimate) -> Estimate:
    """Second-order approximation ``f(p) + f''(p) * theta3 / 2`` at ``p = theta1 * theta2``."""
    if isinstance(transform, str):
        try:
            transform = TRANSFORMS[transform]
        except KeyError:
            raise ConfigError(f"unknown transform {transform!r}", module="aggregate", rule="transform") from None
    if agg.theta3 is None:
        raise ConfigError("aggregate estimate lacks theta3; call theta3_hat first", module="aggregate", rule="theta3")
    p, t3 = agg.combined.theta, agg.theta3.theta
    fp, d1, d2 = transform.f(p), transform.d1(p), transform.d2(p)
    d3 = transform.third(p)
    if not all(math.isfinite(v) for v in (fp, d1, d2, d3)):
        raise NumericalError(
            f"{transform.name} or its derivatives are not finite at {p!r}",
            module="aggregate",
            rule="transform-domain",
        )
    if agg.combined.n != agg.theta3.n:
        raise DataValidationError("theta3 and the aggregate cover different groups", module="aggregate", rule="length-mismatch")
    value = fp + 0.5 * d2 * t3
    phi = (d1 + 0.5 * d3 * t3) * agg.combined.phi + 0.5 * d2 * agg.theta3.phi
    return estimate_from_phi(
        value,
        phi,
        f"taylor_{transform.name}",
        options={"transform": transform.name, "point": p, "theta3": t3},
        notes=(TAYLOR_NOTE,),
    )


def _period_role(ds: RoleBoundDataset) -> Role:
    if ds.has(Role.PERIOD):
        return Role.PERIOD
    ds.require(Role.GROUP, estimator="group_series")
    return Role.GROUP


def group_series(
    ds: RoleBoundDataset,
    predictions,
    indices=None,
    scale: Mapping[Any, float] | None = None,
) -> list[tuple[Any, Estimate]]:
    """Debiased mean per group (period), multiplied by a known constant c_t.

    Constants come from ``scale`` or, failing that, the WEIGHT column (one
    value per group). A group with rows but no labels yields an estimate
    with infinite variance and a warning.
    """
    role = _period_role(ds)
    raw = np.asarray(ds.table[ds.binding.get(role)])
    rows = as_indices(indices, ds.n)
    pred = np.asarray(predictions, dtype=np.float64)
    if pred.ndim == 0:
        pred = np.full(ds.n, float(pred))
    if pred.shape[0] != ds.n:
        raise DataValidationError(
            "group_series needs predictions for all rows", module="aggregate", rule="length-mismatch"
        )
    weights = ds.column(Role.WEIGHT) if scale is None and ds.has(Role.WEIGHT) else None
    out = []
    for key in np.unique(raw):
        g_rows = rows[raw[rows] == key]
        if g_rows.size == 0:
            raise DataValidationError(f"group {key!r} has no estimation rows", module="aggregate", rule="empty-group")
        if scale is not None:
            c = float(scale.get(_py(key), 1.0))
        elif weights is not None:
            wv = np.unique(weights[g_rows])
            if wv.size != 1:
                raise DataValidationError(
                    f"weight column varies within group {key!r}", module="aggregate", rule="weight-not-constant"
                )
            c = float(wv[0])
        else:
            c = 1.0
        n_ann = int(ds.annotated[g_rows].sum())
        opts = {"group": _py(key), "scale": c, "n_annotated": n_ann}
        if n_ann == 0:
            warnings.warn(f"group {key!r} has no annotated rows; variance is infinite", stacklevel=2)
            theta = c * kernels.pairwise_sum(pred[g_rows]) / g_rows.size
            est = Estimate(theta, np.zeros(g_rows.size), math.inf, math.inf, int(g_rows.size), "group_mean", None, g_rows, opts)
        else:
            base = aipw_mean(ds, pred, g_rows)
            est = estimate_from_phi(c * base.theta, c * base.phi, "group_mean", rows=g_rows, options=opts)
        out.append((_py(key), est))
    return out


def _py(v):
    return v.item() if hasattr(v, "item") else v


def series_covariance(series: list[tuple[Any, Estimate]]) -> np.ndarray:
    """Sampling covariance matrix of the group estimates.

    Entry (t, s) sums products of influence values over rows shared by both
    estimates, divided by ``n_t * n_s``; disjoint groups give exactly zero.
    """
    k = len(series)
    cov = np.zeros((k, k))
    for t, (_, a) in enumerate(series):
        for s, (_, b) in enumerate(series):
            if not (math.isfinite(a.variance) and math.isfinite(b.variance)):
                cov[t, s] = math.inf if t == s else 0.0
                continue
            shared, ia, ib = np.intersect1d(a.rows, b.rows, return_indices=True)
            if shared.size:
                cov[t, s] = kernels.pairwise_sum(a.phi[ia] * b.phi[ib]) / (a.n * b.n)
    return cov


INDEX_COLUMNS = ("group", "theta", "se", "ci_low", "ci_high", "n", "n_annotated")


def write_index_csv(series: list[tuple[Any, Estimate]], path: str | Path, alpha: float = 0.05) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        for key, est in series:
            lo, hi = est.ci(alpha)
            w.writerow([key, repr(est.theta), repr(est.se), repr(lo), repr(hi), est.n, est.options.get("n_annotated", "")])


def read_index_csv(path: str | Path) -> list[dict[str, Any]]:
    """Rows of an index file with numeric fields parsed."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(INDEX_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DataValidationError(
                f"index file lacks columns {sorted(missing)}", module="aggregate", rule="index-format"
            )
        out = []
        for row in reader:
            parsed: dict[str, Any] = {"group": row["group"]}
            for k in ("theta", "se", "ci_low", "ci_high"):
                parsed[k] = float(row[k])
            parsed["n"] = int(row["n"])
            parsed["n_annotated"] = int(row["n_annotated"]) if row["n_annotated"] else None
            out.append(parsed)
    return out

"""Debiased one-step estimators and influence-function variance.

Every estimator here is built from one kernel: the weighted pseudo-outcome

    w_i * (mu_i + A_i / pi_i * (M_i - mu_i))

averaged over the estimation rows. Ratios and differences of such means are
combined with the delta method, which acts on the per-row influence values
stored on each :class:`Estimate`.

Variances use the plug-in convention: ``variance`` is the mean squared
centered influence value (divisor n) and ``se = sqrt(variance / n)``.
Confidence intervals use normal critical values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import NormalDist
from typing import Any, Sequence

import numpy as np

from . import kernels
from .errors import DataValidationError, EstimatorError, NumericalError
from .frame import Role, RoleBoundDataset, as_indices

DEFAULT_REL_FLOOR = 1e-8
KNOWN_RESIDUAL_NOTE = (
    "residualized regressor computed on the full sample and treated as known; "
    "its sampling error is not propagated"
)
KNOWN_MARGINAL_NOTE = "group shares computed on the full sample and treated as known"


def z_value(alpha: float) -> float:
    return NormalDist().inv_cdf(1.0 - alpha / 2.0)


@dataclass(frozen=True)
class Estimate:
    """Point estimate with its centered per-unit influence values."""

    theta: float
    phi: np.ndarray
    variance: float
    se: float
    n: int
    estimator: str = ""
    clusters: np.ndarray | None = None
    rows: np.ndarray | None = None
    options: dict[str, Any] = field(default_factory=dict)
    notes: tuple[str, ...] = ()

    def ci(self, alpha: float = 0.05) -> tuple[float, float]:
        half = z_value(alpha) * self.se
        return self.theta - half, self.theta + half

    def to_dict(self, alpha: float = 0.05) -> dict[str, Any]:
        lo, hi = self.ci(alpha)
        return {
            "theta": self.theta,
            "se": self.se,
            "variance": self.variance,
            "ci_level": 1.0 - alpha,
            "ci_low": lo,
            "ci_high": hi,
            "n": self.n,
            "estimator": self.estimator,
            "options": dict(self.options),
            "notes": list(self.notes),
        }


def eif_variance(phi: np.ndarray) -> tuple[float, float]:
    """Plug-in variance of the influence values and the implied standard error."""
    phi = np.asarray(phi, dtype=np.float64)
    n = phi.size
    centered = phi - kernels.pairwise_sum(phi) / n
    variance = kernels.pairwise_sum(centered * centered) / n
    return variance, math.sqrt(variance / n)


def _cluster_codes(ids: np.ndarray) -> tuple[np.ndarray, int]:
    # clusters numbered by first appearance so singleton clusters keep row order
    _, first, inverse = np.unique(np.asarray(ids), return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse.reshape(-1)], first.size


def cluster_variance(phi: np.ndarray, cluster_ids: np.ndarray) -> tuple[float, float]:
    """Cluster-robust analogue of :func:`eif_variance`.

    Influence values are summed within clusters; ``variance`` is the sum of
    squared cluster totals divided by n, so ``se**2 = sum(T_c**2) / n**2``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    cluster_ids = np.asarray(cluster_ids)
    if cluster_ids.shape[0] != phi.size:
        raise DataValidationError(
            "cluster ids and influence values differ in length", module="eif", rule="length-mismatch"
        )
    n = phi.size
    centered = phi - kernels.pairwise_sum(phi) / n
    codes, n_clusters = _cluster_codes(cluster_ids)
    totals = kernels.cluster_totals(centered, codes, n_clusters)
    variance = kernels.pairwise_sum(totals * totals) / n
    return variance, math.sqrt(variance / n)


def estimate_from_phi(
    theta: float,
    phi: np.ndarray,
    estimator: str,
    *,
    clusters: np.ndarray | None = None,
    rows: np.ndarray | None = None,
    options: dict | None = None,
    notes: Sequence[str] = (),
) -> Estimate:
    phi = np.asarray(phi, dtype=np.float64)
    if clusters is None:
        variance, se = eif_variance(phi)
    else:
        variance, se = cluster_variance(phi, clusters)
    return Estimate(
        float(theta), phi, float(variance), float(se), int(phi.size), estimator, clusters, rows, dict(options or {}), tuple(notes)
    )


def _aligned(values, rows: np.ndarray, n_total: int, what: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 0:
        return np.full(rows.size, float(v))
    if v.shape[0] == rows.size:
        return v
    if v.shape[0] == n_total:
        return v[rows]
    raise DataValidationError(
        f"{what} has length {v.shape[0]}, expected {rows.size} (estimation rows) or {n_total} (all rows)",
        module="eif",
        rule="length-mismatch",
    )


def _clusters_for(ds: RoleBoundDataset, rows: np.ndarray, cluster: bool) -> np.ndarray | None:
    if not cluster:
        return None
    ds.require(Role.CLUSTER, estimator="clustered variance")
    return np.asarray(ds.table[ds.binding.get(Role.CLUSTER)])[rows]


def _rows(ds: RoleBoundDataset, indices) -> np.ndarray:
    rows = as_indices(indices, ds.n)
    if rows.size == 0:
        raise EstimatorError("empty estimation set", module="eif", rule="empty-estimation-set")
    return rows


def pseudo_outcome(ds: RoleBoundDataset, predictions, indices=None) -> np.ndarray:
    """mu + A/pi * (M - mu) per estimation row; exactly mu where A = 0."""
    rows = _rows(ds, indices)
    mu = _aligned(predictions, rows, ds.n, "predictions")
    return kernels.pseudo_outcomes(mu, ds.label[rows], ds.annotated[rows], ds.score[rows], np.ones(rows.size))


def mean_functional(
    ds: RoleBoundDataset,
    predictions,
    weights,
    indices=None,
    *,
    cluster: bool = False,
    estimator: str = "mean_functional",
) -> Estimate:
    """Mean of weight-composed pseudo-outcomes, the shared estimator kernel."""
    rows = _rows(ds, indices)
    mu = _aligned(predictions, rows, ds.n, "predictions")
    w = _aligned(weights, rows, ds.n, "weights")
    if not np.all(np.isfinite(w)):
        raise DataValidationError("weights must be finite", module="eif", rule="non-finite-weights")
    if not np.all(np.isfinite(mu)):
        raise DataValidationError("predictions must be finite", module="eif", rule="non-finite-predictions")
    terms = kernels.pseudo_outcomes(mu, ds.label[rows], ds.annotated[rows], ds.score[rows], w)
    theta = kernels.pairwise_sum(terms) / rows.size
    return estimate_from_phi(theta, terms - theta, estimator, clusters=_clusters_for(ds, rows, cluster), rows=rows)


def aipw_mean(ds: RoleBoundDataset, predictions, indices=None, *, cluster: bool = False) -> Estimate:
    """Debiased mean of the structured label."""
    return mean_functional(ds, predictions, 1.0, indices, cluster=cluster, estimator="mean")


def decompose_mean(ds: RoleBoundDataset, predictions, indices=None) -> tuple[float, float, float]:
    """The debiased mean written three ways: (AIPW, PPI, FRA).

    Requires a constant score equal to the annotated share of the
    estimation rows, under which the three expressions coincide.
    """
    rows = _rows(ds, indices)
    mu = _aligned(predictions, rows, ds.n, "predictions")
    a = ds.annotated[rows]
    pi = ds.score[rows]
    share = a.sum() / rows.size
    if np.ptp(pi) != 0.0:
        raise DataValidationError("decomposition needs a constant annotation score", module="eif", rule="non-constant-score")
    if abs(pi[0] - share) > 1e-12:
        raise DataValidationError(
            f"score {pi[0]!r} differs from the annotated share {share!r}",
            module="eif",
            rule="score-not-share",
        )
    m = ds.label[rows][a]
    mu_a = mu[a]
    aipw = float(np.mean(pseudo_outcome(ds, mu, rows)))
    ppi = float(np.mean(mu) + np.mean(m - mu_a))
    fra = float(np.mean(m) + (np.mean(mu) - np.mean(mu_a)))
    return aipw, ppi, fra


def ratio_combine(num: Estimate, den: Estimate, floor: float | None = None) -> Estimate:
    """Delta-method ratio of two estimates sharing estimation rows."""
    if num.n != den.n:
        raise DataValidationError("numerator and denominator rows differ", module="eif", rule="length-mismatch")
    if floor is None:
        scale = max(
            float(np.mean(np.abs(num.phi + num.theta))),
            float(np.mean(np.abs(den.phi + den.theta))),
        )
        floor = DEFAULT_REL_FLOOR * scale
    if not abs(den.theta) > floor:
        raise EstimatorError(
            f"denominator {den.theta!r} is below the identification floor {floor!r} (weak identification)",
            module="eif",
            rule="weak-denominator",
            denominator=den.theta,
            floor=floor,
        )
    theta = num.theta / den.theta
    phi = (num.phi - theta * den.phi) / den.theta
    clusters = num.clusters if num.clusters is not None else den.clusters
    return estimate_from_phi(
        theta,
        phi,
        f"ratio({num.estimator},{den.estimator})",
        clusters=clusters,
        rows=num.rows,
        notes=tuple(dict.fromkeys(num.notes + den.notes)),
    )


def difference_combine(a: Estimate, b: Estimate) -> Estimate:
    """a - b with influence values subtracted row by row."""
    if a.n != b.n:
        raise DataValidationError("estimates cover different rows", module="eif", rule="length-mismatch")
    clusters = a.clusters if a.clusters is not None else b.clusters
    return estimate_from_phi(
        a.theta - b.theta,
        a.phi - b.phi,
        f"difference({a.estimator},{b.estimator})",
        clusters=clusters,
        rows=a.rows,
        notes=tuple(dict.fromkeys(a.notes + b.notes)),
    )


def constant_mean_estimate(values: np.ndarray, estimator: str, *, clusters=None, rows=None) -> Estimate:
    """Plain sample mean of a fully observed quantity."""
    values = np.asarray(values, dtype=np.float64)
    theta = kernels.pairwise_sum(values) / values.size
    return estimate_from_phi(theta, values - theta, estimator, clusters=clusters, rows=rows)


def _numeric_column(ds: RoleBoundDataset, name: str) -> np.ndarray:
    col = np.asarray(ds.table[name], dtype=np.float64)
    if not np.all(np.isfinite(col)):
        raise DataValidationError(f"column {name!r} has missing or non-finite values", module="eif", rule="non-finite")
    return col


def residualize(ds: RoleBoundDataset, target: str, others: Sequence[str] = ()) -> np.ndarray:
    """``target`` minus its least-squares projection on an intercept and ``others``.

    Uses every row of the dataset.
    """
    y = _numeric_column(ds, target)
    design = np.column_stack([np.ones(ds.n)] + [_numeric_column(ds, c) for c in others])
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        raise NumericalError(
            f"projection design is rank deficient (rank {rank} < {design.shape[1]})",
            module="eif",
            rule="rank-deficient",
        )
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return y - design @ coef


def _control_names(ds: RoleBoundDataset, controls) -> list[str]:
    if controls is None:
        return list(ds.binding.columns(Role.CONTROL))
    return [controls] if isinstance(controls, str) else list(controls)


def ols_coefficient(
    ds: RoleBoundDataset,
    predictions,
    target: str,
    controls: Sequence[str] | None = None,
    indices=None,
    *,
    cluster: bool = False,
) -> Estimate:
    """Coefficient on ``target`` when regressing the label on it and ``controls``.

    The regressor is residualized on the controls over the full sample, then
    the debiased pseudo-outcome is regressed on the residual.
    """
    rows = _rows(ds, indices)
    c_perp = residualize(ds, target, _control_names(ds, controls))[rows]
    den_terms = c_perp * c_perp
    den_theta = kernels.pairwise_sum(den_terms) / rows.size
    if den_theta == 0.0:
        raise EstimatorError(
            f"regressor {target!r} has no variation left after residualizing",
            module="eif",
            rule="zero-residual-variance",
        )
    clusters = _clusters_for(ds, rows, cluster)
    num = mean_functional(ds, predictions, c_perp, rows, cluster=cluster, estimator="ols_numerator")
    den = estimate_from_phi(den_theta, den_terms - den_theta, "ols_denominator", clusters=clusters, rows=rows)
    est = ratio_combine(num, den)
    return replace(est, estimator="ols", options={"target": target}, notes=(KNOWN_RESIDUAL_NOTE,))


def iv_effect(
    ds: RoleBoundDataset,
    predictions,
    controls: Sequence[str] | None = None,
    indices=None,
    *,
    cluster: bool = False,
    floor: float | None = None,
) -> Estimate:
    """Just-identified IV effect of the (imputed) label on the outcome.

    Equivalent to two-stage least squares with the debiased pseudo-treatment.
    """
    ds.require(Role.OUTCOME, Role.INSTRUMENT, estimator="iv")
    rows = _rows(ds, indices)
    z_name = ds.binding.get(Role.INSTRUMENT)
    z_perp = residualize(ds, z_name, _control_names(ds, controls))[rows]
    y = _numeric_column(ds, ds.binding.get(Role.OUTCOME))[rows]
    clusters = _clusters_for(ds, rows, cluster)
    num = constant_mean_estimate(z_perp * y, "iv_numerator", clusters=clusters, rows=rows)
    den = mean_functional(ds, predictions, z_perp, rows, cluster=cluster, estimator="iv_denominator")
    est = ratio_combine(num, den, floor)
    return replace(est, estimator="iv", options={"instrument": z_name}, notes=(KNOWN_RESIDUAL_NOTE,))


def _arm_predictions(predictions) -> tuple[Any, Any]:
    if isinstance(predictions, tuple):
        if len(predictions) != 2:
            raise DataValidationError("pass one prediction vector per arm", module="eif", rule="arm-predictions")
        return predictions
    return predictions, predictions


def _indicator(ds: RoleBoundDataset, role: Role) -> np.ndarray:
    col = np.asarray(ds.table[ds.binding.get(role)], dtype=np.float64)
    if not np.all(np.isin(col, (0.0, 1.0))):
        raise DataValidationError(f"{role.value} column must be a 0/1 indicator", module="eif", rule="indicator")
    return col


def _two_arm(ds, predictions, rows, w1, w0, cluster, names) -> Estimate:
    pred1, pred0 = _arm_predictions(predictions)
    a = mean_functional(ds, pred1, w1[rows], rows, cluster=cluster, estimator=names[0])
    b = mean_functional(ds, pred0, w0[rows], rows, cluster=cluster, estimator=names[1])
    return difference_combine(a, b)


def did_attgt(
    ds: RoleBoundDataset,
    predictions,
    indices=None,
    *,
    cohort: Any = None,
    period: Any = None,
    cluster: bool = False,
) -> Estimate:
    """Group-time ATT from first-differenced labels, cohort vs never-treated.

    ``predictions`` is one vector or a ``(cohort_arm, never_treated_arm)``
    pair. The label must already be the within-unit difference and the
    annotation flag the product of both periods' flags.
    """
    ds.require(Role.COHORT, Role.NEVER_TREATED, estimator="did")
    rows = _rows(ds, indices)
    g = _indicator(ds, Role.COHORT)
    c = _indicator(ds, Role.NEVER_TREATED)
    p_g, p_c = g.mean(), c.mean()
    if p_g == 0 or not g[rows].any():
        raise EstimatorError("cohort group is empty", module="eif", rule="empty-group", arm="cohort")
    if p_c == 0 or not c[rows].any():
        raise EstimatorError("comparison group is empty", module="eif", rule="empty-group", arm="never_treated")
    est = _two_arm(ds, predictions, rows, g / p_g, c / p_c, cluster, ("did_cohort", "did_never_treated"))
    return replace(
        est,
        estimator="did",
        options={"cohort": cohort, "period": period, "p_cohort": p_g, "p_never_treated": p_c},
        notes=(KNOWN_MARGINAL_NOTE,),
    )


def rdd_local(
    ds: RoleBoundDataset,
    predictions,
    window: tuple[float, float],
    indices=None,
    *,
    cluster: bool = False,
) -> Estimate:
    """Treated-minus-control contrast inside a local-randomization window.

    The window is closed: ``lo <= R <= hi``. ``predictions`` may be a
    ``(treated_arm, control_arm)`` pair.
    """
    ds.require(Role.RUNNING, Role.TREATED, estimator="rdd")
    lo, hi = window
    if not lo <= hi:
        raise DataValidationError("window must satisfy lo <= hi", module="eif", rule="window")
    rows = _rows(ds, indices)
    r = _numeric_column(ds, ds.binding.get(Role.RUNNING))
    d = _indicator(ds, Role.TREATED)
    inside = ((r >= lo) & (r <= hi)).astype(np.float64)
    t1, t0 = inside * d, inside * (1.0 - d)
    p1, p0 = t1.mean(), t0.mean()
    if p1 == 0 or not t1[rows].any():
        raise EstimatorError("no treated rows inside the window", module="eif", rule="empty-arm", arm="treated")
    if p0 == 0 or not t0[rows].any():
        raise EstimatorError("no control rows inside the window", module="eif", rule="empty-arm", arm="control")
    est = _two_arm(ds, predictions, rows, t1 / p1, t0 / p0, cluster, ("rdd_treated", "rdd_control"))
    return replace(
        est,
        estimator="rdd",
        options={"window": [lo, hi], "p_treated": p1, "p_control": p0},
        notes=(KNOWN_MARGINAL_NOTE,),
    )


def write_phi_csv(est: Estimate, path: str | Path) -> None:
    """Per-row influence values for diagnostics."""
    rows = est.rows if est.rows is not None else np.arange(est.n)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "phi"])
        for r, v in zip(rows, est.phi):
            w.writerow([int(r), repr(float(v))])

"""Least squares corrected for classical measurement error in the regressors.

Regressors built from debiased first-step estimates carry error
``eta_i ~ N(0, Sigma_i)`` with known diagonal ``Sigma_i``. The corrected
estimator solves the just-identified moment

    (1/n) sum_i [X_i (Y_i - X_i' b) + Sigma_i b] = 0,

so ``b = (X'X - n Sigma_bar)^{-1} X'Y``. The homogeneous case is
``Sigma_i = Sigma`` for every row; one code path serves both.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .eif import _cluster_codes, z_value
from .errors import ConfigError, DataValidationError, NumericalError

RESIDUALIZED_NOTE = (
    "fixed effects were partialled out before the correction; the correction is applied to the residualized design"
)


@dataclass(frozen=True)
class MeRegressionProblem:
    """Outcome, observed regressors and per-row error variances.

    ``sigma`` holds the diagonal of ``Sigma_i``: shape (n, K), or (K,) for a
    homogeneous design. Zero entries mark error-free regressors.
    """

    y: np.ndarray
    x: np.ndarray
    sigma: np.ndarray
    clusters: np.ndarray | None = None
    names: tuple[str, ...] = ()
    center: bool = True
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        n, k = x.shape
        if y.size != n:
            raise DataValidationError("outcome and regressors differ in length", module="mels", rule="length-mismatch")
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.ndim == 0:
            sigma = np.full(k, float(sigma))
        if sigma.ndim == 1:
            if sigma.size != k:
                raise DataValidationError("sigma needs one entry per regressor", module="mels", rule="sigma-shape")
            sigma = np.broadcast_to(sigma, (n, k)).copy()
        if sigma.shape != (n, k):
            raise DataValidationError(f"sigma has shape {sigma.shape}, expected {(n, k)}", module="mels", rule="sigma-shape")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x)) and np.all(np.isfinite(sigma))):
            raise DataValidationError("inputs must be finite", module="mels", rule="non-finite")
        if np.any(sigma < 0):
            raise DataValidationError("error variances must be nonnegative", module="mels", rule="sigma-negative")
        if self.clusters is not None and np.asarray(self.clusters).shape[0] != n:
            raise DataValidationError("cluster ids differ in length", module="mels", rule="length-mismatch")
        names = tuple(self.names) or tuple(f"x{j}" for j in range(k))
        if len(names) != k:
            raise ConfigError("one name per regressor", module="mels", rule="names")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "names", names)


@dataclass(frozen=True)
class MeRegressionFit:
    beta: np.ndarray
    avar: np.ndarray  # asymptotic variance of sqrt(n)(beta_hat - beta)
    n: int
    names: tuple[str, ...]
    intercept: float = 0.0
    diagnostics: dict[str, Any] = field(default_factory=dict)
    notes: tuple[str, ...] = ()

    @property
    def cov(self) -> np.ndarray:
        return self.avar / self.n

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))

    def ci(self, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
        half = z_value(alpha) * self.se
        return self.beta - half, self.beta + half

    def to_dict(self, alpha: float = 0.05) -> dict[str, Any]:
        lo, hi = self.ci(alpha)
        return {
            "coefficients": {
                name: {"beta": float(b), "se": float(s), "ci_low": float(l), "ci_high": float(h)}
                for name, b, s, l, h in zip(self.names, self.beta, self.se, lo, hi)
            },
            "intercept": self.intercept,
            "ci_level": 1.0 - alpha,
            "n": self.n,
            "covariance": self.cov.tolist(),
            "diagnostics": dict(self.diagnostics),
            "notes": list(self.notes),
        }

    def save(self, path: str | Path, alpha: float = 0.05) -> None:
        Path(path).write_text(json.dumps(self.to_dict(alpha), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _min_eig(a: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (a + a.T))[0])


def mels_fit(p: MeRegressionProblem) -> MeRegressionFit:
    """Corrected least squares with a sandwich variance.

    The middle matrix is ``(1/n) sum (Z_i Z_i' - Sigma_i b b' Sigma_i)`` with
    ``Z_i = X_i (Y_i - X_i' b)``. When that matrix is not positive
    semidefinite, or when clusters are given, the score outer product of
    ``Z_i + Sigma_i b`` is used instead (summed within clusters).
    """
    x, y, sig = p.x, p.y, p.sigma
    n, k = x.shape
    if n <= k:
        raise DataValidationError(f"need more rows than regressors (n={n}, K={k})", module="mels", rule="n-le-k")
    x_mean = x.mean(axis=0) if p.center else np.zeros(k)
    y_mean = float(y.mean()) if p.center else 0.0
    xc = x - x_mean
    yc = y - y_mean

    sigma_bar = sig.mean(axis=0)
    gram = xc.T @ xc
    corrected = gram - n * np.diag(sigma_bar)
    eigs = np.linalg.eigvalsh(0.5 * (corrected + corrected.T))
    if eigs[0] <= 0:
        raise NumericalError(
            "insufficient labels for ME correction: X'X - n*Sigma is not positive definite",
            module="mels",
            rule="indefinite-correction",
            min_eigenvalue=float(eigs[0]),
        )
    beta = np.linalg.solve(corrected, xc.T @ yc)

    resid = yc - xc @ beta
    z = xc * resid[:, None]
    sb = sig * beta[None, :]  # rows of Sigma_i b (diagonal Sigma_i)
    omega = corrected / n
    score = z + sb
    moment = score.mean(axis=0)

    if p.clusters is not None:
        codes, g = _cluster_codes(np.asarray(p.clusters))
        totals = np.zeros((g, k))
        np.add.at(totals, codes, score)
        psi = totals.T @ totals / n
        form = "clustered-score"
    else:
        psi = (z.T @ z - sb.T @ sb) / n
        form = "corrected"
        scale = max(float(np.abs(np.diag(psi)).max()), np.finfo(float).tiny)
        if _min_eig(psi) < -1e-12 * scale:
            warnings.warn("corrected middle matrix is not PSD; using the score outer-product form", stacklevel=2)
            psi = score.T @ score / n
            form = "score-fallback"

    omega_inv = np.linalg.inv(omega)
    avar = omega_inv @ psi @ omega_inv
    avar = 0.5 * (avar + avar.T)
    diagnostics = {
        "condition_number": float(eigs[-1] / eigs[0]),
        "min_eigenvalue": float(eigs[0]),
        "moment_max_abs": float(np.abs(moment).max()),
        "variance_form": form,
        "clusters": None if p.clusters is None else int(len(np.unique(np.asarray(p.clusters)))),
    }
    return MeRegressionFit(
        beta,
        avar,
        n,
        p.names,
        intercept=float(y_mean - x_mean @ beta),
        diagnostics=diagnostics,
        notes=p.notes,
    )


def isserlis_avar(
    omega: np.ndarray, e_eps2_xx: np.ndarray, e_eps2: float, sigma: np.ndarray, beta: np.ndarray
) -> np.ndarray:
    """Population asymptotic variance under normal homogeneous errors.

    ``Omega^{-1} (E[eps^2 X* X*'] + Pi) Omega^{-1}`` with
    ``Pi = E[eps^2] Sigma + (b' Sigma b)(Omega + Sigma) + Sigma b b' Sigma``.
    """
    omega = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    a = np.atleast_2d(np.asarray(e_eps2_xx, dtype=np.float64))
    s = np.asarray(sigma, dtype=np.float64)
    s = np.diag(s) if s.ndim == 1 else np.atleast_2d(s)
    b = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    sb = s @ b
    pi = e_eps2 * s + float(b @ sb) * (omega + s) + np.outer(sb, sb)
    inv = np.linalg.inv(omega)
    return inv @ (a + pi) @ inv


def _predecessors(keys: Sequence[Any]) -> dict[Any, Any]:
    if all(isinstance(k, (int, np.integer)) and not isinstance(k, bool) for k in keys):
        return {k: k - 1 for k in keys}
    ordered = sorted(keys)
    return {k: (ordered[i - 1] if i else None) for i, k in enumerate(ordered)}


def interaction_sigma(intensity, sigma_t_sq: Mapping[Any, float], period) -> np.ndarray:
    """Per-row error variance ``E[intensity^2 | t] (sigma_t^2 + sigma_{t-1}^2)``.

    For integer periods the predecessor of ``t`` is ``t - 1``; otherwise it is
    the previous key of ``sigma_t_sq`` in sorted order.
    """
    intensity = np.asarray(intensity, dtype=np.float64)
    period = np.asarray(period)
    if intensity.shape != period.shape:
        raise DataValidationError("intensity and period differ in length", module="mels", rule="length-mismatch")
    keys = [k.item() if hasattr(k, "item") else k for k in np.unique(period)]
    prev = _predecessors(list(sigma_t_sq) + [k for k in keys if k not in sigma_t_sq])
    out = np.empty(intensity.size)
    for t in keys:
        if t not in sigma_t_sq:
            raise DataValidationError(f"no error variance for period {t!r}", module="mels", rule="missing-sigma", period=t)
        s = prev.get(t)
        if s is None or s not in sigma_t_sq:
            raise DataValidationError(
                f"no error variance for the period before {t!r}", module="mels", rule="missing-predecessor", period=t
            )
        rows = period == t
        e_int2 = float(np.mean(intensity[rows] ** 2))
        out[rows] = e_int2 * (float(sigma_t_sq[t]) + float(sigma_t_sq[s]))
    return out


def log_diff_propagate(series: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Log differences of a positive series with delta-method variances.

    ``series`` holds ``(theta_t, var_t)`` in period order, where ``var_t`` is
    the sampling variance of ``theta_t``. Periods are taken as independent.
    """
    thetas = [float(t) for t, _ in series]
    variances = [float(v) for _, v in series]
    for i, t in enumerate(thetas):
        if not t > 0:
            raise NumericalError(f"log undefined for theta={t!r} at position {i}", module="mels", rule="nonpositive-theta")
    out = []
    for i in range(1, len(thetas)):
        d = math.log(thetas[i]) - math.log(thetas[i - 1])
        v = variances[i] / thetas[i] ** 2 + variances[i - 1] / thetas[i - 1] ** 2
        out.append((d, v))
    return out

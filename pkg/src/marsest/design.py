"""Annotation design: importance-sampling scores, effective sample size,
the variance lower bound and label budgets for a target interval width.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .eif import z_value
from .errors import ConfigError, DataValidationError


@dataclass(frozen=True)
class DesignInput:
    """Strata with sizes, an uncertainty proxy each, and an expected label budget."""

    sizes: Mapping[Any, int]
    err: Mapping[Any, float]
    budget: float
    floor: float = 1e-3
    cap: float = 1.0

    def __post_init__(self):
        if set(self.sizes) != set(self.err):
            raise ConfigError("sizes and err must cover the same strata", module="design", rule="strata")
        if not self.sizes:
            raise ConfigError("no strata", module="design", rule="strata")
        if any(int(s) < 0 for s in self.sizes.values()):
            raise ConfigError("stratum sizes must be nonnegative", module="design", rule="size")
        errs = [float(e) for e in self.err.values()]
        if not all(math.isfinite(e) and e >= 0 for e in errs) or not any(e > 0 for e in errs):
            raise ConfigError("err must be finite, nonnegative and not all zero", module="design", rule="err")
        if not (0.0 < self.floor <= self.cap <= 1.0):
            raise ConfigError("need 0 < floor <= cap <= 1", module="design", rule="floor")
        if not (0 < self.budget <= self.total):
            raise ConfigError(
                f"budget {self.budget} must lie in (0, {self.total}]", module="design", rule="budget"
            )

    @property
    def total(self) -> int:
        return int(sum(int(s) for s in self.sizes.values()))


def feasible_scores(d: DesignInput) -> dict[Any, float]:
    """Scores ``clamp(c * err_s, floor, cap)`` with ``sum size_s * pi_s = budget``.

    The budget is piecewise linear and nondecreasing in ``c``; the segment
    holding the budget is located over the clamp breakpoints and ``c`` is
    then solved in exact rational arithmetic.
    """
    keys = list(d.sizes)
    size = {k: Fraction(int(d.sizes[k])) for k in keys}
    err = {k: Fraction(float(d.err[k])) for k in keys}
    lo, hi, budget = Fraction(d.floor), Fraction(d.cap), Fraction(d.budget)

    def spent(c: Fraction) -> Fraction:
        return sum(size[k] * min(max(c * err[k], lo), hi) for k in keys)

    least = spent(Fraction(0))
    reachable = sum(size[k] * (hi if err[k] > 0 else lo) for k in keys)
    # budgets within float rounding of an end point snap to it
    slack = Fraction(1, 10**12) * max(budget, Fraction(1))
    if least - slack <= budget < least:
        budget = least
    if reachable < budget <= reachable + slack:
        budget = reachable
    if budget < least or budget > reachable:
        raise ConfigError(
            f"budget {d.budget} is outside the feasible range [{float(least)}, {float(reachable)}]",
            module="design",
            rule="budget-infeasible",
        )

    breaks = sorted({b for k in keys if err[k] > 0 for b in (lo / err[k], hi / err[k])})
    left = Fraction(0)
    for b in breaks:
        if spent(b) >= budget:
            break
        left = b
    # on [left, b] every stratum is fixed at a bound or free (linear in c)
    mid = left if not breaks else (left + b) / 2
    fixed = Fraction(0)
    slope = Fraction(0)
    for k in keys:
        v = mid * err[k]
        if v <= lo:
            fixed += size[k] * lo
        elif v >= hi:
            fixed += size[k] * hi
        else:
            slope += size[k] * err[k]
    c = left if slope == 0 else (budget - fixed) / slope
    return {k: float(min(max(c * err[k], lo), hi)) for k in keys}


def effective_sample_size(n_labeled: float, n_unlabeled: float, rho: float) -> float:
    """Labels-only sample size equivalent to labels plus imputations."""
    if n_labeled < 0 or n_unlabeled < 0 or n_labeled + n_unlabeled == 0:
        raise ConfigError("counts must be nonnegative and not both zero", module="design", rule="counts")
    if not -1.0 <= rho <= 1.0:
        raise ConfigError("rho must lie in [-1, 1]", module="design", rule="rho")
    r2 = max(rho * rho, 0.0)
    return n_labeled * (n_labeled + n_unlabeled) / (n_labeled + n_unlabeled * (1.0 - r2))


def variance_bound(var_m: float, pi: float, r2: float) -> float:
    """Lower bound on the influence-function variance under a constant score."""
    if var_m < 0 or not (0.0 < pi <= 1.0) or not (0.0 <= r2 <= 1.0):
        raise ConfigError("need var_m >= 0, pi in (0, 1], r2 in [0, 1]", module="design", rule="domain")
    return var_m * (1.0 + (1.0 / pi - 1.0) * (1.0 - r2))


def variance_bound_strata(
    var_m: float, shares: Sequence[float], pi: Sequence[float], cond_var: Sequence[float]
) -> float:
    """General form ``Var(M) + E[(1/pi(X) - 1) Var(M | X)]`` over discrete strata."""
    shares, pi, cond_var = (np.asarray(v, dtype=np.float64) for v in (shares, pi, cond_var))
    if not (shares.shape == pi.shape == cond_var.shape):
        raise DataValidationError("stratum components differ in length", module="design", rule="length-mismatch")
    if np.any(pi <= 0) or np.any(pi > 1) or np.any(cond_var < 0) or np.any(shares < 0):
        raise ConfigError("scores in (0, 1], nonnegative shares and variances", module="design", rule="domain")
    if not math.isclose(float(shares.sum()), 1.0, rel_tol=0, abs_tol=1e-12):
        raise ConfigError("stratum shares must sum to one", module="design", rule="shares")
    return float(var_m + np.sum(shares * (1.0 / pi - 1.0) * cond_var))


def ci_width(n_labeled: int, total: int, var_m: float, r2: float, alpha: float = 0.05) -> float:
    return 2.0 * z_value(alpha) * math.sqrt(variance_bound(var_m, n_labeled / total, r2) / total)


def labels_for_width(
    width: float, alpha: float, var_m: float, r2: float, total: int, min_labels: int = 1
) -> int | None:
    """Fewest labels whose bound-implied interval is no wider than ``width``.

    ``None`` when even full annotation misses the target. ``r2`` plays the
    role of a prior on the squared imputer correlation.
    """
    if width <= 0:
        raise ConfigError("target width must be positive", module="design", rule="width")
    if total < 1 or not (1 <= min_labels <= total):
        raise ConfigError("need 1 <= min_labels <= total", module="design", rule="counts")
    if ci_width(total, total, var_m, r2, alpha) > width:
        return None
    lo, hi = min_labels, total
    while lo < hi:
        mid = (lo + hi) // 2
        if ci_width(mid, total, var_m, r2, alpha) <= width:
            hi = mid
        else:
            lo = mid + 1
    return lo


def read_strata_csv(path: str | Path) -> tuple[dict[str, int], dict[str, float]]:
    sizes: dict[str, int] = {}
    err: dict[str, float] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not {"stratum", "size", "err"} <= set(reader.fieldnames or ()):
            raise DataValidationError(
                "strata file needs columns stratum, size, err", module="design", rule="strata-format"
            )
        for line, row in enumerate(reader, start=2):
            key = row["stratum"]
            if key in sizes:
                raise DataValidationError(f"line {line}: duplicate stratum {key!r}", module="design", rule="strata-format")
            try:
                sizes[key] = int(row["size"])
                err[key] = float(row["err"])
            except ValueError:
                raise DataValidationError(
                    f"line {line}: unparseable size or err", module="design", rule="strata-format", line=line
                ) from None
    return sizes, err


def write_scores_csv(d: DesignInput, scores: Mapping[Any, float], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stratum", "size", "err", "score"])
        for k in d.sizes:
            w.writerow([k, int(d.sizes[k]), repr(float(d.err[k])), repr(scores[k])])

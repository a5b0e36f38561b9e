"""Sample splitting and cross-fitting plans.

Plans are stratified by annotation status so that every estimation part
holds labels for the debiasing correction. Row order within a stratum is
set by a counter-based hash keyed on (seed, row index), so a plan depends
only on the row count, the annotation flags, the fraction or fold count,
and the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, DataValidationError
from .frame import RoleBoundDataset


@dataclass(frozen=True)
class SplitPlan:
    estimation: np.ndarray
    tuning: np.ndarray
    seed: int

    def to_dict(self) -> dict:
        return {
            "kind": "split",
            "seed": int(self.seed),
            "estimation": self.estimation.tolist(),
            "tuning": self.tuning.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SplitPlan":
        return cls(
            np.asarray(doc["estimation"], dtype=np.int64),
            np.asarray(doc["tuning"], dtype=np.int64),
            int(doc["seed"]),
        )


@dataclass(frozen=True)
class CrossFitPlan:
    folds: tuple[np.ndarray, ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def complement(self, i: int) -> np.ndarray:
        return np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))

    def to_dict(self) -> dict:
        return {"kind": "crossfit", "seed": int(self.seed), "folds": [f.tolist() for f in self.folds]}

    @classmethod
    def from_dict(cls, doc: dict) -> "CrossFitPlan":
        return cls(tuple(np.asarray(f, dtype=np.int64) for f in doc["folds"]), int(doc["seed"]))


def save_plan(plan: SplitPlan | CrossFitPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict()), encoding="utf-8")


def load_plan(path: str | Path) -> SplitPlan | CrossFitPlan:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return SplitPlan.from_dict(doc) if doc.get("kind") == "split" else CrossFitPlan.from_dict(doc)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _ordered_strata(annotated: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    keys = kernels.splitmix_keys(seed, annotated.shape[0])
    rows = np.arange(annotated.shape[0])
    # lexsort: last key is primary; ties in the hash fall back to row index
    order = np.lexsort((rows, keys))
    return order[annotated[order]], order[~annotated[order]]


def make_split(ds: RoleBoundDataset, fraction: float, seed: int) -> SplitPlan:
    """Split rows into estimation and tuning parts.

    Each stratum sends ``round_half_up(fraction * size)`` rows to the
    estimation part. The annotated count is kept in ``[1, n_annotated - 1]``
    so both parts hold at least one label.
    """
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"estimation fraction must lie in (0, 1), got {fraction}", module="split", rule="fraction")
    annotated = np.asarray(ds.annotated, dtype=bool)
    n_ann = int(annotated.sum())
    if n_ann < 2:
        raise DataValidationError(
            f"splitting needs at least 2 annotated rows, found {n_ann}", module="split", rule="too-few-annotated"
        )
    ann_rows, unann_rows = _ordered_strata(annotated, seed)
    k_ann = min(max(_round_half_up(fraction * n_ann), 1), n_ann - 1)
    k_unann = _round_half_up(fraction * unann_rows.size)
    estimation = np.sort(np.concatenate([ann_rows[:k_ann], unann_rows[:k_unann]]))
    tuning = np.sort(np.concatenate([ann_rows[k_ann:], unann_rows[k_unann:]]))
    return SplitPlan(estimation.astype(np.int64), tuning.astype(np.int64), int(seed))


def make_crossfit(ds: RoleBoundDataset, k: int, seed: int) -> CrossFitPlan:
    """Partition rows into ``k`` folds whose sizes differ by at most one.

    Annotated rows are dealt round-robin first, then unannotated rows
    continue the rotation, so each fold gets an even share of both.
    """
    if k < 2:
        raise ConfigError(f"cross-fitting needs k >= 2, got {k}", module="split", rule="k")
    annotated = np.asarray(ds.annotated, dtype=bool)
    n_ann = int(annotated.sum())
    if n_ann < k:
        raise DataValidationError(
            f"{k} folds need at least {k} annotated rows, found {n_ann}", module="split", rule="too-few-annotated"
        )
    ann_rows, unann_rows = _ordered_strata(annotated, seed)
    dealt = np.concatenate([ann_rows, unann_rows])
    fold_of = np.arange(dealt.size) % k
    folds = tuple(np.sort(dealt[fold_of == j]).astype(np.int64) for j in range(k))
    return CrossFitPlan(folds, int(seed))

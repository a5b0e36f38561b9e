"""Imputation functions for the structured label.

Baselines (constant mean, linear least squares, k-nearest-neighbor) exist
for end-to-end runs and tests. The production path is ``fixed-column``,
which passes through predictions computed elsewhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import kernels
from .errors import ConfigError, DataValidationError, NumericalError
from .frame import Role, RoleBoundDataset, as_indices

KINDS = ("constant-mean", "linear-least-squares", "k-nearest-neighbor", "fixed-column")


@dataclass(frozen=True)
class ImputerSpec:
    kind: str = "constant-mean"
    k: int = 5
    ridge: float = 0.0
    use_context: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown imputer kind {self.kind!r}", module="impute", rule="kind")
        if self.k < 1:
            raise ConfigError("k-NN needs k >= 1", module="impute", rule="k")
        if self.ridge < 0:
            raise ConfigError("ridge penalty must be >= 0", module="impute", rule="ridge")

    @property
    def roles(self) -> tuple[Role, ...]:
        return (Role.FEATURE, Role.CONTEXT) if self.use_context else (Role.FEATURE,)


@dataclass(frozen=True)
class FittedImputer:
    spec: ImputerSpec
    params: dict[str, Any] = field(default_factory=dict)
    training_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(np.asarray(self.training_rows, dtype=np.int64).tobytes()).hexdigest()[:16]

    def to_dict(self) -> dict:
        params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()}
        return {
            "kind": self.spec.kind,
            "k": self.spec.k,
            "ridge": self.spec.ridge,
            "use_context": self.spec.use_context,
            "params": params,
            "training_rows": self.training_rows.tolist(),
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FittedImputer":
        spec = ImputerSpec(doc["kind"], doc.get("k", 5), doc.get("ridge", 0.0), doc.get("use_context", False))
        params = {k: (np.asarray(v, dtype=np.float64) if isinstance(v, list) else v) for k, v in doc["params"].items()}
        return cls(spec, params, np.asarray(doc.get("training_rows", []), dtype=np.int64))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")


def _design(ds: RoleBoundDataset, spec: ImputerSpec, rows: np.ndarray) -> np.ndarray:
    x = ds.matrix(*spec.roles)[rows]
    if np.isnan(x).any():
        bad = rows[np.flatnonzero(np.isnan(x).any(axis=1))[0]]
        raise DataValidationError(
            f"row {int(bad)}: missing feature value", module="impute", rule="missing-feature", row=int(bad)
        )
    return x


def fit(spec: ImputerSpec, ds: RoleBoundDataset, tuning: np.ndarray | None) -> FittedImputer:
    """Fit ``spec`` on the annotated rows among ``tuning``."""
    if spec.kind == "fixed-column":
        ds.require(Role.PREDICTION, estimator="fixed-column imputer")
        return FittedImputer(spec)
    tuning = as_indices(tuning, ds.n)
    train = tuning[ds.annotated[tuning]]
    if train.size == 0:
        raise DataValidationError("no annotated rows in the tuning set", module="impute", rule="no-annotated-tuning")
    y = ds.label[train]

    if spec.kind == "constant-mean":
        return FittedImputer(spec, {"mean": float(kernels.pairwise_sum(y) / y.size)}, train)

    if spec.roles and not any(ds.has(r) for r in spec.roles):
        ds.require(Role.FEATURE, estimator=spec.kind)
    x = _design(ds, spec, train)

    if spec.kind == "linear-least-squares":
        x_mean = x.mean(axis=0)
        y_mean = float(y.mean())
        xc = x - x_mean
        gram = xc.T @ xc + spec.ridge * np.eye(x.shape[1])
        if spec.ridge == 0.0:
            # intercept column folded in through centering
            rank = np.linalg.matrix_rank(np.column_stack([np.ones(len(train)), x]))
            if rank < x.shape[1] + 1:
                raise NumericalError(
                    "rank-deficient design for linear imputer; set a positive ridge penalty",
                    module="impute",
                    rule="rank-deficient",
                    rank=int(rank),
                )
        coef = np.linalg.solve(gram, xc.T @ (y - y_mean))
        intercept = y_mean - float(x_mean @ coef)
        return FittedImputer(spec, {"coef": coef, "intercept": intercept}, train)

    # k-nearest-neighbor on features standardized with tuning-fold moments
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    return FittedImputer(
        spec,
        {"center": center, "scale": scale, "train_x": (x - center) / scale, "train_y": y.astype(np.float64)},
        train,
    )


def predict(f: FittedImputer, ds: RoleBoundDataset, indices: np.ndarray | None = None) -> np.ndarray:
    """One finite prediction per requested row."""
    rows = as_indices(indices, ds.n)
    kind = f.spec.kind
    if kind == "fixed-column":
        pred = ds.column(Role.PREDICTION)[rows]
        bad = np.flatnonzero(~np.isfinite(pred))
        if bad.size:
            raise DataValidationError(
                f"row {int(rows[bad[0]])}: prediction is not finite",
                module="impute",
                rule="missing-feature",
                row=int(rows[bad[0]]),
            )
        return pred
    if kind == "constant-mean":
        return np.full(rows.size, f.params["mean"], dtype=np.float64)
    x = _design(ds, f.spec, rows)
    if kind == "linear-least-squares":
        return x @ np.asarray(f.params["coef"]) + f.params["intercept"]
    q = (x - np.asarray(f.params["center"])) / np.asarray(f.params["scale"])
    return kernels.knn_predict(np.asarray(f.params["train_x"]), np.asarray(f.params["train_y"]), q, f.spec.k)


@dataclass(frozen=True)
class AuditReport:
    passed: bool
    overlap: int
    offending_rows: tuple[int, ...]
    fingerprint: str

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "overlap": self.overlap,
            "offending_rows": list(self.offending_rows),
            "fingerprint": self.fingerprint,
        }


def leakage_audit(f: FittedImputer, estimation: np.ndarray) -> AuditReport:
    """Fail iff any estimation row was used to fit ``f``."""
    hits = np.intersect1d(np.asarray(f.training_rows, dtype=np.int64), np.asarray(estimation, dtype=np.int64))
    return AuditReport(hits.size == 0, int(hits.size), tuple(int(i) for i in hits[:10]), f.fingerprint)

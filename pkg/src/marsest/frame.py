"""Tabular data model, CSV ingestion, and role binding.

A :class:`Table` is a set of equal-length numpy columns. Binding columns to
roles with :func:`bind_roles` validates the assumptions that can be checked
from the data itself: bounded annotation scores, labels present exactly on
annotated rows, and at least one annotated row.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataValidationError

REAL = "real"
INTEGER = "integer"
BOOLEAN = "boolean"
TEXT = "text"
COLUMN_TYPES = (REAL, INTEGER, BOOLEAN, TEXT)

_TRUE = {"1", "true", "True", "TRUE"}
_FALSE = {"0", "false", "False", "FALSE"}


@dataclass(frozen=True)
class Table:
    """Immutable column store. Missing reals are NaN."""

    names: tuple[str, ...]
    columns: Mapping[str, np.ndarray]
    types: Mapping[str, str]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            dupes = sorted({n for n in self.names if self.names.count(n) > 1})
            raise DataValidationError(
                f"duplicate column names: {dupes}", module="frame", rule="duplicate-header", columns=dupes
            )
        lengths = {len(self.columns[n]) for n in self.names}
        if len(lengths) > 1:
            raise DataValidationError(
                "columns have unequal lengths", module="frame", rule="ragged-columns"
            )
        for n in self.names:
            self.columns[n].setflags(write=False)

    @property
    def n_rows(self) -> int:
        return len(self.columns[self.names[0]]) if self.names else 0

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise DataValidationError(
                f"no column named {name!r}", module="frame", rule="missing-column", column=name
            ) from None

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    @classmethod
    def from_columns(cls, columns: Mapping[str, Sequence], types: Mapping[str, str] | None = None) -> "Table":
        """Build a table from in-memory vectors, inferring types where not given."""
        types = dict(types or {})
        arrays: dict[str, np.ndarray] = {}
        for name, values in columns.items():
            arr = np.asarray(values)
            kind = types.get(name) or _dtype_kind(arr)
            arrays[name] = _coerce_array(arr, kind)
            types[name] = kind
        return cls(tuple(columns), arrays, types)


def _dtype_kind(arr: np.ndarray) -> str:
    if arr.dtype == bool:
        return BOOLEAN
    if np.issubdtype(arr.dtype, np.integer):
        return INTEGER
    if np.issubdtype(arr.dtype, np.floating):
        return REAL
    return TEXT


def _coerce_array(arr: np.ndarray, kind: str) -> np.ndarray:
    if kind == REAL:
        return np.array(arr, dtype=np.float64)
    if kind == INTEGER:
        return np.array(arr, dtype=np.int64)
    if kind == BOOLEAN:
        return np.array(arr, dtype=bool)
    return np.array(arr, dtype=object)


def _parse_cell(cell: str, kind: str):
    if kind == TEXT:
        return cell
    if kind == REAL:
        return float("nan") if cell == "" else float(cell)
    if kind == INTEGER:
        if cell == "" or cell.strip() != cell:
            raise ValueError(cell)
        return int(cell)
    if kind == BOOLEAN:
        if cell in _TRUE:
            return True
        if cell in _FALSE:
            return False
        raise ValueError(cell)
    raise ConfigError(f"unknown column type {kind!r}", module="frame", rule="type-hint", type=kind)


def _is_int(cell: str) -> bool:
    try:
        int(cell)
    except ValueError:
        return False
    return cell.strip() == cell


def _is_real(cell: str) -> bool:
    if cell == "":
        return True
    if "," in cell or cell.strip() != cell:
        return False
    try:
        float(cell)
    except ValueError:
        return False
    return True


def _infer_kind(cells: list[str]) -> str:
    if cells and all(_is_int(c) for c in cells):
        return INTEGER
    if all(_is_real(c) for c in cells):
        return REAL
    return TEXT


def load_csv(path: str | Path, types: Mapping[str, str] | None = None) -> Table:
    """Read a header-first, UTF-8, RFC-4180 style CSV file.

    Columns are typed from ``types`` where hinted, otherwise inferred: all
    cells integers -> integer; all cells numeric or empty -> real (empty is
    NaN); anything else -> text. Parsing never consults the locale.
    """
    types = dict(types or {})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"input file not found: {path}", module="frame", rule="missing-file", path=str(path))
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError("empty file: header row is mandatory", module="frame", rule="missing-header") from None
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise DataValidationError(
                f"duplicate header names: {dupes}", module="frame", rule="duplicate-header", columns=dupes
            )
        unknown = set(types) - set(header)
        if unknown:
            raise ConfigError(
                f"type hints for unknown columns: {sorted(unknown)}", module="frame", rule="type-hint"
            )
        rows: list[list[str]] = []
        for row in reader:
            if len(row) != len(header):
                raise DataValidationError(
                    f"line {reader.line_num}: expected {len(header)} fields, found {len(row)}",
                    module="frame",
                    rule="ragged-row",
                    line=reader.line_num,
                )
            rows.append(row)

    columns: dict[str, np.ndarray] = {}
    kinds: dict[str, str] = {}
    for j, name in enumerate(header):
        cells = [r[j] for r in rows]
        kind = types.get(name) or _infer_kind(cells)
        values = []
        for i, cell in enumerate(cells):
            try:
                values.append(_parse_cell(cell, kind))
            except ValueError:
                raise DataValidationError(
                    f"line {i + 2}: cannot parse {cell!r} in column {name!r} as {kind}",
                    module="frame",
                    rule="unparseable-cell",
                    line=i + 2,
                    column=name,
                ) from None
        columns[name] = _coerce_array(np.array(values, dtype=object), kind) if values else _coerce_array(np.array([]), kind)
        kinds[name] = kind
    return Table(tuple(header), columns, kinds)


def format_real(x: float) -> str:
    """Shortest text that round-trips, capped at 17 significant digits."""
    if math.isnan(x):
        return ""
    return repr(float(x))


def write_csv(table: Table, path: str | Path) -> None:
    """Write ``table`` as CSV with LF line endings; missing reals are empty."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.names)
        cols = []
        for name in table.names:
            kind = table.types[name]
            col = table.columns[name]
            if kind == REAL:
                cols.append([format_real(v) for v in col])
            elif kind == BOOLEAN:
                cols.append(["1" if v else "0" for v in col])
            elif kind == INTEGER:
                cols.append([str(int(v)) for v in col])
            else:
                cols.append([str(v) for v in col])
        for i in range(table.n_rows):
            writer.writerow([c[i] for c in cols])


class Role(str, enum.Enum):
    LABEL = "label"
    ANNOTATED = "annotated"
    SCORE = "score"
    PREDICTION = "prediction"
    FEATURE = "feature"
    CONTEXT = "context"
    OUTCOME = "outcome"
    INSTRUMENT = "instrument"
    CONTROL = "control"
    COHORT = "cohort"
    NEVER_TREATED = "never_treated"
    PERIOD = "period"
    TREATED = "treated"
    RUNNING = "running"
    GROUP = "group"
    CLUSTER = "cluster"
    WEIGHT = "weight"


REPEATABLE = frozenset({Role.FEATURE, Role.CONTEXT, Role.CONTROL})
ALWAYS_REQUIRED = (Role.LABEL, Role.ANNOTATED, Role.SCORE)
# Keys that may legitimately share one column.
_COMPATIBLE = {
    frozenset({Role.GROUP, Role.CLUSTER}),
    frozenset({Role.GROUP, Role.PERIOD}),
    frozenset({Role.PERIOD, Role.CLUSTER}),
    frozenset({Role.FEATURE, Role.CONTEXT}),
    frozenset({Role.FEATURE, Role.CONTROL}),
    frozenset({Role.CONTEXT, Role.CONTROL}),
}


@dataclass(frozen=True)
class RoleBinding:
    """Map from role to column name (a tuple of names for repeatable roles)."""

    roles: Mapping[Role, str | tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        normalized: dict[Role, str | tuple[str, ...]] = {}
        for role, cols in self.roles.items():
            role = Role(role)
            if role in REPEATABLE:
                normalized[role] = (cols,) if isinstance(cols, str) else tuple(cols)
            else:
                if not isinstance(cols, str):
                    raise ConfigError(
                        f"role {role.value} takes exactly one column", module="frame", rule="binding"
                    )
                normalized[role] = cols
        object.__setattr__(self, "roles", normalized)
        owners: dict[str, set[Role]] = {}
        for role, cols in normalized.items():
            for c in (cols,) if isinstance(cols, str) else cols:
                owners.setdefault(c, set()).add(role)
        for col, rs in owners.items():
            for a in rs:
                for b in rs:
                    if a != b and frozenset({a, b}) not in _COMPATIBLE:
                        raise ConfigError(
                            f"column {col!r} bound to conflicting roles {a.value} and {b.value}",
                            module="frame",
                            rule="conflicting-roles",
                            column=col,
                        )

    @classmethod
    def of(cls, **kwargs) -> "RoleBinding":
        return cls({Role(k): v for k, v in kwargs.items() if v is not None and v != ()})

    def get(self, role: Role):
        return self.roles.get(Role(role))

    def __contains__(self, role) -> bool:
        return Role(role) in self.roles

    def columns(self, role: Role) -> tuple[str, ...]:
        cols = self.roles.get(Role(role), ())
        return (cols,) if isinstance(cols, str) else tuple(cols)

    def to_dict(self) -> dict[str, str | list[str]]:
        return {r.value: (list(c) if isinstance(c, tuple) else c) for r, c in self.roles.items()}

    @classmethod
    def from_dict(cls, mapping: Mapping[str, str | Sequence[str]]) -> "RoleBinding":
        roles = {}
        for key, value in mapping.items():
            try:
                role = Role(key)
            except ValueError:
                raise ConfigError(f"unknown role {key!r}", module="frame", rule="binding", role=key) from None
            roles[role] = value if isinstance(value, str) else tuple(value)
        return cls(roles)


def load_binding(path: str | Path) -> tuple[RoleBinding, float]:
    """Read a JSON document ``{"roles": {role: column}, "eta": float}``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read binding file: {exc}", module="frame", rule="binding") from None
    eta = float(doc.get("eta", DEFAULT_ETA))
    return RoleBinding.from_dict(doc.get("roles", {})), eta


DEFAULT_ETA = 1e-6


@dataclass(frozen=True)
class RoleBoundDataset:
    """A table whose columns are bound to roles and validated."""

    table: Table
    binding: RoleBinding
    eta: float
    label: np.ndarray
    annotated: np.ndarray
    score: np.ndarray

    @property
    def n(self) -> int:
        return self.table.n_rows

    def has(self, role: Role) -> bool:
        return Role(role) in self.binding

    def column(self, role: Role, *, dtype=np.float64) -> np.ndarray:
        """The single column bound to ``role`` (raises if unbound)."""
        self.require(role)
        return np.asarray(self.table[self.binding.get(role)], dtype=dtype)

    def matrix(self, *roles: Role) -> np.ndarray:
        """Stack every column bound to ``roles`` into an n-by-p float matrix."""
        names = [c for r in roles for c in self.binding.columns(r)]
        if not names:
            return np.empty((self.n, 0))
        return np.column_stack([np.asarray(self.table[c], dtype=np.float64) for c in names])

    def require(self, *roles: Role, estimator: str = "") -> None:
        missing = [Role(r).value for r in roles if Role(r) not in self.binding]
        if missing:
            who = f"{estimator} " if estimator else ""
            raise ConfigError(
                f"{who}requires role(s) {', '.join(missing)} to be bound",
                module="frame",
                rule="missing-role",
                roles=missing,
            )

    @property
    def all_rows(self) -> np.ndarray:
        return np.arange(self.n)


def bind_roles(
    table: Table, binding: RoleBinding, eta: float = DEFAULT_ETA, *, strict: bool = False
) -> RoleBoundDataset:
    """Validate ``table`` against ``binding`` and return a dataset.

    Raises :class:`DataValidationError` on scores outside ``[eta, 1]``,
    annotated rows without a label, or no annotated rows at all. A label on
    an unannotated row is dropped with a warning, or rejected when
    ``strict``.
    """
    if not (0.0 < eta < 1.0):
        raise ConfigError(f"eta must lie in (0, 1), got {eta}", module="frame", rule="eta")
    missing_roles = [r.value for r in ALWAYS_REQUIRED if r not in binding.roles]
    if missing_roles:
        raise ConfigError(
            f"binding lacks required role(s): {', '.join(missing_roles)}",
            module="frame",
            rule="missing-role",
            roles=missing_roles,
        )
    for role, cols in binding.roles.items():
        for c in (cols,) if isinstance(cols, str) else cols:
            if c not in table:
                raise ConfigError(
                    f"role {role.value} bound to missing column {c!r}",
                    module="frame",
                    rule="missing-column",
                    role=role.value,
                    column=c,
                )

    a_raw = table[binding.get(Role.ANNOTATED)]
    try:
        a_num = np.asarray(a_raw, dtype=np.float64)
    except (TypeError, ValueError):
        raise DataValidationError("annotation column is not 0/1", module="frame", rule="annotation-binary") from None
    bad = np.flatnonzero(~np.isin(a_num, (0.0, 1.0)))
    if bad.size:
        raise DataValidationError(
            f"row {int(bad[0])}: annotation indicator must be 0 or 1",
            module="frame",
            rule="annotation-binary",
            row=int(bad[0]),
        )
    annotated = a_num == 1.0

    try:
        score = np.asarray(table[binding.get(Role.SCORE)], dtype=np.float64)
    except (TypeError, ValueError):
        raise DataValidationError("score column is not numeric", module="frame", rule="overlap") from None
    bad = np.flatnonzero(~((score >= eta) & (score <= 1.0)))
    if bad.size:
        i = int(bad[0])
        raise DataValidationError(
            f"row {i}: annotation score {score[i]!r} outside [{eta}, 1]; overlap is violated "
            "(a deterministic, e.g. keyword-filtered, annotation design cannot be debiased)",
            module="frame",
            rule="overlap",
            row=i,
            score=float(score[i]),
        )

    try:
        label = np.array(table[binding.get(Role.LABEL)], dtype=np.float64)
    except (TypeError, ValueError):
        raise DataValidationError("label column is not numeric", module="frame", rule="label-numeric") from None
    present = ~np.isnan(label)
    missing_label = np.flatnonzero(annotated & ~present)
    if missing_label.size:
        i = int(missing_label[0])
        raise DataValidationError(
            f"row {i}: annotated row has no label (labels must be observed exactly when annotated)",
            module="frame",
            rule="consistency",
            row=i,
        )
    stray = np.flatnonzero(~annotated & present)
    if stray.size:
        if strict:
            raise DataValidationError(
                f"row {int(stray[0])}: unannotated row carries a label",
                module="frame",
                rule="stray-label",
                row=int(stray[0]),
                count=int(stray.size),
            )
        warnings.warn(
            f"{stray.size} unannotated row(s) carry a label; treating them as unlabeled",
            stacklevel=2,
        )
        label[stray] = np.nan
    if not annotated.any():
        raise DataValidationError("no annotated rows", module="frame", rule="no-annotations")

    for arr in (label, annotated, score):
        arr.setflags(write=False)
    return RoleBoundDataset(table, binding, float(eta), label, annotated, score)


def as_indices(indices: Iterable[int] | np.ndarray | None, n: int) -> np.ndarray:
    """Normalize an index set to a sorted, duplicate-free int64 array."""
    if indices is None:
        return np.arange(n, dtype=np.int64)
    idx = np.unique(np.asarray(indices, dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise DataValidationError("row index out of range", module="frame", rule="index-range")
    return idx

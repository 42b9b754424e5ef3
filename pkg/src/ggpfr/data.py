"""Containers and CSV ingestion for multi-batch functional data.

Data arrive in long (tidy) form: one row per observation with columns
``batch_id, t, z, x1..xQ, u1..up`` and optionally ``w1..wr`` (random-effect
designs) and ``cluster_id``.  Scalar covariates are replicated per row in
the file but stored once per batch; any within-batch disagreement is an
error rather than something to average away.  All containers are immutable
after construction and safe to share across workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import SchemaError, ValidationError
from .families import ObservationFamily


def _frozen(a, dtype=float):
    arr = np.asarray(a, dtype=dtype)
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FunctionalBatch:
    """One subject's observations on its own time grid.

    ``times`` must be strictly increasing; ``covariates`` is the N x Q
    matrix of functional covariate rows, ``scalar_covariates`` the length-p
    vector shared by the whole batch, and ``re_covariates`` an optional
    N x r random-effect design.
    """

    batch_id: str
    times: np.ndarray
    responses: np.ndarray
    covariates: np.ndarray
    scalar_covariates: np.ndarray
    re_covariates: np.ndarray | None = None

    def __post_init__(self):
        t = _frozen(self.times)
        z = _frozen(self.responses)
        x = _frozen(np.atleast_2d(self.covariates))
        u = _frozen(np.atleast_1d(self.scalar_covariates))
        if t.ndim != 1:
            raise ValidationError("times must be a vector")
        n = t.size
        if x.shape[0] != n and x.shape == (1, n):
            x = _frozen(x.T)
        if z.shape != (n,) or x.shape[0] != n:
            raise ValidationError(
                f"batch {self.batch_id}: row counts disagree "
                f"(times {n}, responses {z.shape}, covariates {x.shape})")
        for name, arr in (("times", t), ("responses", z), ("covariates", x),
                          ("scalar_covariates", u)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"batch {self.batch_id}: non-finite {name}")
        if np.any(np.diff(t) <= 0):
            raise ValidationError(f"batch {self.batch_id}: times must be strictly increasing")
        w = self.re_covariates
        if w is not None:
            w = _frozen(np.atleast_2d(w))
            if w.shape[0] != n or not np.all(np.isfinite(w)):
                raise ValidationError(f"batch {self.batch_id}: bad re_covariates")
            object.__setattr__(self, "re_covariates", w)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "responses", z)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "scalar_covariates", u)

    def __eq__(self, other):
        if not isinstance(other, FunctionalBatch):
            return NotImplemented
        same_w = (self.re_covariates is None) == (other.re_covariates is None)
        if same_w and self.re_covariates is not None:
            same_w = np.array_equal(self.re_covariates, other.re_covariates)
        return (self.batch_id == other.batch_id
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.responses, other.responses)
                and np.array_equal(self.covariates, other.covariates)
                and np.array_equal(self.scalar_covariates, other.scalar_covariates)
                and same_w)

    def __hash__(self):
        return hash((self.batch_id, self.times.tobytes()))

    @property
    def n_obs(self) -> int:
        return self.times.size

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]


@dataclass(frozen=True, eq=False)
class Dataset:
    """A family-tagged collection of batches with consistent dimensions."""

    batches: tuple
    family_tag: str
    covariate_names: tuple = ()

    def __post_init__(self):
        batches = tuple(self.batches)
        if not batches:
            raise ValidationError("dataset needs at least one batch")
        ids = [b.batch_id for b in batches]
        if len(set(ids)) != len(ids):
            raise ValidationError("batch ids must be unique")
        q = batches[0].n_covariates
        p = batches[0].scalar_covariates.size
        r = None if batches[0].re_covariates is None else batches[0].re_covariates.shape[1]
        for b in batches:
            rb = None if b.re_covariates is None else b.re_covariates.shape[1]
            if b.n_covariates != q or b.scalar_covariates.size != p or rb != r:
                raise ValidationError(f"batch {b.batch_id}: inconsistent dimensions")
        object.__setattr__(self, "batches", batches)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.family_tag == other.family_tag
                and self.covariate_names == other.covariate_names
                and self.batches == other.batches)

    def __hash__(self):
        return hash((self.family_tag, tuple(b.batch_id for b in self.batches)))

    @property
    def n_batches(self) -> int:
        return len(self.batches)

    @property
    def n_covariates(self) -> int:
        return self.batches[0].n_covariates

    @property
    def n_scalar_covariates(self) -> int:
        return self.batches[0].scalar_covariates.size

    def pooled_times(self) -> np.ndarray:
        return np.concatenate([b.times for b in self.batches])

    def validate_family(self, family: ObservationFamily) -> None:
        for b in self.batches:
            try:
                family.validate_responses(b.responses)
            except ValidationError as exc:
                raise ValidationError(f"batch {b.batch_id}: {exc}") from exc


@dataclass(frozen=True)
class CsvSchema:
    """Column-name mapping for long-format CSV files."""

    family: ObservationFamily
    x_cols: tuple
    u_cols: tuple
    w_cols: tuple = ()
    batch_col: str = "batch_id"
    time_col: str = "t"
    response_col: str = "z"
    cluster_col: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "x_cols", tuple(self.x_cols))
        object.__setattr__(self, "u_cols", tuple(self.u_cols))
        object.__setattr__(self, "w_cols", tuple(self.w_cols))


def _parse_float(text, col, row_no):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise SchemaError(f"row {row_no}: column {col!r} is not a number: {text!r}")
    if not math.isfinite(v):
        raise ValidationError(f"row {row_no}: column {col!r} must be finite, got {text!r}")
    return v


def read_rows(path, schema: CsvSchema):
    """Parse a long-format CSV into per-batch row groups (internal helper).

    Returns an ordered dict batch_id -> list of row dicts with float fields,
    preserving first-seen batch order.
    """
    groups: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        needed = [schema.batch_col, schema.time_col, schema.response_col,
                  *schema.x_cols, *schema.u_cols, *schema.w_cols]
        if schema.cluster_col:
            needed.append(schema.cluster_col)
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        for row_no, row in enumerate(reader, start=2):
            rec = {
                "batch": row[schema.batch_col],
                "t": _parse_float(row[schema.time_col], schema.time_col, row_no),
                "z": _parse_float(row[schema.response_col], schema.response_col, row_no),
                "x": [_parse_float(row[c], c, row_no) for c in schema.x_cols],
                "u": [_parse_float(row[c], c, row_no) for c in schema.u_cols],
                "w": [_parse_float(row[c], c, row_no) for c in schema.w_cols],
                "row_no": row_no,
            }
            if schema.cluster_col:
                rec["cluster"] = row[schema.cluster_col]
            groups.setdefault(rec["batch"], []).append(rec)
    if not groups:
        raise ValidationError(f"{path}: no data rows")
    return groups


def _batch_from_rows(batch_id, rows, schema: CsvSchema) -> FunctionalBatch:
    rows = sorted(rows, key=lambda r: r["t"])
    u0 = rows[0]["u"]
    for r in rows:
        if r["u"] != u0:
            raise ValidationError(
                f"batch {batch_id}: scalar covariates change within the batch "
                f"(row {r['row_no']})")
    times = [r["t"] for r in rows]
    z = [r["z"] for r in rows]
    x = [r["x"] for r in rows]
    w = [r["w"] for r in rows] if schema.w_cols else None
    try:
        batch = FunctionalBatch(batch_id, times, z, x, u0, re_covariates=w)
    except ValidationError as exc:
        raise ValidationError(str(exc)) from exc
    try:
        schema.family.validate_responses(batch.responses)
    except ValidationError as exc:
        bad = np.asarray(z, dtype=float)
        raise ValidationError(
            f"batch {batch_id}: {exc} (rows {[r['row_no'] for r in rows]})"
            if bad.size <= 6 else f"batch {batch_id}: {exc}") from exc
    return batch


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Load a long-format CSV into a Dataset, grouped by batch and sorted by t."""
    groups = read_rows(path, schema)
    batches = [_batch_from_rows(bid, rows, schema) for bid, rows in groups.items()]
    return Dataset(tuple(batches), family_tag=schema.family.kind,
                   covariate_names=schema.x_cols)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_csv(dataset: Dataset, path, schema: CsvSchema | None = None,
             cluster_of: dict | None = None) -> None:
    """Write a Dataset back to long-format CSV (inverse of load_csv)."""
    q = dataset.n_covariates
    p = dataset.n_scalar_covariates
    x_cols = list(dataset.covariate_names) or [f"x{i + 1}" for i in range(q)]
    u_cols = [f"u{i + 1}" for i in range(p)]
    first = dataset.batches[0]
    r = 0 if first.re_covariates is None else first.re_covariates.shape[1]
    w_cols = [f"w{i + 1}" for i in range(r)]
    if schema is not None:
        x_cols, u_cols, w_cols = list(schema.x_cols), list(schema.u_cols), list(schema.w_cols)
    header = ["batch_id", "t", "z", *x_cols, *u_cols, *w_cols]
    if cluster_of:
        header.append("cluster_id")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for b in dataset.batches:
            for i in range(b.n_obs):
                row = [b.batch_id, _fmt(b.times[i]), _fmt(b.responses[i])]
                row += [_fmt(v) for v in b.covariates[i]]
                row += [_fmt(v) for v in b.scalar_covariates]
                if r:
                    row += [_fmt(v) for v in b.re_covariates[i]]
                if cluster_of:
                    row.append(cluster_of[b.batch_id])
                writer.writerow(row)

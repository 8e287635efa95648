"""Dataset ingestion, validation, and summaries for observed (Y, D, Z, X) samples."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InputError

__all__ = ["Sample", "SampleSummary", "load_csv", "write_csv", "summarize"]

# Cells treated as missing during CSV ingestion (listwise deletion).
_MISSING_TOKENS = {"", ".", "na", "nan", "n/a", "null", "none"}


@dataclass(frozen=True)
class Sample:
    """Validated observation set: outcomes y >= 0, treatments d, optional z and x.

    Immutable after construction; safe to share across threads. Censoring is
    an exact mass point, so y values in (0, 1e-12) are kept as is and only
    y == 0.0 counts as censored.
    """

    y: np.ndarray
    d: np.ndarray
    z: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None
    x_names: tuple[str, ...] = ()
    dropped_rows: int = 0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        d = np.asarray(self.d, dtype=float)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        if y.ndim != 1 or d.ndim != 1:
            raise InputError("y and d must be one-dimensional")
        n = y.shape[0]
        if n == 0:
            raise InputError("sample has zero usable rows")
        if d.shape[0] != n:
            raise InputError(f"column length mismatch: y has {n} rows, d has {d.shape[0]}")
        if self.z is not None:
            z = np.asarray(self.z, dtype=float)
            if z.shape != (n,):
                raise InputError(f"column length mismatch: z has {z.shape[0]} rows, expected {n}")
            object.__setattr__(self, "z", z)
        if self.x is not None:
            x = np.asarray(self.x, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            if x.shape[0] != n:
                raise InputError(f"covariate matrix has {x.shape[0]} rows, expected {n}")
            object.__setattr__(self, "x", x)
            if not self.x_names:
                object.__setattr__(self, "x_names",
                                   tuple(f"x{j}" for j in range(x.shape[1])))
        for name, col in (("y", y), ("d", d), ("z", self.z)):
            if col is not None and np.isnan(col).any():
                row = int(np.flatnonzero(np.isnan(col))[0])
                raise InputError(f"row {row}: {name} is NaN after validation")
        if self.x is not None and np.isnan(self.x).any():
            row = int(np.flatnonzero(np.isnan(self.x).any(axis=1))[0])
            raise InputError(f"row {row}: covariate is NaN after validation")
        neg = np.flatnonzero(y < 0.0)
        if neg.size:
            raise InputError(f"row {int(neg[0])}: y must be nonnegative, got {y[neg[0]]}")

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def censoring_fraction(self) -> float:
        return float(np.count_nonzero(self.y == 0.0)) / self.n

    def require_censoring_interior(self, context: str) -> None:
        """Estimation and testing need a censoring fraction strictly in (0, 1)."""
        frac = self.censoring_fraction
        if frac == 0.0:
            raise InputError(f"{context}: no censored observations (degenerate Tobit)")
        if frac == 1.0:
            raise InputError(f"{context}: every observation is censored")


@dataclass(frozen=True)
class SampleSummary:
    n: int
    censoring_fraction: float
    dropped_rows: int
    columns: dict = field(default_factory=dict)


def _column_stats(v: np.ndarray) -> dict:
    v = np.sort(v)          # exact row-order invariance
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {
        "mean": float(np.mean(v)),
        "sd": float(np.std(v, ddof=1)) if v.size > 1 else 0.0,
        "min": float(q[0]),
        "q25": float(q[1]),
        "median": float(q[2]),
        "q75": float(q[3]),
        "max": float(q[4]),
    }


def summarize(sample: Sample) -> SampleSummary:
    """Deterministic, row-order invariant summary with the exact censoring count."""
    cols = {"y": _column_stats(sample.y), "d": _column_stats(sample.d)}
    if sample.z is not None:
        cols["z"] = _column_stats(sample.z)
    if sample.x is not None:
        for j, name in enumerate(sample.x_names):
            cols[name] = _column_stats(sample.x[:, j])
    return SampleSummary(
        n=sample.n,
        censoring_fraction=sample.censoring_fraction,
        dropped_rows=sample.dropped_rows,
        columns=cols,
    )


def _parse_cell(raw: str, column: str, line_no: int) -> float | None:
    text = raw.strip()
    if text.lower() in _MISSING_TOKENS:
        return None
    try:
        return float(text)
    except ValueError:
        raise InputError(
            f"line {line_no}: column '{column}' has non-numeric value {raw!r}"
        ) from None


def load_csv(
    path,
    y: str,
    d: str,
    z: Optional[str] = None,
    x: Sequence[str] = (),
) -> Sample:
    """Load a UTF-8, comma-separated, headered file into a validated Sample.

    Rows with missing values in any mapped column are dropped (listwise) and
    counted in ``Sample.dropped_rows``; non-numeric cells are an error naming
    the offending line.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"input file does not exist: {path}")
    wanted = [y, d] + ([z] if z else []) + list(x)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise InputError(f"{path}: missing column(s) {missing}; header is {header}")
        idx = {c: header.index(c) for c in wanted}
        rows, dropped = [], 0
        for line_no, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            vals = []
            for col in wanted:
                if idx[col] >= len(record):
                    vals.append(None)
                    continue
                vals.append(_parse_cell(record[idx[col]], col, line_no))
            if any(v is None for v in vals):
                dropped += 1
                continue
            rows.append((line_no, vals))
    if not rows:
        raise InputError(f"{path}: zero usable rows after dropping missing values")

    data = np.array([vals for _, vals in rows], dtype=float)
    y_col = data[:, 0]
    bad = np.flatnonzero(y_col < 0.0)
    if bad.size:
        line = rows[int(bad[0])][0]
        raise InputError(f"line {line}: y must be nonnegative, got {y_col[bad[0]]}")
    k = 2
    z_col = None
    if z:
        z_col = data[:, k]
        k += 1
    x_mat = data[:, k:] if x else None
    return Sample(
        y=y_col,
        d=data[:, 1],
        z=z_col,
        x=x_mat,
        x_names=tuple(x),
        dropped_rows=dropped,
    )


def write_csv(sample: Sample, path) -> None:
    """Write a Sample back to CSV; floats use shortest round-trip formatting."""
    path = Path(path)
    header = ["y", "d"]
    cols = [sample.y, sample.d]
    if sample.z is not None:
        header.append("z")
        cols.append(sample.z)
    if sample.x is not None:
        header.extend(sample.x_names)
        cols.extend(sample.x[:, j] for j in range(sample.x.shape[1]))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(sample.n):
            writer.writerow([repr(float(c[i])) for c in cols])

"""Dataset container, censoring bookkeeping, CSV ingestion, and validation.

A :class:`Dataset` holds a response ``y``, one detection-limit-censored
covariate ``x`` (value meaningful only where observed), uncensored primary
covariates ``u``, surrogates ``z``, and the single detection limit ``delta``.
Instances are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InputError, ModelError, ValidationError

_NA_TOKENS = {"", "na", "nan", "n/a", "null", "none", "."}


@dataclass(frozen=True)
class Dataset:
    """Observed data for one analysis; all arrays share length ``n``."""

    y: np.ndarray
    x_value: np.ndarray
    x_observed: np.ndarray
    u: np.ndarray
    z: np.ndarray
    delta: float

    def __post_init__(self):
        def as_columns(arr):
            arr = np.asarray(arr, dtype=float)
            return arr.reshape(-1, 1) if arr.ndim == 1 else arr

        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "x_value", np.asarray(self.x_value, dtype=float))
        object.__setattr__(self, "x_observed", np.asarray(self.x_observed, dtype=bool))
        object.__setattr__(self, "u", as_columns(self.u))
        object.__setattr__(self, "z", as_columns(self.z))
        object.__setattr__(self, "delta", float(self.delta))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_obs(self) -> int:
        return int(np.count_nonzero(self.x_observed))

    @property
    def censor_fraction(self) -> float:
        return 1.0 - self.n_obs / self.n


@dataclass(frozen=True)
class ColumnSpec:
    """Maps CSV header names to model roles.

    ``delta`` is either a numeric constant or the name of a column whose
    entries must all be equal (per-row detection limits are rejected).
    ``observed`` optionally names a 0/1 indicator column cross-checked against
    ``x <= delta`` during validation.
    """

    y: str
    x: str
    delta: float | str
    u: tuple[str, ...] = ()
    z: tuple[str, ...] = ()
    observed: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "u", tuple(self.u))
        object.__setattr__(self, "z", tuple(self.z))


@dataclass(frozen=True)
class Violation:
    code: str
    row: Optional[int]
    message: str

    def to_dict(self) -> dict:
        return {"code": self.code, "row": self.row, "message": self.message}


@dataclass(frozen=True)
class FitConfig:
    """User-facing knobs shared by the fitting and simulation paths."""

    link: str = "identity"
    working_variance: Optional[str] = None
    auxiliary: str = "parametric_normal"
    transform: Optional[str] = None
    tau_override: Optional[float] = None
    normalize_htilde: bool = True
    sscf_folds: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.link not in ("identity", "logit"):
            raise ModelError(f"unknown link '{self.link}'")
        if self.auxiliary not in ("parametric_normal", "semiparametric_aft"):
            raise ModelError(f"unknown auxiliary model '{self.auxiliary}'")
        if self.working_variance is None:
            wv = "bernoulli" if self.link == "logit" else "constant"
            object.__setattr__(self, "working_variance", wv)
        if self.working_variance not in ("constant", "bernoulli"):
            raise ModelError(f"unknown working variance '{self.working_variance}'")
        if self.transform is not None and self.transform not in ("negate", "neg_exp"):
            raise ModelError(f"unknown transform '{self.transform}'")
        if self.auxiliary == "semiparametric_aft" and self.transform is None:
            raise ModelError("semiparametric_aft requires a transform")
        if self.sscf_folds != 2:
            raise ModelError("sscf_folds is fixed at 2")


def validate(d: Dataset) -> list[Violation]:
    """Return all invariant violations (empty list when the dataset is clean)."""
    out: list[Violation] = []
    n = d.n
    for name, arr in (("x_value", d.x_value), ("x_observed", d.x_observed)):
        if arr.shape[0] != n:
            out.append(Violation("length-mismatch", None, f"{name} has length {arr.shape[0]}, expected {n}"))
    for name, mat in (("u", d.u), ("z", d.z)):
        if mat.shape[0] != n:
            out.append(Violation("length-mismatch", None, f"{name} has {mat.shape[0]} rows, expected {n}"))
    if out:
        return out

    if not np.isfinite(d.delta):
        out.append(Violation("non-finite", None, "delta is not finite"))
    for name, mat in (("y", d.y[:, None]), ("u", d.u), ("z", d.z)):
        bad = ~np.isfinite(mat)
        for row in np.nonzero(bad.any(axis=1))[0]:
            out.append(Violation("non-finite", int(row), f"non-finite value in {name} at row {row}"))
    bad_x = d.x_observed & ~np.isfinite(d.x_value)
    for row in np.nonzero(bad_x)[0]:
        out.append(Violation("non-finite", int(row), f"non-finite observed x at row {row}"))

    mismatch = d.x_observed & (d.x_value <= d.delta) & np.isfinite(d.x_value)
    for row in np.nonzero(mismatch)[0]:
        out.append(
            Violation("censor-flag-mismatch", int(row), f"row {row} flagged observed but x <= delta")
        )

    n_obs = d.n_obs
    if n_obs == 0:
        out.append(Violation("no-observed-x", None, "every x is censored"))
    else:
        needed = d.z.shape[1] + 2
        if n_obs < needed:
            out.append(
                Violation(
                    "too-few-observed",
                    None,
                    f"{n_obs} observed x rows; auxiliary fitting needs at least {needed}",
                )
            )
    return out


def check_valid(d: Dataset) -> Dataset:
    """Raise :class:`ValidationError` unless ``d`` passes :func:`validate`."""
    violations = validate(d)
    if violations:
        raise ValidationError(violations)
    return d


def _parse_cell(raw: str, row: int, col: str) -> float:
    token = raw.strip()
    if token.lower() in _NA_TOKENS:
        raise InputError(f"missing value at row {row}, column '{col}'")
    try:
        return float(token)
    except ValueError:
        raise InputError(f"non-numeric value '{token}' at row {row}, column '{col}'") from None


def load_csv(path, spec: ColumnSpec, check: bool = True) -> Dataset:
    """Read a UTF-8, comma-separated file with a header row into a Dataset.

    Rows whose censored covariate is at or below delta get
    ``x_observed = False`` regardless of the recorded placeholder value.
    With ``check=True`` (default) the result must pass :func:`validate`.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read '{path}': {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [spec.y, spec.x, *spec.u, *spec.z]
        if isinstance(spec.delta, str):
            needed.append(spec.delta)
        if spec.observed is not None:
            needed.append(spec.observed)
        for col in needed:
            if col not in header:
                raise InputError(f"missing column '{col}'")
        rows = list(reader)
    if not rows:
        raise InputError(f"'{path}' contains no data rows")

    n = len(rows)
    y = np.empty(n)
    x = np.empty(n)
    u = np.empty((n, len(spec.u)))
    z = np.empty((n, len(spec.z)))
    flags = np.empty(n, dtype=bool) if spec.observed is not None else None
    deltas = np.empty(n)
    for i, row in enumerate(rows):
        y[i] = _parse_cell(row[spec.y], i, spec.y)
        x[i] = _parse_cell(row[spec.x], i, spec.x)
        for j, col in enumerate(spec.u):
            u[i, j] = _parse_cell(row[col], i, col)
        for j, col in enumerate(spec.z):
            z[i, j] = _parse_cell(row[col], i, col)
        if isinstance(spec.delta, str):
            deltas[i] = _parse_cell(row[spec.delta], i, spec.delta)
        if flags is not None:
            flags[i] = _parse_cell(row[spec.observed], i, spec.observed) != 0.0

    if isinstance(spec.delta, str):
        if np.unique(deltas).size > 1:
            raise InputError(f"per-row detection limits are not supported (column '{spec.delta}')")
        delta = float(deltas[0])
    else:
        delta = float(spec.delta)

    observed = x > delta if flags is None else flags
    d = Dataset(y=y, x_value=x, x_observed=observed, u=u, z=z, delta=delta)
    if check:
        check_valid(d)
    return d


def write_csv(path, d: Dataset, spec: ColumnSpec) -> None:
    """Write ``d`` using the header names in ``spec`` (inverse of load_csv).

    Censored rows get the detection limit as the x placeholder, so a
    round-trip preserves every observed field.
    """
    delta_col = spec.delta if isinstance(spec.delta, str) else None
    header = [spec.y, spec.x, *spec.u, *spec.z]
    if delta_col is not None:
        header.append(delta_col)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(d.n):
            x_out = d.x_value[i] if d.x_observed[i] else d.delta
            row = [repr(float(d.y[i])), repr(float(x_out))]
            row += [repr(float(v)) for v in d.u[i]]
            row += [repr(float(v)) for v in d.z[i]]
            if delta_col is not None:
                row.append(repr(float(d.delta)))
            writer.writerow(row)


def take_rows(d: Dataset, idx: np.ndarray) -> Dataset:
    """Row subset of a dataset (same delta)."""
    idx = np.asarray(idx, dtype=int)
    return Dataset(
        y=d.y[idx],
        x_value=d.x_value[idx],
        x_observed=d.x_observed[idx],
        u=d.u[idx],
        z=d.z[idx],
        delta=d.delta,
    )


def split_two_folds(d: Dataset, seed: int) -> tuple[Dataset, Dataset, tuple[np.ndarray, np.ndarray]]:
    """Deterministic disjoint covering split into folds of size n//2 and n - n//2.

    Raises ``ModelError('degenerate split')`` when a fold ends up with no
    observed x; callers may reseed and retry.
    """
    n = d.n
    if n < 4:
        raise ModelError("splitting needs at least 4 rows")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    idx1 = np.sort(perm[: n // 2])
    idx2 = np.sort(perm[n // 2 :])
    fold1, fold2 = take_rows(d, idx1), take_rows(d, idx2)
    if fold1.n_obs == 0 or fold2.n_obs == 0:
        raise ModelError("degenerate split")
    return fold1, fold2, (idx1, idx2)

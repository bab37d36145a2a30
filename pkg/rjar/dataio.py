"""
Data ingestion: CSV loading, instrument interaction, covariate partialling,
instrument standardisation and structural residuals under the null.
"""

import fnmatch
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import linalg

from .errors import (
    DegenerateInstrumentsError,
    DimensionError,
    DomainError,
    ParseError,
    ResourceError,
    SchemaError,
)

logger = logging.getLogger(__name__)

INTERCEPT_NAME = "_const"
DROP_RELATIVE_RMS = 1e-12


class ColumnSchema(BaseModel):
    """Assignment of CSV columns to model roles."""

    outcome: str
    endogenous: List[str] = Field(min_length=1)
    instruments: List[str] = Field(min_length=1)
    covariates: List[str] = Field(default_factory=list)
    add_intercept: bool = False
    interact: bool = False


@dataclass(frozen=True)
class Dataset:
    """Raw model inputs; W is None when there are no covariates."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    W: Optional[np.ndarray] = None
    outcome_name: str = "y"
    endogenous_names: List[str] = field(default_factory=list)
    instrument_names: List[str] = field(default_factory=list)
    covariate_names: List[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def g(self) -> int:
        return self.X.shape[1]

    @property
    def k(self) -> int:
        return self.Z.shape[1]

    @property
    def q(self) -> int:
        return 0 if self.W is None else self.W.shape[1]


@dataclass(frozen=True)
class PartialledData:
    """Covariate-residualised data with standardised instruments."""

    y_t: np.ndarray
    X_t: np.ndarray
    Z_t: np.ndarray
    scales: np.ndarray
    dropped_cols: List[int]
    q: int
    w_rank: int = 0
    instrument_names: List[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.y_t.shape[0]

    @property
    def g(self) -> int:
        return self.X_t.shape[1]

    @property
    def k_eff(self) -> int:
        return self.Z_t.shape[1]


def _as_matrix(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


def build_dataset(
    y,
    X,
    Z,
    W=None,
    outcome_name: str = "y",
    endogenous_names: Optional[Sequence[str]] = None,
    instrument_names: Optional[Sequence[str]] = None,
    covariate_names: Optional[Sequence[str]] = None,
) -> Dataset:
    """
    Validate arrays and assemble a Dataset.

    Raises:
        DimensionError: if shapes disagree or a block is empty
        DomainError: if any entry is not finite
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 2 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim != 1:
        raise DimensionError(f"y must be a vector, got shape {y.shape}")
    X = _as_matrix(X, "X")
    Z = _as_matrix(Z, "Z")
    W = None if W is None else _as_matrix(W, "W")
    if W is not None and W.shape[1] == 0:
        W = None

    n = y.shape[0]
    blocks = {"X": X, "Z": Z} if W is None else {"X": X, "Z": Z, "W": W}
    for name, block in blocks.items():
        if block.shape[0] != n:
            raise DimensionError(
                f"{name} has {block.shape[0]} rows but y has {n}"
            )
    if n < 2:
        raise DimensionError(f"need at least 2 observations, got {n}")
    if X.shape[1] < 1 or Z.shape[1] < 1:
        raise DimensionError("need at least one endogenous regressor and one instrument")

    for name, block in {"y": y, **blocks}.items():
        if not np.all(np.isfinite(block)):
            raise DomainError(f"{name} contains non-finite entries")

    return Dataset(
        y=y,
        X=X,
        Z=Z,
        W=W,
        outcome_name=outcome_name,
        endogenous_names=list(endogenous_names or [f"x{j + 1}" for j in range(X.shape[1])]),
        instrument_names=list(instrument_names or [f"z{j + 1}" for j in range(Z.shape[1])]),
        covariate_names=list(
            covariate_names or ([] if W is None else [f"w{j + 1}" for j in range(W.shape[1])])
        ),
    )


def _resolve_columns(patterns: Sequence[str], header: List[str], role: str) -> List[str]:
    """Expand glob patterns against the header, keeping header order."""
    resolved = []
    for pattern in patterns:
        if any(ch in pattern for ch in "*?["):
            matches = [col for col in header if fnmatch.fnmatchcase(col, pattern)]
            if not matches:
                raise SchemaError(f"{role} pattern '{pattern}' matches no column")
        elif pattern in header:
            matches = [pattern]
        else:
            raise SchemaError(f"{role} column '{pattern}' not found in header")
        resolved.extend(col for col in matches if col not in resolved)
    return resolved


def _numeric_block(frame: pd.DataFrame, columns: List[str]) -> np.ndarray:
    """Convert string cells to floats, reporting the first bad cell."""
    values = np.empty((len(frame), len(columns)))
    for j, column in enumerate(columns):
        raw = frame[column].str.strip()
        parsed = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(parsed)
        if bad.any():
            row = int(np.argmax(bad))
            raise ParseError(
                f"non-numeric or missing value {frame[column].iloc[row]!r} "
                f"at row {row + 1}, column '{column}'",
                row=row + 1,
                column=column,
            )
        values[:, j] = parsed
    return values


def load_dataset(path, schema: ColumnSchema) -> Dataset:
    """
    Load a CSV file and assign columns by role.

    Args:
        path: CSV file with a header row
        schema: role assignment; instrument entries may be globs

    Returns:
        Dataset with rows in file order

    Raises:
        ResourceError: if the file does not exist
        SchemaError: if a referenced column is absent
        ParseError: if a role column holds a non-numeric or missing cell
    """
    logger.info(f"Loading dataset from: {os.path.basename(str(path))}")

    if not os.path.exists(path):
        raise ResourceError(f"input file not found: {path}")

    frame = pd.read_csv(
        path,
        dtype=str,
        keep_default_na=False,
        encoding="utf-8",
    )
    header = list(frame.columns)

    outcome = _resolve_columns([schema.outcome], header, "outcome")
    endogenous = _resolve_columns(schema.endogenous, header, "endogenous")
    instruments = _resolve_columns(schema.instruments, header, "instrument")
    covariates = _resolve_columns(schema.covariates, header, "covariate")

    y = _numeric_block(frame, outcome)[:, 0]
    X = _numeric_block(frame, endogenous)
    Z = _numeric_block(frame, instruments)
    W = _numeric_block(frame, covariates) if covariates else None

    if schema.add_intercept:
        ones = np.ones((len(frame), 1))
        W = ones if W is None else np.hstack([W, ones])
        covariates = covariates + [INTERCEPT_NAME]

    if schema.interact:
        if W is None:
            raise SchemaError("instrument interaction requires covariates")
        Z = interact_instruments(Z, W)
        instruments = [f"{z}:{w}" for z in instruments for w in covariates]

    dataset = build_dataset(
        y,
        X,
        Z,
        W,
        outcome_name=outcome[0],
        endogenous_names=endogenous,
        instrument_names=instruments,
        covariate_names=covariates,
    )
    logger.info(
        f"Dataset loaded: n={dataset.n}, g={dataset.g}, "
        f"k={dataset.k}, q={dataset.q}"
    )
    return dataset


def interact_instruments(Z, W) -> np.ndarray:
    """
    Elementwise products of every instrument with every covariate.

    Column j*q + m of the result is Z[:, j] * W[:, m] (instrument-major).
    """
    Z = _as_matrix(Z, "Z")
    W = _as_matrix(W, "W")
    if Z.shape[0] != W.shape[0]:
        raise DimensionError(
            f"Z has {Z.shape[0]} rows but W has {W.shape[0]}"
        )
    n, k = Z.shape
    q = W.shape[1]
    return (Z[:, :, None] * W[:, None, :]).reshape(n, k * q)


def _residual_maker(W: np.ndarray):
    """Orthonormal basis of col(W) from a column-pivoted QR."""
    Q, R, _ = linalg.qr(W, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return Q[:, :0], 0
    tol = np.finfo(float).eps * max(W.shape) * diag[0]
    rank = int(np.sum(diag > tol))
    return Q[:, :rank], rank


def standardise_instruments(
    Z, reference_rms: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    """
    Divide each column by its root-mean-square so (1/n) sum_i Z_ij^2 = 1.

    A column is dropped when its root-mean-square is at most 1e-12 of the
    largest one, or of its own reference_rms (the size before partialling)
    when that is given.

    Returns:
        Tuple of (scaled retained columns, their divisors, dropped column indices)

    Raises:
        DegenerateInstrumentsError: if every column is dropped
    """
    Z = _as_matrix(Z, "Z")
    rms = np.sqrt(np.mean(Z**2, axis=0))
    keep = rms > DROP_RELATIVE_RMS * rms.max()
    if reference_rms is not None:
        keep &= rms > DROP_RELATIVE_RMS * np.asarray(reference_rms, dtype=float)
    if not keep.any():
        raise DegenerateInstrumentsError(
            "all instrument columns have zero variance after partialling"
        )
    dropped = [int(j) for j in np.flatnonzero(~keep)]
    scales = rms[keep]
    return Z[:, keep] / scales, scales, dropped


def partial_and_standardise(d: Dataset) -> PartialledData:
    """
    Partial out covariates, then scale instruments to unit mean square.

    Columns whose post-partialling root-mean-square falls below 1e-12 of the
    largest one, or below 1e-12 of their own size before partialling, are
    dropped.

    Raises:
        DegenerateInstrumentsError: if every instrument column is dropped
    """
    y_t, X_t, Z_t = d.y, d.X, d.Z
    w_rank = 0
    reference_rms = None
    if d.W is not None:
        basis, w_rank = _residual_maker(d.W)
        logger.info(f"Partialling out {d.q} covariates (rank {w_rank})")

        def residualise(A):
            return A - basis @ (basis.T @ A)

        y_t = residualise(y_t)
        X_t = residualise(X_t)
        Z_t = residualise(Z_t)
        reference_rms = np.sqrt(np.mean(d.Z**2, axis=0))

    Z_t, scales, dropped = standardise_instruments(Z_t, reference_rms)
    if dropped:
        names = [d.instrument_names[j] for j in dropped] if d.instrument_names else dropped
        logger.warning(f"Dropping {len(dropped)} degenerate instrument columns: {names}")
    names = [name for j, name in enumerate(d.instrument_names) if j not in dropped]

    return PartialledData(
        y_t=np.array(y_t, dtype=float),
        X_t=np.array(X_t, dtype=float),
        Z_t=Z_t,
        scales=scales,
        dropped_cols=dropped,
        q=d.q,
        w_rank=w_rank,
        instrument_names=names,
    )


def structural_residuals(pd_data: PartialledData, beta0) -> np.ndarray:
    """e(beta0) = y_t - X_t beta0."""
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    if beta0.ndim != 1 or beta0.shape[0] != pd_data.g:
        raise DimensionError(
            f"beta0 has length {beta0.size} but there are {pd_data.g} endogenous regressors"
        )
    if not np.all(np.isfinite(beta0)):
        raise DomainError("beta0 must be finite")
    return pd_data.y_t - pd_data.X_t @ beta0

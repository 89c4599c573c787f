"""
Repeated cross-section microdata: validated containers, CSV ingestion,
covariate encoding and the raw 2x2 difference-in-differences table.

Canonical frame columns are ``row_id, y, d, t, cluster`` followed by the
covariates named in the schema and any pass-through columns (``year``,
``analysis_period``, ``policy_level``, ...).
"""

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from diddml.config import ColumnRoles
from diddml.errors import DataValidationError

logger = logging.getLogger(__name__)

MISSING_LEVEL = "(missing)"

# (d, t) cells in label order; label = 2*d + t
CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))
CORE_COLUMNS = ("row_id", "y", "d", "t", "cluster")


def cell_labels(d: np.ndarray, t: np.ndarray) -> np.ndarray:
    return 2 * np.asarray(d, dtype=np.int64) + np.asarray(t, dtype=np.int64)


@dataclass(frozen=True)
class Observation:
    y: float
    d: int
    t: int
    x: np.ndarray
    cluster_id: str
    raw_covariates: dict = field(default_factory=dict)

    @property
    def cell(self) -> int:
        return 2 * self.d + self.t


# ----------------------------
#  Encoding
# ----------------------------
@dataclass(frozen=True)
class EncodingSchema:
    """Ordered covariate names and the level list of every categorical column."""
    continuous: tuple[str, ...] = ()
    categorical: tuple[tuple[str, tuple[str, ...]], ...] = ()
    standardize: bool = False
    centers: tuple[float, ...] = ()
    scales: tuple[float, ...] = ()

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, continuous: Sequence[str], categorical: Sequence[str],
                   standardize: bool = False) -> "EncodingSchema":
        cats = tuple((name, tuple(sorted(frame[name].astype(str).unique()))) for name in categorical)
        centers, scales = (), ()
        if standardize and continuous:
            values = frame[list(continuous)].to_numpy(dtype=float)
            centers = tuple(float(v) for v in values.mean(axis=0))
            sd = values.std(axis=0)
            scales = tuple(float(s) if s > 0 else 1.0 for s in sd)
        return cls(tuple(continuous), cats, standardize, centers, scales)

    @property
    def covariates(self) -> tuple[str, ...]:
        return self.continuous + tuple(name for name, _ in self.categorical)

    def levels(self, name: str) -> tuple[str, ...]:
        for cat, levels in self.categorical:
            if cat == name:
                return levels
        raise KeyError(name)

    def columns(self, drop_first: bool = False) -> list[str]:
        cols = list(self.continuous)
        for name, levels in self.categorical:
            kept = levels[1:] if drop_first else levels
            cols.extend(f"{name}={level}" for level in kept)
        return cols

    def restrict(self, covariates: Iterable[str]) -> "EncodingSchema":
        wanted = list(covariates)
        unknown = [c for c in wanted if c not in self.covariates]
        if unknown:
            raise DataValidationError(f"unknown covariates {unknown}; schema has {list(self.covariates)}")
        keep_cont = [i for i, c in enumerate(self.continuous) if c in wanted]
        return EncodingSchema(
            continuous=tuple(self.continuous[i] for i in keep_cont),
            categorical=tuple((n, lv) for n, lv in self.categorical if n in wanted),
            standardize=self.standardize,
            centers=tuple(self.centers[i] for i in keep_cont) if self.centers else (),
            scales=tuple(self.scales[i] for i in keep_cont) if self.scales else (),
        )

    def encode_frame(self, frame: pd.DataFrame, drop_first: bool = False) -> np.ndarray:
        blocks = []
        if self.continuous:
            values = frame[list(self.continuous)].to_numpy(dtype=float)
            if self.standardize:
                values = (values - np.asarray(self.centers)) / np.asarray(self.scales)
            blocks.append(values)
        for name, levels in self.categorical:
            codes = pd.Categorical(frame[name].astype(str), categories=list(levels)).codes
            if (codes < 0).any():
                unknown = sorted(set(frame[name].astype(str)[codes < 0]))
                raise DataValidationError(f"unknown level(s) {unknown} for categorical {name!r}")
            onehot = np.zeros((len(frame), len(levels)))
            onehot[np.arange(len(frame)), codes] = 1.0
            blocks.append(onehot[:, 1:] if drop_first else onehot)
        if not blocks:
            return np.zeros((len(frame), 0))
        return np.hstack(blocks)

    def decode(self, row: np.ndarray, drop_first: bool = False) -> dict:
        """Inverse of ``encode_frame`` for one encoded row."""
        row = np.asarray(row, dtype=float)
        out = {}
        k = len(self.continuous)
        for i, name in enumerate(self.continuous):
            value = row[i]
            if self.standardize:
                value = value * self.scales[i] + self.centers[i]
            out[name] = float(value)
        for name, levels in self.categorical:
            width = len(levels) - 1 if drop_first else len(levels)
            block = row[k:k + width]
            k += width
            if drop_first:
                out[name] = levels[0] if not block.any() else levels[1 + int(np.argmax(block))]
            else:
                out[name] = levels[int(np.argmax(block))]
        return out


@dataclass(frozen=True)
class Design:
    """Tree (full dummy set) and least-squares (drop-one) encodings of the same rows."""
    tree: np.ndarray
    linear: np.ndarray
    tree_columns: list[str]
    linear_columns: list[str]
    schema: EncodingSchema


# ----------------------------
#  Dataset
# ----------------------------
@dataclass(frozen=True)
class RepeatedCrossSection:
    frame: pd.DataFrame
    schema: EncodingSchema

    def __post_init__(self):
        missing = [c for c in CORE_COLUMNS + self.schema.covariates if c not in self.frame.columns]
        if missing:
            raise DataValidationError(f"dataset frame lacks columns {missing}")
        if self.frame[["y", "d", "t", "cluster"]].isna().any().any():
            raise DataValidationError("missing values in y, d, t or cluster")
        if not np.isfinite(self.frame["y"].to_numpy(dtype=float)).all():
            raise DataValidationError("outcome contains non-finite values")
        for col, what in (("d", "treatment"), ("t", "period")):
            if not self.frame[col].isin([0, 1]).all():
                raise DataValidationError(f"non-binary {what}")

    # -- column views
    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def y(self) -> np.ndarray:
        return self.frame["y"].to_numpy(dtype=float)

    @property
    def d(self) -> np.ndarray:
        return self.frame["d"].to_numpy(dtype=np.int64)

    @property
    def t(self) -> np.ndarray:
        return self.frame["t"].to_numpy(dtype=np.int64)

    @property
    def cluster(self) -> np.ndarray:
        return self.frame["cluster"].astype(str).to_numpy()

    @property
    def row_id(self) -> np.ndarray:
        return self.frame["row_id"].to_numpy(dtype=np.int64)

    @property
    def cells(self) -> np.ndarray:
        return cell_labels(self.d, self.t)

    def cell_counts(self) -> dict[tuple[int, int], int]:
        counts = np.bincount(self.cells, minlength=4)
        return {cell: int(counts[i]) for i, cell in enumerate(CELLS)}

    def require_all_cells(self, minimum: int = 1) -> None:
        counts = self.cell_counts()
        short = {cell: c for cell, c in counts.items() if c < minimum}
        if short:
            if minimum <= 1:
                raise DataValidationError(f"empty (d,t) cell(s): {sorted(short)}")
            raise DataValidationError(f"(d,t) cell(s) with fewer than {minimum} rows: {short}")

    def observation(self, i: int) -> Observation:
        row = self.frame.iloc[i]
        x = self.schema.encode_frame(self.frame.iloc[[i]])[0]
        raw = {name: row[name] for name in self.schema.covariates}
        return Observation(float(row["y"]), int(row["d"]), int(row["t"]), x, str(row["cluster"]), raw)

    # -- derived datasets (all return new objects)
    def _replace(self, frame: pd.DataFrame, schema: Optional[EncodingSchema] = None) -> "RepeatedCrossSection":
        return RepeatedCrossSection(frame.reset_index(drop=True), schema or self.schema)

    def take(self, indices: Sequence[int]) -> "RepeatedCrossSection":
        return self._replace(self.frame.iloc[np.asarray(indices)])

    def subset(self, mask: np.ndarray) -> "RepeatedCrossSection":
        return self._replace(self.frame.loc[np.asarray(mask, dtype=bool)])

    def relabel(self, d: Optional[np.ndarray] = None, y: Optional[np.ndarray] = None) -> "RepeatedCrossSection":
        frame = self.frame.copy()
        if d is not None:
            frame["d"] = np.asarray(d, dtype=np.int64)
        if y is not None:
            frame["y"] = np.asarray(y, dtype=float)
        return self._replace(frame)

    def select_periods(self, analysis_period: str) -> "RepeatedCrossSection":
        if "analysis_period" not in self.frame.columns:
            raise DataValidationError("dataset has no analysis_period column")
        out = self.subset(self.frame["analysis_period"].astype(str) == analysis_period)
        if out.n == 0:
            raise DataValidationError(f"no rows for analysis period {analysis_period!r}")
        # the stacking dummy is constant inside a single period
        if "analysis_period" in out.schema.covariates:
            out = out.restrict_covariates([c for c in out.schema.covariates if c != "analysis_period"])
        return out

    def restrict_covariates(self, covariates: Iterable[str]) -> "RepeatedCrossSection":
        return RepeatedCrossSection(self.frame, self.schema.restrict(covariates))

    def sorted_by_row_id(self) -> "RepeatedCrossSection":
        return self.take(np.argsort(self.row_id, kind="stable"))


# ----------------------------
#  Ingestion
# ----------------------------
@dataclass(frozen=True)
class SurveyWaves:
    """Survey rows keyed by country (cluster) and year, before treatment labels exist."""
    frame: pd.DataFrame
    continuous: tuple[str, ...]
    categorical: tuple[str, ...]
    standardize: bool = False


def _read_table(path: str, roles: ColumnRoles, required: Sequence[str]) -> pd.DataFrame:
    try:
        raw = pd.read_csv(path, sep=roles.delimiter, dtype=str, encoding="utf-8", skipinitialspace=True)
    except FileNotFoundError:
        raise DataValidationError(f"file not found: {path}")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataValidationError(f"unreadable file {path}: {e}")

    wanted = list(required) + roles.covariates.continuous + roles.covariates.categorical + roles.keep
    if roles.row_id:
        wanted.append(roles.row_id)
    unknown = [c for c in wanted if c not in raw.columns]
    if unknown:
        raise DataValidationError(f"unknown column(s) {unknown} in {path}")

    out = pd.DataFrame(index=raw.index)
    if roles.row_id:
        ids = pd.to_numeric(raw[roles.row_id].str.strip(), errors="coerce")
        bad = ids.isna() | (ids % 1 != 0)
        if bad.any():
            raise DataValidationError(
                f"missing or non-integer row id in column {roles.row_id!r} in {int(bad.sum())} row(s)"
            )
        duplicated = ids[ids.duplicated()].astype(np.int64).unique().tolist()
        if duplicated:
            raise DataValidationError(f"duplicate row id(s) in column {roles.row_id!r}: {sorted(duplicated)[:5]}")
        out["row_id"] = ids.astype(np.int64)
    else:
        out["row_id"] = np.arange(len(raw), dtype=np.int64)

    # blanks are NaN after read_csv; whitespace-only cells are blanks too
    raw = raw.apply(lambda s: s.str.strip()).replace("", np.nan)

    complete = raw[list(required)].notna().all(axis=1)
    dropped = int((~complete).sum())
    if dropped:
        logger.warning("dropped %d row(s) of %s with missing %s", dropped, path, "/".join(required))
    raw, out = raw.loc[complete], out.loc[complete]

    y = pd.to_numeric(raw[roles.outcome], errors="coerce")
    if y.isna().any() or not np.isfinite(y.to_numpy(dtype=float)).all():
        raise DataValidationError(f"non-numeric outcome values in column {roles.outcome!r}")
    if roles.binary_outcome and not y.isin([0, 1]).all():
        raise DataValidationError("non-binary outcome (binary_outcome is set)")
    out["y"] = y.astype(float)

    for role, what in ((roles.treatment, "treatment"), (roles.period, "period")):
        if role is None or role not in required:
            continue
        values = pd.to_numeric(raw[role], errors="coerce")
        if not values.isin([0, 1]).all():
            raise DataValidationError(f"non-binary {what}")
        out["d" if what == "treatment" else "t"] = values.astype(np.int64)

    out["cluster"] = raw[roles.cluster].astype(str)
    if roles.year and roles.year in required:
        years = pd.to_numeric(raw[roles.year], errors="coerce")
        if years.isna().any():
            raise DataValidationError(f"non-numeric year values in column {roles.year!r}")
        out["year"] = years.astype(np.int64)

    for name in roles.covariates.continuous:
        values = pd.to_numeric(raw[name], errors="coerce")
        if values.isna().any():
            raise DataValidationError(
                f"missing or non-numeric continuous covariate {name!r} in {int(values.isna().sum())} row(s)"
            )
        out[name] = values.astype(float)
    for name in roles.covariates.categorical:
        out[name] = raw[name].fillna(MISSING_LEVEL).astype(str)
    for name in roles.keep:
        if name not in out.columns:
            out[name] = raw[name]
    return out.reset_index(drop=True)


def load_csv(path: str, roles: ColumnRoles) -> RepeatedCrossSection:
    """Read an analysis-ready CSV (y, d, t, cluster, covariates) into a validated dataset."""
    if roles.treatment is None or roles.period is None:
        raise DataValidationError("column roles must name the treatment and period columns")
    required = [roles.outcome, roles.treatment, roles.period, roles.cluster]
    if roles.year:
        required.append(roles.year)
    frame = _read_table(path, roles, required)
    schema = EncodingSchema.from_frame(frame, roles.covariates.continuous, roles.covariates.categorical,
                                       roles.standardize)
    data = RepeatedCrossSection(frame, schema)
    data.require_all_cells()
    logger.info("loaded %d rows from %s (cells %s)", data.n, path, data.cell_counts())
    return data


def load_survey_csv(path: str, roles: ColumnRoles) -> SurveyWaves:
    """Read survey waves keyed by country and year; treatment labels come from ``join``."""
    if roles.year is None:
        raise DataValidationError("column roles must name the year column for survey data")
    frame = _read_table(path, roles, [roles.outcome, roles.cluster, roles.year])
    logger.info("loaded %d survey rows from %s", len(frame), path)
    return SurveyWaves(frame, tuple(roles.covariates.continuous), tuple(roles.covariates.categorical),
                       roles.standardize)


def write_csv(data: RepeatedCrossSection, path: str) -> None:
    data.frame.to_csv(path, index=False)


def canonical_roles(data: RepeatedCrossSection, binary_outcome: bool = True) -> ColumnRoles:
    """Column roles that reload a frame written by ``write_csv``."""
    schema = data.schema
    keep = [c for c in data.frame.columns if c not in CORE_COLUMNS + schema.covariates and c != "year"]
    return ColumnRoles(
        outcome="y", treatment="d", period="t", cluster="cluster", row_id="row_id",
        year="year" if "year" in data.frame.columns else None,
        covariates={"continuous": list(schema.continuous), "categorical": [n for n, _ in schema.categorical]},
        keep=keep, binary_outcome=binary_outcome, standardize=schema.standardize,
    )


# ----------------------------
#  Encoding and descriptives
# ----------------------------
def encode(data: RepeatedCrossSection, covariates: Optional[Iterable[str]] = None) -> Design:
    schema = data.schema if covariates is None else data.schema.restrict(covariates)
    return Design(
        tree=schema.encode_frame(data.frame, drop_first=False),
        linear=schema.encode_frame(data.frame, drop_first=True),
        tree_columns=schema.columns(drop_first=False),
        linear_columns=schema.columns(drop_first=True),
        schema=schema,
    )


@dataclass(frozen=True)
class TwoByTwo:
    means: dict[tuple[int, int], float]
    counts: dict[tuple[int, int], int]
    control_difference: float
    treated_difference: float
    did: float

    def to_records(self) -> list[dict]:
        rows = []
        for d in (0, 1):
            diff = self.treated_difference if d else self.control_difference
            rows.append({
                "d": d,
                "pre_rate": self.means[(d, 0)], "pre_n": self.counts[(d, 0)],
                "post_rate": self.means[(d, 1)], "post_n": self.counts[(d, 1)],
                "difference": diff,
            })
        return rows


def two_by_two_table(data: RepeatedCrossSection) -> TwoByTwo:
    data.require_all_cells()
    cells = data.cells
    y = data.y
    counts = np.bincount(cells, minlength=4)
    sums = np.bincount(cells, weights=y, minlength=4)
    means = sums / counts
    m = {cell: float(means[i]) for i, cell in enumerate(CELLS)}
    control = m[(0, 1)] - m[(0, 0)]
    treated = m[(1, 1)] - m[(1, 0)]
    return TwoByTwo(
        means=m,
        counts={cell: int(counts[i]) for i, cell in enumerate(CELLS)},
        control_difference=control,
        treated_difference=treated,
        did=treated - control,
    )


def summary_statistics(data: RepeatedCrossSection) -> pd.DataFrame:
    """Mean and standard deviation of y and each encoded covariate, by treatment group."""
    design = encode(data)
    table = pd.DataFrame(design.tree, columns=design.tree_columns)
    table.insert(0, "y", data.y)
    table["d"] = data.d
    grouped = table.groupby("d")
    out = pd.concat({"mean": grouped.mean().T, "sd": grouped.std(ddof=1).T}, axis=1)
    out.columns = [f"{stat}_d{d}" for stat, d in out.columns]
    return out

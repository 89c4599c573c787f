"""
Two-way fixed-effects least-squares DiD: binary treatment ``d * t`` or a
continuous policy level, country and year dummies, cluster-robust errors.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy import linalg

from diddml.config import TwfeSpec
from diddml.data_model import RepeatedCrossSection
from diddml.errors import DataValidationError, EstimationError, RankDeficiencyError
from diddml.estimator import SCHEMA_VERSION, normal_inference

logger = logging.getLogger(__name__)

CONST = "const"
BINARY_TREATMENT = "D"


@dataclass(frozen=True)
class OlsFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    columns: list[str]
    bread: np.ndarray  # (X'X)^-1
    X: np.ndarray = field(repr=False)
    n: int
    rank: int

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.columns.index(name)])


def fit_ols(X: np.ndarray, y: np.ndarray, columns: list[str]) -> OlsFit:
    """Least squares by column-pivoted QR; rank deficiency names the dependent columns."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if n == 0 or k == 0:
        raise EstimationError(f"empty design matrix {X.shape}")
    if n < k:
        raise RankDeficiencyError(columns[n:])
    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(n, k) * np.finfo(float).eps
    rank = int((diag > tol).sum())
    if rank < k:
        raise RankDeficiencyError([columns[j] for j in sorted(piv[rank:])])

    beta = np.empty(k)
    beta[piv] = linalg.solve_triangular(R, Q.T @ y)
    r_inv = linalg.solve_triangular(R, np.eye(k))
    bread = np.empty((k, k))
    bread[np.ix_(piv, piv)] = r_inv @ r_inv.T
    return OlsFit(beta, y - X @ beta, list(columns), bread, X, n, rank)


def hc0_vcov(fit: OlsFit) -> np.ndarray:
    scores = fit.X * fit.residuals[:, None]
    return fit.bread @ (scores.T @ scores) @ fit.bread


def cluster_robust_vcov(fit: OlsFit, clusters: np.ndarray) -> np.ndarray:
    """CR1 sandwich: cluster-summed scores with c = G/(G-1) * (n-1)/(n-k)."""
    clusters = np.asarray(clusters)
    if len(clusters) != fit.n:
        raise EstimationError(f"{len(clusters)} cluster ids for {fit.n} rows")
    _, inverse = np.unique(clusters, return_inverse=True)
    g = int(inverse.max()) + 1
    if g < 2:
        raise EstimationError(f"cluster-robust errors need at least 2 clusters, got {g}")
    k = fit.X.shape[1]
    if fit.n <= k:
        raise EstimationError(f"no residual degrees of freedom (n={fit.n}, k={k})")
    scores = fit.X * fit.residuals[:, None]
    summed = np.zeros((g, k))
    np.add.at(summed, inverse, scores)
    c = g / (g - 1) * (fit.n - 1) / (fit.n - k)
    return c * fit.bread @ (summed.T @ summed) @ fit.bread


# ----------------------------
#  Design
# ----------------------------
@dataclass(frozen=True)
class TwfeDesign:
    y: np.ndarray
    X: np.ndarray
    columns: list[str]
    treatment_column: str
    clusters: np.ndarray
    fixed_effects: dict[str, np.ndarray]  # FE name -> group codes


def _absorbed(values: pd.Series, groups: np.ndarray) -> bool:
    return bool((values.groupby(groups).nunique(dropna=False) <= 1).all())


def _year_groups(data: RepeatedCrossSection, spec: TwfeSpec) -> np.ndarray:
    if spec.year_column in data.frame.columns:
        return data.frame[spec.year_column].astype(str).to_numpy()
    return data.t.astype(str)


def _dummies(name: str, groups: np.ndarray) -> tuple[np.ndarray, list[str]]:
    levels = sorted(set(groups.tolist()))
    codes = pd.Categorical(groups, categories=levels).codes
    onehot = np.zeros((len(groups), len(levels)))
    onehot[np.arange(len(groups)), codes] = 1.0
    return onehot[:, 1:], [f"{name}={level}" for level in levels[1:]]


def build_twfe_design(data: RepeatedCrossSection, spec: TwfeSpec, dummies: bool = True) -> TwfeDesign:
    """
    Regressors: constant, treatment, covariates (drop-one dummies), then
    country and year dummies.

    Columns that an active fixed effect absorbs (constant within its groups)
    are left out. With ``dummies=False`` the constant and the fixed-effect
    dummies are omitted and the group codes are returned for demeaning.
    """
    frame = data.frame
    y = frame[spec.outcome].to_numpy(dtype=float) if spec.outcome else data.y
    if spec.outcome and not np.isfinite(y).all():
        raise DataValidationError(f"outcome column {spec.outcome!r} has missing or non-finite values")

    fe = {}
    if spec.country_fe:
        fe["country"] = data.cluster
    if spec.year_fe:
        fe["year"] = _year_groups(data, spec)

    def absorbed(values: pd.Series) -> Optional[str]:
        for name, groups in fe.items():
            if _absorbed(values, groups):
                return name
        return None

    blocks, columns = [], []
    if dummies:
        blocks.append(np.ones((data.n, 1)))
        columns.append(CONST)

    if spec.treatment == "binary":
        treatment = BINARY_TREATMENT
        candidates = [(BINARY_TREATMENT, pd.Series(data.d * data.t)), ("d", pd.Series(data.d)),
                      ("t", pd.Series(data.t))]
    else:
        if spec.policy_column not in frame.columns:
            raise DataValidationError(f"continuous treatment needs a {spec.policy_column!r} column")
        treatment = spec.policy_column
        candidates = [(spec.policy_column, frame[spec.policy_column].reset_index(drop=True))]
        if spec.include_history:
            if spec.history_column not in frame.columns:
                raise DataValidationError(f"treatment history column {spec.history_column!r} not found")
            candidates.append((spec.history_column, frame[spec.history_column].reset_index(drop=True)))
        candidates.append(("t", pd.Series(data.t)))

    for name, values in candidates:
        if values.isna().any():
            raise DataValidationError(f"regressor {name!r} has missing values")
        by = absorbed(values)
        if by is not None and name != treatment:
            logger.debug("%s absorbed by %s fixed effects", name, by)
            continue
        blocks.append(values.to_numpy(dtype=float)[:, None])
        columns.append(name)

    covariates = list(spec.covariates) if spec.covariates is not None else list(data.schema.covariates)
    taken = set(columns)
    kept = []
    for name in covariates:
        if name in taken:
            continue
        by = absorbed(frame[name].reset_index(drop=True))
        if by is not None:
            logger.debug("covariate %s absorbed by %s fixed effects", name, by)
            continue
        kept.append(name)
    if kept:
        schema = data.schema.restrict(kept)
        blocks.append(schema.encode_frame(frame, drop_first=True))
        columns.extend(schema.columns(drop_first=True))

    if dummies:
        for name, groups in fe.items():
            values, names = _dummies(name, groups)
            blocks.append(values)
            columns.extend(names)

    X = np.hstack(blocks) if blocks else np.zeros((data.n, 0))
    return TwfeDesign(y, X, columns, treatment, data.cluster, fe)


# ----------------------------
#  Estimates
# ----------------------------
@dataclass(frozen=True)
class TwfeResult:
    mode: str
    fit: OlsFit
    vcov: np.ndarray
    treatment_column: str
    theta: float
    se: float
    p_value: float
    ci95: tuple[float, float]
    n_clusters: int
    clustered: bool

    def coefficient_table(self) -> list[dict]:
        se = np.sqrt(np.diag(self.vcov))
        return [{"name": name, "coef": float(b), "se": float(s)}
                for name, b, s in zip(self.fit.columns, self.fit.coefficients, se)]

    def to_record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "estimator": f"twfe_{self.mode}",
            "atet": self.theta,
            "se": self.se,
            "p_value": self.p_value,
            "ci95": list(self.ci95),
            "n": self.fit.n,
            "n_used": self.fit.n,
            "n_trimmed": 0,
            "n_clusters": self.n_clusters,
            "clustered": self.clustered,
            "treatment_column": self.treatment_column,
            "coefficients": self.coefficient_table(),
        }


def fit_twfe(data: RepeatedCrossSection, spec: TwfeSpec) -> TwfeResult:
    design = build_twfe_design(data, spec)
    n_clusters = len(np.unique(design.clusters))
    if spec.cluster and n_clusters < 2:
        raise EstimationError(f"cluster-robust errors need at least 2 clusters, got {n_clusters}")
    fit = fit_ols(design.X, design.y, design.columns)
    vcov = cluster_robust_vcov(fit, design.clusters) if spec.cluster else hc0_vcov(fit)
    j = fit.columns.index(design.treatment_column)
    theta = float(fit.coefficients[j])
    se = float(np.sqrt(vcov[j, j]))
    p_value, ci95 = normal_inference(theta, se)
    logger.info("TWFE %s: theta %.5f (se %.5f) on %d rows, %d columns", spec.treatment, theta, se, fit.n,
                len(fit.columns))
    return TwfeResult(spec.treatment, fit, vcov, design.treatment_column, theta, se, p_value, ci95,
                      n_clusters, spec.cluster)


def _demean(matrix: np.ndarray, groups: list[np.ndarray], tol: float = 1e-13, max_iter: int = 10_000) -> np.ndarray:
    """Alternating projections onto the orthogonal complement of each set of group dummies."""
    out = matrix.copy()
    codes = [pd.factorize(g)[0] for g in groups]
    counts = [np.bincount(c).astype(float) for c in codes]
    for _ in range(max_iter):
        before = out.copy()
        for c, cnt in zip(codes, counts):
            sums = np.zeros((len(cnt), out.shape[1]))
            np.add.at(sums, c, out)
            out -= (sums / cnt[:, None])[c]
        if np.max(np.abs(out - before)) <= tol * max(1.0, np.max(np.abs(matrix))):
            return out
    raise EstimationError(f"within transformation did not converge in {max_iter} sweeps")


def fit_twfe_within(data: RepeatedCrossSection, spec: TwfeSpec) -> OlsFit:
    """Same regression with fixed effects swept out instead of estimated; no intercept."""
    design = build_twfe_design(data, spec, dummies=False)
    groups = list(design.fixed_effects.values()) or [np.zeros(data.n, dtype=np.int64)]
    stacked = _demean(np.column_stack([design.y, design.X]), groups)
    return fit_ols(stacked[:, 1:], stacked[:, 0], design.columns)


def rescale_continuous(theta: float, delta_pct: Optional[float] = None, baseline: Optional[float] = None,
                       delta_units: Optional[float] = None) -> float:
    """
    Effect of a policy change given a per-unit marginal effect ``theta``.

    Pass the change in units directly, or as a percent of ``baseline``:
    ``rescale_continuous(-0.3977, delta_pct=4.13, baseline=0.77)`` is about -0.0126.
    """
    if delta_units is None:
        if delta_pct is None or baseline is None:
            raise EstimationError("rescaling needs delta_units, or delta_pct together with a baseline level")
        delta_units = baseline * delta_pct / 100.0
    return theta * delta_units

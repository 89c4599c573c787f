"""
Cross-fitted doubly robust ATET for repeated cross-sections.

For every row the score combines inverse-propensity-weighted outcome residuals
from all four (d, t) cells with the regression contrast

    mu11 - mu10 - (mu01 - mu00)

on the treated post-period rows. Nuisances come from random forests fitted
out of fold; the estimate is the mean score over rows kept after trimming.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy import stats

from diddml.config import DidDmlConfig
from diddml.data_model import CELLS, Observation, RepeatedCrossSection, encode
from diddml.errors import EstimationError, LearnerError
from diddml.forest_learner import LEARNERS
from diddml.parallel import derive_seed, parallel_map

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
Z95 = 1.96
TREATED_POST = 3
SUPPORT_QUANTILES = (0.0, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 1.0)


# ----------------------------
#  Fold plan
# ----------------------------
@dataclass(frozen=True)
class CrossFitPlan:
    k: int
    folds: np.ndarray  # fold index per row, aligned with the dataset rows
    seed: int

    def train_test(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = self.folds == fold
        return np.nonzero(~test)[0], np.nonzero(test)[0]

    def sizes(self) -> list[int]:
        return np.bincount(self.folds, minlength=self.k).tolist()


def make_folds(data: RepeatedCrossSection, k: int, seed: int) -> CrossFitPlan:
    """
    Partition rows into ``k`` folds stratified by (d, t) cell.

    Rows are keyed by ``row_id``, so the same rows land in the same folds no
    matter how the dataset is ordered. Folds are dealt round-robin across the
    cells, which keeps overall fold sizes within one of each other.
    """
    if k < 2:
        raise EstimationError(f"need at least 2 folds, got {k}")
    row_id = data.row_id
    if len(np.unique(row_id)) != data.n:
        raise EstimationError("row_id values must be unique to build a fold plan")
    counts = data.cell_counts()
    short = {cell: c for cell, c in counts.items() if c < k}
    if short:
        raise EstimationError(f"(d,t) cell(s) smaller than the {k} folds: {short}")

    rng = np.random.default_rng(derive_seed(seed, 0))
    cells = data.cells
    folds = np.empty(data.n, dtype=np.int64)
    offset = 0
    for c in range(len(CELLS)):
        idx = np.nonzero(cells == c)[0]
        idx = idx[np.argsort(row_id[idx], kind="stable")]
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = (offset + np.arange(len(idx))) % k
        offset = (offset + len(idx)) % k
    return CrossFitPlan(k, folds, seed)


# ----------------------------
#  Nuisances
# ----------------------------
@dataclass(frozen=True)
class NuisancePredictions:
    """Out-of-fold outcome means and cell propensities; columns follow the cell labels 2*d + t."""
    mu: np.ndarray
    rho: np.ndarray
    pi_hat: float

    def __post_init__(self):
        if self.mu.ndim != 2 or self.mu.shape[1] != 4 or self.rho.shape != self.mu.shape:
            raise EstimationError(f"nuisances must be n x 4, got mu {self.mu.shape} and rho {self.rho.shape}")
        if not 0.0 < self.pi_hat < 1.0:
            raise EstimationError(f"share of treated post-period rows must lie in (0, 1), got {self.pi_hat}")

    @property
    def n(self) -> int:
        return len(self.mu)

    def take(self, mask: np.ndarray) -> "NuisancePredictions":
        return NuisancePredictions(self.mu[mask], self.rho[mask], self.pi_hat)


def treated_post_share(cells: np.ndarray) -> float:
    return float(np.mean(np.asarray(cells) == TREATED_POST))


def _fit_fold(task) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X, y, cells, train, test, config, fold = task
    fit_regression = LEARNERS[config.regression.learner][0]
    fit_probability = LEARNERS[config.probability.learner][1]

    prob_cfg = config.probability.model_copy(update={"seed": derive_seed(config.seed, fold, len(CELLS))})
    rho = fit_probability(X[train], cells[train], prob_cfg, n_classes=len(CELLS)).predict(X[test])

    mu = np.empty((len(test), len(CELLS)))
    for c in range(len(CELLS)):
        rows = train[cells[train] == c]
        reg_cfg = config.regression.model_copy(update={"seed": derive_seed(config.seed, fold, c)})
        mu[:, c] = fit_regression(X[rows], y[rows], reg_cfg).predict(X[test])
    return test, mu, rho


def cross_fit_nuisances(data: RepeatedCrossSection, plan: CrossFitPlan, config: DidDmlConfig,
                        covariates: Optional[Iterable[str]] = None) -> NuisancePredictions:
    """
    Fit the propensity forest and the four per-cell outcome forests outside
    each fold and predict inside it.

    Work happens in ``row_id`` order and is scattered back afterwards, so the
    predictions do not depend on the row order of ``data``.
    """
    if len(plan.folds) != data.n:
        raise EstimationError(f"fold plan covers {len(plan.folds)} rows, dataset has {data.n}")
    order = np.argsort(data.row_id, kind="stable")
    X = encode(data, covariates if covariates is not None else config.covariates).tree[order]
    if X.shape[1] == 0:
        X = np.zeros((data.n, 1))
    y = data.y[order]
    cells = data.cells[order]
    folds = plan.folds[order]

    tasks = []
    for fold in range(plan.k):
        test = np.nonzero(folds == fold)[0]
        train = np.nonzero(folds != fold)[0]
        missing = [CELLS[c] for c in range(len(CELLS)) if not (cells[train] == c).any()]
        if missing:
            raise EstimationError(f"fold {fold}: training rows lack cell(s) {missing}")
        tasks.append((X, y, cells, train, test, config, fold))

    logger.info("cross-fitting %d folds on %d rows x %d features", plan.k, data.n, X.shape[1])
    try:
        results = parallel_map(_fit_fold, tasks, config.threads)
    except LearnerError as e:
        raise EstimationError(f"nuisance fit failed: {e}") from e

    mu = np.empty((data.n, len(CELLS)))
    rho = np.empty((data.n, len(CELLS)))
    for test, mu_k, rho_k in results:
        mu[order[test]] = mu_k
        rho[order[test]] = rho_k
    return NuisancePredictions(mu, rho, treated_post_share(data.cells))


# ----------------------------
#  Trimming and the score
# ----------------------------
def trim(preds: NuisancePredictions, cells: np.ndarray, threshold: float = 0.01) -> tuple[np.ndarray, int]:
    """Mask of rows kept; comparison-cell rows whose own-cell propensity is below ``threshold`` are dropped."""
    if not 0.0 <= threshold < 0.5:
        raise EstimationError(f"trim threshold must lie in [0, 0.5), got {threshold}")
    cells = np.asarray(cells)
    own = preds.rho[np.arange(len(cells)), cells]
    dropped = (cells != TREATED_POST) & (own < threshold)
    return ~dropped, int(dropped.sum())


def score_values(y: np.ndarray, cells: np.ndarray, mu: np.ndarray, rho: np.ndarray, pi: float) -> np.ndarray:
    if not pi > 0:
        raise EstimationError(f"treated post-period share must be > 0, got {pi}")
    y = np.asarray(y, dtype=float)
    cells = np.asarray(cells)
    rows = np.arange(len(cells))
    own = rho[rows, cells]
    comparison = cells != TREATED_POST
    if (own[comparison] <= 0).any():
        raise EstimationError("zero propensity for an observation's own cell; trim before scoring")

    d, t = cells // 2, cells % 2
    ratio = np.divide(rho[:, TREATED_POST], own, out=np.zeros(len(cells)), where=comparison)
    treated_post = (d * t).astype(float)
    weight = (treated_post
              - d * (1 - t) * ratio
              - (1 - d) * t * ratio
              + (1 - d) * (1 - t) * ratio) / pi
    residual = y - mu[rows, cells]
    contrast = mu[:, 3] - mu[:, 2] - (mu[:, 1] - mu[:, 0])
    return weight * residual + treated_post / pi * contrast


def score(obs: Observation, mu_row: np.ndarray, rho_row: np.ndarray, pi: float) -> float:
    """Doubly robust score of a single observation."""
    return float(score_values(
        np.array([obs.y]), np.array([obs.cell]),
        np.asarray(mu_row, dtype=float).reshape(1, 4), np.asarray(rho_row, dtype=float).reshape(1, 4), pi,
    )[0])


# ----------------------------
#  Common support
# ----------------------------
@dataclass(frozen=True)
class GroupSupport:
    count: int
    quantiles: dict[float, float]
    histogram: list[int]
    outside_share: float  # share of treated post-period rows outside this group's range


@dataclass(frozen=True)
class SupportReport:
    edges: list[float]
    groups: dict[tuple[int, int], GroupSupport]
    mass: float
    violating_cells: list[tuple[int, int]]

    @property
    def violation(self) -> bool:
        return bool(self.violating_cells)

    def to_dict(self) -> dict:
        return {
            "edges": self.edges,
            "mass": self.mass,
            "violation": self.violation,
            "violating_cells": [list(c) for c in self.violating_cells],
            "groups": {
                f"{d}{t}": {
                    "count": g.count,
                    "quantiles": {str(q): v for q, v in g.quantiles.items()},
                    "histogram": g.histogram,
                    "outside_share": g.outside_share,
                } for (d, t), g in self.groups.items()
            },
        }


def common_support_report(preds: NuisancePredictions, cells: np.ndarray, bins: int = 20,
                          mass: float = 0.01) -> SupportReport:
    """Distribution of the treated post-period propensity within each of the four cells."""
    cells = np.asarray(cells)
    p11 = preds.rho[:, TREATED_POST]
    edges = np.linspace(0.0, 1.0, bins + 1)
    reference = p11[cells == TREATED_POST]
    groups, violating = {}, []
    for c, cell in enumerate(CELLS):
        values = p11[cells == c]
        if len(values):
            quantiles = {q: float(v) for q, v in zip(SUPPORT_QUANTILES, np.quantile(values, SUPPORT_QUANTILES))}
            outside = np.mean((reference < values.min()) | (reference > values.max())) if len(reference) else 0.0
        else:
            quantiles, outside = {}, 1.0
        hist = np.histogram(np.clip(values, 0.0, 1.0), bins=edges)[0]
        groups[cell] = GroupSupport(int(len(values)), quantiles, hist.tolist(), float(outside))
        if c != TREATED_POST and outside > mass:
            violating.append(cell)
    report = SupportReport(edges.tolist(), groups, mass, violating)
    if report.violation:
        logger.warning("common support violated: treated post-period propensities fall outside cell(s) %s",
                       violating)
    return report


# ----------------------------
#  Estimate
# ----------------------------
@dataclass(frozen=True)
class AtetEstimate:
    atet: float
    se: float
    p_value: float
    ci95: tuple[float, float]
    n: int
    n_used: int
    n_trimmed: int
    n_clusters: int
    clustered: bool
    pi_hat: float
    folds: Optional[int]
    seed: int
    influence: np.ndarray = field(repr=False)
    used: np.ndarray = field(repr=False)
    support: Optional[SupportReport] = field(default=None, repr=False)
    learner: dict = field(default_factory=dict, repr=False)

    def to_record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "estimator": "diddml",
            "atet": self.atet,
            "se": self.se,
            "p_value": self.p_value,
            "ci95": list(self.ci95),
            "n": self.n,
            "n_used": self.n_used,
            "n_trimmed": self.n_trimmed,
            "n_clusters": self.n_clusters,
            "clustered": self.clustered,
            "pi_hat": self.pi_hat,
            "folds": self.folds,
            "seed": self.seed,
            "learner": self.learner,
            "diagnostics": self.support.to_dict() if self.support is not None else None,
        }


def normal_inference(estimate: float, se: float) -> tuple[float, tuple[float, float]]:
    """Two-sided normal p-value and 95% interval."""
    if se > 0:
        p = float(2.0 * stats.norm.sf(abs(estimate / se)))
    else:
        p = 1.0 if estimate == 0 else 0.0
    return p, (estimate - Z95 * se, estimate + Z95 * se)


def influence_se(influence: np.ndarray, clusters: Optional[np.ndarray] = None) -> tuple[float, int]:
    """Standard error of a mean from its influence values; clustered with a G/(G-1) factor when ids are given."""
    n = len(influence)
    if clusters is None:
        return float(np.std(influence) / math.sqrt(n)), n
    _, inverse = np.unique(clusters, return_inverse=True)
    g = int(inverse.max()) + 1 if n else 0
    if g < 2:
        raise EstimationError(f"clustered standard errors need at least 2 clusters, got {g}")
    sums = np.bincount(inverse, weights=influence, minlength=g)
    return float(math.sqrt(g / (g - 1) * float(np.sum(sums * sums)) / n**2)), g


def estimate_atet(data: RepeatedCrossSection, config: DidDmlConfig,
                  nuisances: Optional[NuisancePredictions] = None,
                  covariates: Optional[Iterable[str]] = None) -> AtetEstimate:
    """
    Cross-fit the nuisances (unless ``nuisances`` are supplied), trim and
    average the score.

    With supplied nuisances no forests are fitted and the result is the plain
    plug-in mean of the score, which is how exact nuisances are checked.
    """
    data.require_all_cells()
    cells = data.cells
    if config.cluster and len(np.unique(data.cluster)) < 2:
        raise EstimationError("clustered standard errors need at least 2 clusters")

    if nuisances is None:
        plan = make_folds(data, config.folds, config.seed)
        nuisances = cross_fit_nuisances(data, plan, config, covariates)
        folds = plan.k
        learner = {"regression": config.regression.model_dump(mode="json"),
                   "probability": config.probability.model_dump(mode="json")}
    else:
        if nuisances.n != data.n:
            raise EstimationError(f"supplied nuisances cover {nuisances.n} rows, dataset has {data.n}")
        folds = None
        learner = {"name": "supplied"}

    used, n_trimmed = trim(nuisances, cells, config.trim)
    if n_trimmed:
        logger.warning("trimmed %d comparison row(s) with propensity below %s", n_trimmed, config.trim)
    kept_cells = cells[used]
    n_used = int(used.sum())
    pi = treated_post_share(kept_cells) if config.pi_after_trim else nuisances.pi_hat

    kept = nuisances.take(used)
    psi = score_values(data.y[used], kept_cells, kept.mu, kept.rho, pi)
    atet = math.fsum(psi) / n_used
    influence = psi - atet * (kept_cells == TREATED_POST) / pi

    se, n_clusters = influence_se(influence, data.cluster[used] if config.cluster else None)
    if not config.cluster:
        n_clusters = len(np.unique(data.cluster[used]))
    p_value, ci95 = normal_inference(atet, se)
    support = common_support_report(nuisances, cells, config.support_bins, config.support_mass)

    logger.info("ATET %.5f (se %.5f, p %.4f) on %d rows, %d trimmed", atet, se, p_value, n_used, n_trimmed)
    return AtetEstimate(
        atet=atet, se=se, p_value=p_value, ci95=ci95,
        n=data.n, n_used=n_used, n_trimmed=n_trimmed, n_clusters=n_clusters, clustered=config.cluster,
        pi_hat=pi, folds=folds, seed=config.seed,
        influence=influence, used=used, support=support, learner=learner,
    )

"""
Synthetic repeated cross-sections with a known treatment effect.

Rows are assigned to the four (d, t) cells by a softmax over covariate
indices, mixed with uniform mass so every cell probability stays above the
configured lower bound. Untreated outcomes follow a baseline surface f(x)
plus a trend g(x) in the post period that is the same for both groups, so
conditional common trends and no anticipation hold by construction. Treated
post-period rows get the effect tau(x) added to their outcome probability.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from diddml.config import DgpSpec
from diddml.data_model import CELLS, EncodingSchema, RepeatedCrossSection
from diddml.errors import SimulationError
from diddml.estimator import NuisancePredictions, TREATED_POST, treated_post_share

logger = logging.getLogger(__name__)

REVERSE_TREND_SCALE = 0.02


@dataclass(frozen=True)
class SyntheticSample:
    data: RepeatedCrossSection
    tau: np.ndarray          # effect on the outcome probability, per row
    y0: np.ndarray           # untreated potential outcome at the row's own period
    y1: np.ndarray           # treated potential outcome at the row's own period
    true_mu: np.ndarray = field(repr=False)   # E[y | d, t, x, cluster] for all four cells
    true_rho: np.ndarray = field(repr=False)  # cell probabilities
    spec: DgpSpec
    clamped_fraction: float = 0.0

    def true_nuisances(self) -> NuisancePredictions:
        return NuisancePredictions(self.true_mu.copy(), self.true_rho.copy(), treated_post_share(self.data.cells))


def continuous_names(spec: DgpSpec) -> list[str]:
    return [f"x{j + 1}" for j in range(spec.p_continuous)]


def categorical_names(spec: DgpSpec) -> list[str]:
    return [f"z{j + 1}" for j in range(spec.n_categorical)]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _surfaces(spec: DgpSpec, X: np.ndarray, z_first: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Baseline level f(x) and post-period trend g(x)."""
    x1, x_last = X[:, 0], X[:, -1]
    if spec.surface == "linear":
        signs = np.array([(-1) ** j / (j + 1) for j in range(X.shape[1])])
        f = X @ (0.05 * signs) + 0.03 * z_first
        g = np.full(len(X), spec.trend)
    else:
        f = 0.08 * (x1 > 0) + 0.04 * x1 * x_last + 0.03 * z_first
        g = spec.trend + 0.08 * (x1 > 0) + 0.03 * x1 * x_last
    return f, g


def generate(spec: DgpSpec) -> SyntheticSample:
    """Draw one sample; the same spec (seed included) gives a bit-identical sample."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n

    X = rng.standard_normal((n, spec.p_continuous))
    Z = rng.integers(spec.categorical_levels, size=(n, spec.n_categorical))
    z_first = (Z[:, 0] == 1).astype(float) if spec.n_categorical else np.zeros(n)
    cluster_idx = rng.integers(spec.n_clusters, size=n)
    cluster_z = rng.standard_normal(spec.n_clusters)
    cluster_shock = rng.standard_normal(spec.n_clusters)
    u = spec.cluster_scale * cluster_z[cluster_idx]

    h_d = spec.assignment_strength * (X[:, 0] + 0.5 * z_first)
    h_t = spec.assignment_strength * 0.5 * X[:, -1]
    if spec.cluster_in_assignment:
        h_d = h_d + spec.assignment_strength * cluster_z[cluster_idx]
    if spec.reverse_causality:
        h_d = h_d + spec.reverse_causality * cluster_shock[cluster_idx]
    logits = np.column_stack([np.zeros(n), h_t, h_d, h_d + h_t])

    lo, hi = spec.propensity_bounds
    rho = (1.0 - 4.0 * lo) * _softmax(logits) + lo
    if (rho > hi).any():
        raise SimulationError(f"cell probabilities exceed the upper bound {hi}; lower assignment_strength")

    draw = rng.random(n)
    cells = np.minimum((draw[:, None] > np.cumsum(rho, axis=1)).sum(axis=1), len(CELLS) - 1)
    d, t = cells // 2, cells % 2

    f, g = _surfaces(spec, X, z_first)
    trend_shift = REVERSE_TREND_SCALE * cluster_shock[cluster_idx] if spec.reverse_causality else np.zeros(n)
    tau = spec.tau + spec.tau_heterogeneity * np.tanh(X[:, 0])

    level = spec.base_rate + f + u
    p_pre = level
    p_post = level + g + trend_shift
    c_lo, c_hi = spec.outcome_clamp

    p0 = np.where(t == 1, p_post, p_pre)
    p1 = p0 + tau * t
    p0c, p1c = np.clip(p0, c_lo, c_hi), np.clip(p1, c_lo, c_hi)
    clamped = float(np.mean((p0c != p0) | (p1c != p1)))
    if clamped > spec.max_clamp_fraction:
        raise SimulationError(
            f"{clamped:.1%} of outcome probabilities left [{c_lo}, {c_hi}] (limit {spec.max_clamp_fraction:.1%})"
        )
    if clamped:
        logger.debug("clamped %.2f%% of outcome probabilities", 100 * clamped)

    if spec.outcome == "binary":
        v = rng.random(n)
        y0 = (v < p0c).astype(float)
        y1 = (v < p1c).astype(float)
    else:
        y0, y1 = p0c, p1c
    y = np.where(cells == TREATED_POST, y1, y0)

    true_mu = np.column_stack([
        np.clip(p_pre, c_lo, c_hi),
        np.clip(p_post, c_lo, c_hi),
        np.clip(p_pre, c_lo, c_hi),
        np.clip(p_post + tau, c_lo, c_hi),
    ])

    frame = pd.DataFrame({
        "row_id": np.arange(n, dtype=np.int64),
        "y": y,
        "d": d.astype(np.int64),
        "t": t.astype(np.int64),
        "cluster": [f"c{i:03d}" for i in cluster_idx],
    })
    for j, name in enumerate(continuous_names(spec)):
        frame[name] = X[:, j]
    for j, name in enumerate(categorical_names(spec)):
        frame[name] = [chr(ord("a") + k) for k in Z[:, j]]
    schema = EncodingSchema.from_frame(frame, continuous_names(spec), categorical_names(spec))
    data = RepeatedCrossSection(frame, schema)
    return SyntheticSample(data, tau, y0, y1, true_mu, rho, spec, clamped)


def oracle_atet(sample: SyntheticSample) -> float:
    """Mean treated-minus-untreated potential outcome over the treated post-period rows."""
    if sample.y0 is None or sample.y1 is None:
        raise SimulationError("sample carries no potential outcomes")
    treated_post = sample.data.cells == TREATED_POST
    if not treated_post.any():
        raise SimulationError("sample has no treated post-period rows")
    return float(np.mean(sample.y1[treated_post] - sample.y0[treated_post]))


def write_csv(sample: SyntheticSample, path: str, with_truth: bool = False) -> None:
    frame = sample.data.frame
    if with_truth:
        frame = frame.assign(y0=sample.y0, y1=sample.y1, tau=sample.tau)
    frame.to_csv(path, index=False)

"""
Everything run on top of the main estimate: placebo tests on control units,
Benjamini-Hochberg adjusted subgroup heterogeneity, covariate robustness, the
main results table and the closed-form elasticity / pass-through conversions.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from diddml.config import CovariateGroups, DidDmlConfig, PlaceboConfig, SubgroupFilter, TwfeSpec
from diddml.data_model import RepeatedCrossSection
from diddml.errors import DataValidationError, DidDmlError, EstimationError
from diddml.estimator import SCHEMA_VERSION, AtetEstimate, estimate_atet, normal_inference
from diddml.parallel import derive_seed, parallel_map
from diddml.parametric_did import fit_twfe

logger = logging.getLogger(__name__)

RESULT_ROWS = ("atet", "se", "p_value", "n", "n_trimmed")


# ----------------------------
#  Closed-form conversions
# ----------------------------
def elasticity(effect_pct: float, price_change_pct: float) -> float:
    """Percent change in the smoking rate per percent change in price."""
    if price_change_pct == 0:
        raise EstimationError("elasticity needs a non-zero price change")
    return effect_pct / price_change_pct


def pass_through(estimated_price_effect: float, mechanical_tax_price_change: float) -> float:
    """Share of the mechanical tax-driven price change that reached retail prices, in percent."""
    if not mechanical_tax_price_change > 0:
        raise EstimationError(f"mechanical price change must be > 0, got {mechanical_tax_price_change}")
    return 100.0 * estimated_price_effect / mechanical_tax_price_change


def tax_induced_price_change_pct(price_effect: float, post_price: float) -> float:
    """Price effect as a percent of the price it would have been without the tax change."""
    base = post_price - price_effect
    if not base > 0:
        raise EstimationError(f"counterfactual price must be > 0, got {base}")
    return 100.0 * price_effect / base


def percent_change_from_atet(atet: float, baseline: float) -> float:
    if not baseline > 0:
        raise EstimationError(f"baseline rate must be > 0, got {baseline}")
    return 100.0 * atet / baseline


def baseline_rate(data: RepeatedCrossSection) -> float:
    """Mean outcome of the treated group before treatment."""
    pre_treated = (data.d == 1) & (data.t == 0)
    if not pre_treated.any():
        raise DataValidationError("no pre-period treated rows for the baseline rate")
    return float(data.y[pre_treated].mean())


def conservative_elasticity(estimate, baseline: float, price_change_pct: float) -> Optional[float]:
    """Elasticity at the confidence bound nearest zero; None when the interval covers zero."""
    lo, hi = estimate.ci95
    if lo <= 0.0 <= hi:
        return None
    bound = hi if hi < 0 else lo
    return elasticity(percent_change_from_atet(bound, baseline), price_change_pct)


# ----------------------------
#  Multiple testing
# ----------------------------
def bh_adjust(p: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValueError(f"expected a 1-d vector of p-values, got shape {p.shape}")
    if not np.isfinite(p).all() or (p < 0).any() or (p > 1).any():
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum(np.minimum.accumulate(ranked[::-1])[::-1], 1.0)
    out = np.empty(m)
    out[order] = adjusted
    return out


# ----------------------------
#  Placebo
# ----------------------------
@dataclass(frozen=True)
class PlaceboResult:
    units: list[str]
    estimates: list[float]
    ses: list[float]
    mean: float
    se: float
    p_value: float
    inference: str
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "inference": self.inference,
            "mean": self.mean,
            "se": self.se,
            "p_value": self.p_value,
            "n_units": len(self.units),
            "units": [{"unit": u, "atet": a, "se": s} for u, a, s in zip(self.units, self.estimates, self.ses)],
            "skipped": [{"unit": u, "reason": r} for u, r in self.skipped],
        }


def _unit_keys(data: RepeatedCrossSection, columns: Sequence[str]) -> np.ndarray:
    parts = []
    for col in columns:
        if col == "cluster":
            parts.append(data.cluster)
        elif col in data.frame.columns:
            parts.append(data.frame[col].astype(str).to_numpy())
        else:
            raise DataValidationError(f"placebo unit column {col!r} not in dataset")
    return np.array(["/".join(vals) for vals in zip(*parts)], dtype=object)


def _placebo_unit(task):
    unit, data, config = task
    try:
        return unit, estimate_atet(data, config), None
    except DidDmlError as e:
        return unit, None, str(e)


def placebo_test(data: RepeatedCrossSection, config: DidDmlConfig,
                 placebo: PlaceboConfig = PlaceboConfig()) -> PlaceboResult:
    """
    Treat each control unit in turn as if it were treated, against all other
    control rows, and pool the resulting placebo effects.

    Units are country x analysis period by default. Units without rows in both
    periods, and units whose estimate fails, are skipped and logged.
    """
    controls = data.subset(data.d == 0)
    if controls.n < data.n:
        logger.info("placebo test uses the %d control rows only", controls.n)
    keys = _unit_keys(controls, placebo.unit_columns)
    units = sorted(set(keys.tolist()))
    if len(units) < 3:
        raise EstimationError(f"placebo test needs at least 3 control units, got {len(units)}")

    tasks, skipped = [], []
    t = controls.t
    for i, unit in enumerate(units):
        mask = keys == unit
        if not (t[mask] == 0).any() or not (t[mask] == 1).any():
            logger.warning("placebo unit %s lacks a pre or post period; skipped", unit)
            skipped.append((unit, "lacks both periods"))
            continue
        unit_config = config.model_copy(update={"seed": derive_seed(config.seed, i), "threads": 1})
        tasks.append((unit, controls.relabel(d=mask.astype(np.int64)), unit_config))

    results = parallel_map(_placebo_unit, tasks, config.threads)
    names, estimates, ses = [], [], []
    for unit, est, error in results:
        if est is None:
            logger.warning("placebo unit %s failed: %s", unit, error)
            skipped.append((unit, error))
            continue
        names.append(unit)
        estimates.append(est.atet)
        ses.append(est.se)
    if len(estimates) < 2:
        raise EstimationError(f"placebo test produced {len(estimates)} estimate(s); need at least 2")

    values = np.asarray(estimates)
    mean = float(values.mean())
    if placebo.inference == "across_units":
        se = float(values.std(ddof=1) / np.sqrt(len(values)))
        p_value = float(stats.ttest_1samp(values, 0.0).pvalue) if se > 0 else (1.0 if mean == 0 else 0.0)
    else:
        se = float(np.sqrt(np.sum(np.square(ses))) / len(ses))
        p_value, _ = normal_inference(mean, se)
    logger.info("placebo: %d units, mean %.5f, p %.3f (%s)", len(values), mean, p_value, placebo.inference)
    return PlaceboResult(names, estimates, ses, mean, se, p_value, placebo.inference, skipped)


# ----------------------------
#  Heterogeneity
# ----------------------------
@dataclass(frozen=True)
class SubgroupResult:
    name: str
    family: str
    estimate: Optional[AtetEstimate]
    error: Optional[str] = None
    p_adjusted: Optional[float] = None

    @property
    def feasible(self) -> bool:
        return self.estimate is not None


@dataclass(frozen=True)
class SubgroupGrid:
    results: list[SubgroupResult]

    def __len__(self):
        return len(self.results)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.results:
            est = r.estimate
            rows.append({
                "group": r.name, "family": r.family,
                "atet": est.atet if est else np.nan, "se": est.se if est else np.nan,
                "p_value": est.p_value if est else np.nan,
                "p_adjusted": r.p_adjusted if r.p_adjusted is not None else np.nan,
                "n": est.n_used if est else 0, "n_trimmed": est.n_trimmed if est else 0,
                "status": "ok" if est else f"infeasible: {r.error}",
            })
        return pd.DataFrame(rows)


def subgroup_mask(data: RepeatedCrossSection, flt: SubgroupFilter) -> np.ndarray:
    if flt.column not in data.frame.columns:
        raise DataValidationError(f"subgroup {flt.name!r}: column {flt.column!r} not in dataset")
    column = data.frame[flt.column]
    if flt.levels is not None:
        return column.astype(str).isin(flt.levels).to_numpy()
    values = pd.to_numeric(column, errors="coerce").to_numpy(dtype=float)
    lo, hi = flt.bounds
    mask = ~np.isnan(values)
    if lo is not None:
        mask &= values >= lo
    if hi is not None:
        mask &= values <= hi
    return mask


def _subgroup_cell(task):
    flt, data, config = task
    try:
        return estimate_atet(data, config), None
    except DidDmlError as e:
        return None, str(e)


def subgroup_run(data: RepeatedCrossSection, grid: Sequence[SubgroupFilter], config: DidDmlConfig) -> SubgroupGrid:
    """One estimate per filter; BH adjustment within each family over the feasible cells."""
    inner = config.model_copy(update={"threads": 1})
    tasks = [(flt, data.subset(subgroup_mask(data, flt)), inner) for flt in grid]
    outcomes = parallel_map(_subgroup_cell, tasks, config.threads)

    adjusted = {}
    for family in dict.fromkeys(f.family for f in grid):
        idx = [i for i, f in enumerate(grid) if f.family == family and outcomes[i][0] is not None]
        if idx:
            for i, q in zip(idx, bh_adjust([outcomes[i][0].p_value for i in idx])):
                adjusted[i] = float(q)

    results = []
    for i, (flt, (est, error)) in enumerate(zip(grid, outcomes)):
        if est is None:
            logger.warning("subgroup %s infeasible: %s", flt.name, error)
        results.append(SubgroupResult(flt.name, flt.family, est, error, adjusted.get(i)))
    return SubgroupGrid(results)


# ----------------------------
#  Robustness and the main table
# ----------------------------
def _present(data: RepeatedCrossSection, names: Iterable[str]) -> list[str]:
    names = list(dict.fromkeys(names))
    missing = [c for c in names if c not in data.schema.covariates]
    if missing:
        logger.warning("covariate(s) %s not in dataset; left out", missing)
    return [c for c in names if c in data.schema.covariates]


def estimates_frame(records: Mapping[str, dict]) -> pd.DataFrame:
    """Results side by side: one column per estimate, rows atet / se / p_value / n / n_trimmed."""
    return pd.DataFrame({name: [rec.get(row) for row in RESULT_ROWS] for name, rec in records.items()},
                        index=list(RESULT_ROWS))


def covariate_robustness(data: RepeatedCrossSection, covariate_sets: Mapping[str, Sequence[str]],
                         config: DidDmlConfig) -> dict[str, AtetEstimate]:
    out = {}
    for name, covariates in covariate_sets.items():
        logger.info("covariate set %s", name)
        out[name] = estimate_atet(data, config, covariates=_present(data, covariates))
    return out


@dataclass(frozen=True)
class MainTable:
    columns: dict[str, dict]

    def to_frame(self) -> pd.DataFrame:
        return estimates_frame(self.columns)


def main_table(data: RepeatedCrossSection, config: DidDmlConfig, twfe: TwfeSpec, groups: CovariateGroups,
               full_sample: Optional[RepeatedCrossSection] = None) -> MainTable:
    """
    The standard results table:
    (1)-(4) DiDDML on each covariate set, (5) DiDDML with all covariates and
    unclustered errors, (6) TWFE with the binary treatment, (7) TWFE with the
    policy level, (8) the policy-level TWFE on ``full_sample`` when given.
    """
    sets = groups.sets()
    columns = {}
    for i, (name, estimate) in enumerate(covariate_robustness(data, sets, config).items(), start=1):
        columns[f"({i}) diddml {name}"] = estimate.to_record()

    everything = _present(data, sets["all"])
    unclustered = config.model_copy(update={"cluster": False})
    columns["(5) diddml all unclustered"] = estimate_atet(data, unclustered, covariates=everything).to_record()

    binary = twfe.model_copy(update={"treatment": "binary", "covariates": everything})
    columns["(6) twfe binary"] = fit_twfe(data, binary).to_record()

    continuous = twfe.model_copy(update={"treatment": "continuous", "covariates": everything})
    if twfe.policy_column in data.frame.columns:
        columns["(7) twfe continuous"] = fit_twfe(data, continuous).to_record()
    else:
        logger.warning("no %s column; continuous TWFE columns left out", twfe.policy_column)
    if full_sample is not None and twfe.policy_column in full_sample.frame.columns:
        full = continuous.model_copy(update={"covariates": _present(full_sample, everything)})
        columns["(8) twfe continuous full sample"] = fit_twfe(full_sample, full).to_record()
    return MainTable(columns)


def period_split(data: RepeatedCrossSection, config: DidDmlConfig) -> dict[str, AtetEstimate]:
    """Main estimator on each analysis period separately."""
    if "analysis_period" not in data.frame.columns:
        raise DataValidationError("dataset has no analysis_period column")
    covariates = None
    if config.covariates is not None:
        covariates = [c for c in config.covariates if c != "analysis_period"]
    out = {}
    for period in sorted(data.frame["analysis_period"].astype(str).unique()):
        subset = data.select_periods(period)
        out[period] = estimate_atet(subset, config, covariates=covariates)
    return out

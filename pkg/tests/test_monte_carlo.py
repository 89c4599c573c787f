"""
Monte Carlo properties of the estimators on the synthetic process.

The frozen-nuisance checks are quick; the cross-fitted ones are marked slow
and only run with ``pytest -m slow``.
"""

import numpy as np
import pytest

from diddml.analysis_suite import placebo_test
from diddml.config import (
    DgpSpec, DidDmlConfig, ForestConfig, PlaceboConfig, SimulationConfig, TwfeSpec, default_threads,
)
from diddml.estimator import NuisancePredictions, estimate_atet, treated_post_share
from diddml.parallel import derive_seed
from diddml.simulation import run_replications
from diddml.synthetic_dgp import generate

FROZEN = DidDmlConfig(trim=0.0, cluster=False)
MC_FORESTS = DidDmlConfig(folds=5, cluster=False, regression=ForestConfig(n_trees=100),
                          probability=ForestConfig(n_trees=100))


def _cell_constant_mu(sample):
    cells = sample.data.cells
    means = np.array([sample.data.y[cells == c].mean() for c in range(4)])
    return np.tile(means, (sample.data.n, 1))


def _cell_share_rho(sample):
    shares = np.bincount(sample.data.cells, minlength=4) / sample.data.n
    return np.tile(shares, (sample.data.n, 1))


def test_wrong_outcome_model_with_true_propensities_stays_unbiased():
    errors = []
    for rep in range(200):
        sample = generate(DgpSpec(n=5000, tau=-0.03, seed=derive_seed(101, rep)))
        pi = treated_post_share(sample.data.cells)
        nuisances = NuisancePredictions(_cell_constant_mu(sample), sample.true_rho, pi)
        errors.append(estimate_atet(sample.data, FROZEN, nuisances=nuisances).atet + 0.03)
    assert abs(np.mean(errors)) < 0.01


def test_wrong_propensities_with_true_outcome_model_stay_unbiased():
    errors = []
    for rep in range(200):
        sample = generate(DgpSpec(n=5000, tau=-0.03, seed=derive_seed(202, rep)))
        pi = treated_post_share(sample.data.cells)
        nuisances = NuisancePredictions(sample.true_mu, _cell_share_rho(sample), pi)
        errors.append(estimate_atet(sample.data, FROZEN, nuisances=nuisances).atet + 0.03)
    assert abs(np.mean(errors)) < 0.01


@pytest.mark.slow
def test_linear_process_bias():
    sim = SimulationConfig(dgp=DgpSpec(n=20_000, tau=-0.03), replications=200)
    result = run_replications(sim, MC_FORESTS, seed=1, threads=default_threads(), progress=False)
    assert abs(result.summary.loc["diddml", "mean"] + 0.03) <= 0.005
    assert abs(result.summary.loc["twfe_binary", "mean"] + 0.03) <= 0.005


@pytest.mark.slow
def test_interval_coverage():
    sim = SimulationConfig(dgp=DgpSpec(n=5000, tau=-0.03), replications=500, estimators=["diddml"])
    result = run_replications(sim, MC_FORESTS, seed=2, threads=default_threads(), progress=False)
    assert 0.93 <= result.summary.loc["diddml", "coverage"] <= 0.97


@pytest.mark.slow
def test_nonlinear_surface_separates_the_estimators():
    sim = SimulationConfig(dgp=DgpSpec(n=5000, tau=-0.03, surface="nonlinear"), replications=200)
    result = run_replications(sim, MC_FORESTS, TwfeSpec(), seed=3, threads=default_threads(), progress=False)
    ml_bias = abs(result.summary.loc["diddml", "bias"])
    ols_bias = abs(result.summary.loc["twfe_binary", "bias"])
    assert ml_bias < 0.01
    assert ols_bias > 3 * ml_bias


PLACEBO_FORESTS = DidDmlConfig(folds=3, regression=ForestConfig(n_trees=50), probability=ForestConfig(n_trees=50))


def _placebo_runs(placebo, seeds=100):
    config = PLACEBO_FORESTS.model_copy(update={"threads": default_threads()})
    means, rejections = [], 0
    for rep in range(seeds):
        sample = generate(DgpSpec(n=3000, n_clusters=8, tau=0.0, assignment_strength=0.0, seed=derive_seed(7, rep)))
        controls = sample.data.subset(sample.data.d == 0)
        result = placebo_test(controls, config.model_copy(update={"seed": rep}), placebo)
        means.append(result.mean)
        rejections += result.p_value <= 0.05
    return float(np.mean(means)), rejections


@pytest.mark.slow
def test_placebo_null_on_control_units():
    """The pooled influence test is the one held to a 5% rejection rate over 100 null seeds."""
    mean, rejections = _placebo_runs(PlaceboConfig(unit_columns=["cluster"], inference="pooled_influence"))
    assert rejections <= 5
    assert abs(mean) <= 0.01


@pytest.mark.slow
def test_placebo_null_with_the_default_across_units_test():
    # t-test over eight units per seed
    mean, rejections = _placebo_runs(PlaceboConfig(unit_columns=["cluster"]))
    assert rejections <= 10
    assert abs(mean) <= 0.01

from types import SimpleNamespace

import numpy as np
import pytest

from diddml.analysis_suite import (
    RESULT_ROWS, baseline_rate, bh_adjust, conservative_elasticity, covariate_robustness, elasticity,
    estimates_frame, main_table, pass_through, percent_change_from_atet, period_split, placebo_test,
    subgroup_mask, subgroup_run, tax_induced_price_change_pct,
)
from diddml.config import CovariateGroups, PlaceboConfig, SubgroupFilter, TwfeSpec
from diddml.errors import DataValidationError, EstimationError

from conftest import make_dataset


# ----------------------------
#  Conversions
# ----------------------------
def test_elasticity_and_pass_through():
    assert -5.9 <= elasticity(-15.0, 2.61) <= -5.6
    assert 75.0 <= pass_through(0.22, 0.29) <= 79.0
    assert tax_induced_price_change_pct(0.22, 8.65) == pytest.approx(2.61, abs=0.01)
    assert percent_change_from_atet(-0.03, 0.2) == pytest.approx(-15.0)
    with pytest.raises(EstimationError):
        elasticity(-15.0, 0.0)
    with pytest.raises(EstimationError):
        pass_through(0.22, 0.0)


def test_conservative_elasticity_uses_the_bound_nearest_zero():
    estimate = SimpleNamespace(ci95=(-0.05, -0.01))
    assert conservative_elasticity(estimate, 0.2, 2.61) == pytest.approx(-5.0 / 2.61)
    assert conservative_elasticity(SimpleNamespace(ci95=(-0.02, 0.01)), 0.2, 2.61) is None


def test_baseline_rate(balanced_data):
    pre_treated = (balanced_data.d == 1) & (balanced_data.t == 0)
    assert baseline_rate(balanced_data) == pytest.approx(balanced_data.y[pre_treated].mean())


# ----------------------------
#  Benjamini-Hochberg
# ----------------------------
def _bh_brute_force(p):
    m = len(p)
    rank = np.array([(p <= v).sum() for v in p])
    return np.array([min(1.0, min(p[j] * m / rank[j] for j in range(m) if p[j] >= p[i])) for i in range(m)])


def test_bh_small_example():
    np.testing.assert_allclose(bh_adjust([0.01, 0.04, 0.03, 0.005]), [0.02, 0.04, 0.04, 0.02])
    np.testing.assert_array_equal(bh_adjust([0.3]), [0.3])
    assert bh_adjust([]).shape == (0,)


def test_bh_matches_brute_force_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        m = int(rng.integers(1, 15))
        p = np.round(rng.random(m), 2)
        adjusted = bh_adjust(p)
        np.testing.assert_array_equal(adjusted, _bh_brute_force(p))
        assert (adjusted >= p - 1e-15).all()
        assert (adjusted <= 1.0).all()
        order = np.argsort(p, kind="stable")
        assert (np.diff(adjusted[order]) >= -1e-15).all()


@pytest.mark.parametrize("bad", [[0.1, -0.1], [1.2], [np.nan], [[0.1, 0.2]]])
def test_bh_rejects_values_outside_the_unit_interval(bad):
    with pytest.raises(ValueError):
        bh_adjust(bad)


# ----------------------------
#  Placebo
# ----------------------------
def _control_countries(n_countries=4, rows=60, seed=0, half_country=False):
    rng = np.random.default_rng(seed)
    y, d, t, cluster, x1 = [], [], [], [], []
    for c in range(n_countries):
        y += (rng.random(rows) < 0.3).astype(float).tolist()
        d += [0] * rows
        t += [0] * (rows // 2) + [1] * (rows - rows // 2)
        cluster += [f"k{c}"] * rows
        x1 += rng.standard_normal(rows).tolist()
    if half_country:
        y += [0.0, 1.0] * 10
        d += [0] * 20
        t += [0] * 20
        cluster += ["only_pre"] * 20
        x1 += rng.standard_normal(20).tolist()
    # a few treated rows, which the placebo test ignores
    y += [1.0, 0.0] * 4
    d += [1] * 8
    t += [0, 1] * 4
    cluster += ["treated"] * 8
    x1 += [0.0] * 8
    return make_dataset(y, d, t, cluster, covariates={"x1": x1})


BY_COUNTRY = PlaceboConfig(unit_columns=["cluster"])


def test_placebo_estimates_one_effect_per_control_unit(fast_config):
    result = placebo_test(_control_countries(), fast_config, BY_COUNTRY)
    assert result.units == ["k0", "k1", "k2", "k3"]
    assert len(result.estimates) == 4
    assert np.isfinite(result.estimates).all()
    values = np.asarray(result.estimates)
    assert result.mean == pytest.approx(values.mean())
    assert result.se == pytest.approx(values.std(ddof=1) / 2.0)
    assert 0.0 <= result.p_value <= 1.0
    assert result.to_record()["n_units"] == 4


def test_placebo_is_invariant_to_row_order(fast_config):
    data = _control_countries(seed=1)
    first = placebo_test(data, fast_config, BY_COUNTRY)
    perm = np.random.default_rng(2).permutation(data.n)
    second = placebo_test(data.take(perm), fast_config, BY_COUNTRY)
    assert first.estimates == second.estimates
    assert first.mean == second.mean


def test_placebo_pooled_influence_inference(fast_config):
    pooled = PlaceboConfig(unit_columns=["cluster"], inference="pooled_influence")
    result = placebo_test(_control_countries(seed=3), fast_config, pooled)
    assert result.se == pytest.approx(np.sqrt(np.sum(np.square(result.ses))) / 4)
    assert result.inference == "pooled_influence"


def test_placebo_skips_units_missing_a_period(fast_config):
    result = placebo_test(_control_countries(seed=4, half_country=True), fast_config, BY_COUNTRY)
    assert "only_pre" not in result.units
    assert result.skipped == [("only_pre", "lacks both periods")]


def test_placebo_needs_three_units(fast_config):
    with pytest.raises(EstimationError, match="at least 3"):
        placebo_test(_control_countries(n_countries=2), fast_config, BY_COUNTRY)
    with pytest.raises(DataValidationError, match="analysis_period"):
        placebo_test(_control_countries(), fast_config)


# ----------------------------
#  Heterogeneity
# ----------------------------
GRID = [
    SubgroupFilter(name="x1_low", column="x1", bounds=(None, 0.0), family="x1"),
    SubgroupFilter(name="x1_high", column="x1", bounds=(0.0, None), family="x1"),
    SubgroupFilter(name="everyone", column="x1", bounds=(None, None), family="other"),
    SubgroupFilter(name="nobody", column="x1", bounds=(10.0, None), family="other"),
]


def test_subgroup_mask(balanced_data):
    assert subgroup_mask(balanced_data, GRID[3]).sum() == 0
    assert subgroup_mask(balanced_data, GRID[2]).all()
    with pytest.raises(DataValidationError):
        subgroup_mask(balanced_data, SubgroupFilter(name="g", column="gender", levels=["Man"]))
    with pytest.raises(ValueError):
        SubgroupFilter(name="g", column="gender")


def test_subgroup_grid_adjusts_within_families(balanced_data, fast_config):
    grid = subgroup_run(balanced_data, GRID, fast_config)
    frame = grid.to_frame()
    assert list(frame.columns) == ["group", "family", "atet", "se", "p_value", "p_adjusted", "n", "n_trimmed",
                                   "status"]
    assert frame["group"].tolist() == ["x1_low", "x1_high", "everyone", "nobody"]

    low, high, everyone, nobody = grid.results
    np.testing.assert_allclose([low.p_adjusted, high.p_adjusted],
                               bh_adjust([low.estimate.p_value, high.estimate.p_value]))
    # a single feasible cell in its family is left as is
    assert everyone.p_adjusted == pytest.approx(everyone.estimate.p_value)
    assert not nobody.feasible
    assert nobody.p_adjusted is None
    assert frame.loc[3, "status"].startswith("infeasible")
    assert np.isnan(frame.loc[3, "p_adjusted"])
    feasible = frame.iloc[:3]
    assert (feasible["p_adjusted"] >= feasible["p_value"]).all()


# ----------------------------
#  Robustness and tables
# ----------------------------
def test_covariate_sets_ignore_unknown_names(balanced_data, fast_config, caplog):
    with caplog.at_level("WARNING"):
        results = covariate_robustness(balanced_data, {"a": ["x1"], "b": ["x1", "education"]}, fast_config)
    assert results["a"].to_record() == results["b"].to_record()
    assert "education" in caplog.text


def test_estimates_frame_layout():
    frame = estimates_frame({"one": {"atet": -0.03, "se": 0.01, "p_value": 0.003, "n": 10, "n_trimmed": 0}})
    assert list(frame.index) == list(RESULT_ROWS)
    assert frame.loc["atet", "one"] == -0.03


def test_main_table_columns(balanced_data, fast_config):
    groups = CovariateGroups(history=[], always=[], socio=["x1"], policy=["x2"])
    table = main_table(balanced_data, fast_config, TwfeSpec(), groups)
    assert list(table.columns) == [
        "(1) diddml history", "(2) diddml history_socio", "(3) diddml history_policy", "(4) diddml all",
        "(5) diddml all unclustered", "(6) twfe binary",
    ]
    assert table.columns["(4) diddml all"]["atet"] == table.columns["(5) diddml all unclustered"]["atet"]
    assert table.columns["(5) diddml all unclustered"]["clustered"] is False
    assert table.to_frame().shape == (len(RESULT_ROWS), 6)


def test_period_split_needs_the_stacking_column(balanced_data, fast_config):
    with pytest.raises(DataValidationError):
        period_split(balanced_data, fast_config)

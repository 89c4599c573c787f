import pandas as pd
import pytest

from diddml.config import AssignmentRule
from diddml.data_model import SurveyWaves
from diddml.errors import AssignmentError, DataValidationError
from diddml.policy_assignment import (
    Label, PolicyPanel, PolicyRecord, assign, assign_change, group_change_summary, join, load_panel_csv,
    pct_change, period_map_from, write_assignment_csv,
)

from conftest import PERIODS, PRICE_TABLE, TAX_TABLE, expected_labels, panel_frame

PRICE_RULE = AssignmentRule.default("price_ppp")
TAX_RULE = AssignmentRule.default("tax_share")


@pytest.mark.parametrize("table,measure,rule", [
    (PRICE_TABLE, "price_ppp", PRICE_RULE),
    (TAX_TABLE, "tax_share", TAX_RULE),
])
def test_published_labels_reproduced_from_pre_and_post_values(table, measure, rule):
    assignment = assign(PolicyPanel.from_frame(panel_frame(table, measure)), rule)
    expected = expected_labels(table)
    got = {key: entry.label.value for key, entry in assignment.entries.items()}
    assert got == expected


@pytest.mark.parametrize("table,rule", [(PRICE_TABLE, PRICE_RULE), (TAX_TABLE, TAX_RULE)])
def test_published_labels_reproduced_from_printed_changes(table, rule):
    expected = expected_labels(table)
    for country, values in table.items():
        for k, period in enumerate(PERIODS):
            assert assign_change(values[4 * k + 2], rule).value == expected[(country, period)], (country, period)


def test_pct_change():
    assert pct_change(0.80, 0.84) == pytest.approx(5.0)
    with pytest.raises(AssignmentError):
        pct_change(0.0, 1.0)


def test_assign_change_boundaries():
    assert assign_change(15.0, PRICE_RULE) is Label.EXCLUDED
    assert assign_change(15.004, PRICE_RULE) is Label.EXCLUDED  # rounds to 15.00
    assert assign_change(15.01, PRICE_RULE) is Label.TREATED
    assert assign_change(5.0, PRICE_RULE) is Label.CONTROL
    assert assign_change(-5.0, PRICE_RULE) is Label.CONTROL
    assert assign_change(-5.01, PRICE_RULE) is Label.EXCLUDED
    assert assign_change(0.0, TAX_RULE) is Label.CONTROL
    assert assign_change(-0.001, TAX_RULE) is Label.CONTROL
    assert assign_change(0.01, TAX_RULE) is Label.EXCLUDED
    assert assign_change(2.0, TAX_RULE) is Label.EXCLUDED
    assert assign_change(2.01, TAX_RULE) is Label.TREATED


def test_rule_requires_threshold_above_band():
    with pytest.raises(ValueError):
        AssignmentRule(measure="price_ppp", treat_threshold_pct=4.0, control_band_pct=(-5.0, 5.0))
    with pytest.raises(ValueError):
        AssignmentRule(measure="price_ppp", treat_threshold_pct=15.0, control_band_pct=(5.0, -5.0))


def test_group_change_summary_overall_means():
    tax = group_change_summary(assign(PolicyPanel.from_frame(panel_frame(TAX_TABLE, "tax_share")), TAX_RULE))
    price = group_change_summary(assign(PolicyPanel.from_frame(panel_frame(PRICE_TABLE, "price_ppp")), PRICE_RULE))
    assert tax.loc["Overall", "Treated"] == pytest.approx(4.13, abs=0.01)
    assert tax.loc["Overall", "Control"] == pytest.approx(0.0)
    assert price.loc["Overall", "Treated"] == pytest.approx(27.20, abs=0.05)


def test_invalid_panel_records():
    with pytest.raises(AssignmentError):
        PolicyRecord("AT", "2012-2014", 0.0, 1.0, "price_ppp")
    with pytest.raises(AssignmentError):
        PolicyRecord("AT", "2012-2014", 0.8, 1.2, "tax_share")
    with pytest.raises(AssignmentError):
        PolicyRecord("AT", "2012-2014", 0.8, 0.7, "excise")
    record = PolicyRecord("AT", "2012-2014", 0.8, 0.7, "tax_share")
    with pytest.raises(AssignmentError, match="duplicate"):
        PolicyPanel((record, record))


def test_panel_csv_round_trip_through_assignment_csv(tmp_path):
    path = tmp_path / "policy.csv"
    panel_frame(PRICE_TABLE, "price_ppp").to_csv(path, index=False)
    assignment = assign(load_panel_csv(str(path)), PRICE_RULE)
    out = tmp_path / "assignment.csv"
    write_assignment_csv(assignment, str(out))
    written = pd.read_csv(out)
    assert list(written.columns) == ["country", "period", "measure", "pre_value", "post_value", "change_pct",
                                     "label", "D"]
    denmark = written[(written["country"] == "Denmark") & (written["period"] == "2018-2020")].iloc[0]
    assert denmark["label"] == "Treated"
    assert denmark["D"] == 1
    assert len(written) == 54


def _survey():
    rows = []
    for country in ("Denmark", "France", "Austria", "Germany"):
        for year in (2018, 2020):
            for i in range(3):
                rows.append({"row_id": len(rows), "y": float(i % 2), "cluster": country, "year": year,
                             "age": 20.0 + i})
    rows.append({"row_id": len(rows), "y": 1.0, "cluster": "Atlantis", "year": 2018, "age": 30.0})
    return SurveyWaves(pd.DataFrame(rows), ("age",), ())


def _price_assignment():
    return assign(PolicyPanel.from_frame(panel_frame(PRICE_TABLE, "price_ppp")), PRICE_RULE)


def test_join_attaches_treatment_and_drops_excluded_and_unmatched(caplog):
    period_map = period_map_from({"2018-2020": (2018, 2020)})
    with caplog.at_level("INFO"):
        data = join(_price_assignment(), _survey(), period_map)
    # Germany 2018-2020 is excluded, Atlantis has no record
    assert sorted(set(data.cluster)) == ["Austria", "Denmark", "France"]
    assert data.n == 18
    treated = data.frame[data.frame["cluster"] == "Denmark"]
    assert set(treated["d"]) == {1}
    assert treated.loc[treated["t"] == 0, "policy_level"].iloc[0] == pytest.approx(6.79)
    assert treated.loc[treated["t"] == 1, "policy_level"].iloc[0] == pytest.approx(9.20)
    assert set(treated["pre_policy_level"]) == {6.79}
    assert "pre_policy_level" in data.schema.continuous
    assert "analysis_period" in data.schema.covariates
    assert "no price_ppp record" in caplog.text


def test_join_can_keep_excluded_countries():
    period_map = period_map_from({"2018-2020": (2018, 2020)})
    data = join(_price_assignment(), _survey(), period_map, keep_excluded=True)
    germany = data.frame[data.frame["cluster"] == "Germany"]
    assert len(germany) == 6
    assert set(germany["d"]) == {0}
    assert set(germany["assignment"]) == {"Excluded"}


def test_join_rejects_years_outside_the_period_map():
    with pytest.raises(AssignmentError, match="2020"):
        join(_price_assignment(), _survey(), {2018: ("2018-2020", 0)})


def test_join_without_a_treated_country_fails():
    survey = _survey()
    frame = survey.frame[survey.frame["cluster"] != "Denmark"].reset_index(drop=True)
    frame = frame[frame["cluster"] != "France"].reset_index(drop=True)
    with pytest.raises(DataValidationError, match="empty"):
        join(_price_assignment(), SurveyWaves(frame, ("age",), ()), period_map_from({"2018-2020": (2018, 2020)}))


def test_period_map_rejects_overlapping_years():
    with pytest.raises(AssignmentError):
        period_map_from({"a": (2012, 2014), "b": (2014, 2016)})

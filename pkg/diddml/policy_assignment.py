"""
Turns country-level price and tax-share panels into Treated / Control /
Excluded labels and joins them onto survey waves.
"""

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from diddml.config import AssignmentRule, Measure
from diddml.data_model import EncodingSchema, RepeatedCrossSection, SurveyWaves
from diddml.errors import AssignmentError

logger = logging.getLogger(__name__)

MEASURES = ("price_ppp", "tax_share")


class Label(str, Enum):
    TREATED = "Treated"
    CONTROL = "Control"
    EXCLUDED = "Excluded"


@dataclass(frozen=True)
class PolicyRecord:
    country: str
    analysis_period: str
    pre_value: float
    post_value: float
    measure: Measure

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise AssignmentError(f"unknown measure {self.measure!r} for {self.country} {self.analysis_period}")
        for what, value in (("pre", self.pre_value), ("post", self.post_value)):
            if not math.isfinite(value) or value < 0:
                raise AssignmentError(f"{what} value {value} for {self.country} {self.analysis_period} must be >= 0")
        if self.pre_value <= 0:
            raise AssignmentError(f"pre value for {self.country} {self.analysis_period} must be > 0")
        if self.measure == "tax_share":
            for value in (self.pre_value, self.post_value):
                if not 0.0 < value < 1.0:
                    raise AssignmentError(
                        f"tax share {value} for {self.country} {self.analysis_period} must lie in (0, 1)"
                    )


@dataclass(frozen=True)
class PolicyPanel:
    records: tuple[PolicyRecord, ...]

    def __post_init__(self):
        keys = [(r.country, r.analysis_period, r.measure) for r in self.records]
        dupes = sorted({k for k in keys if keys.count(k) > 1})
        if dupes:
            raise AssignmentError(f"duplicate panel records: {dupes}")

    def __len__(self):
        return len(self.records)

    def for_measure(self, measure: Measure) -> "PolicyPanel":
        return PolicyPanel(tuple(r for r in self.records if r.measure == measure))

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "PolicyPanel":
        needed = ["country", "period", "pre_value", "post_value", "measure"]
        missing = [c for c in needed if c not in frame.columns]
        if missing:
            raise AssignmentError(f"policy panel lacks columns {missing}")
        records = []
        for row in frame.itertuples(index=False):
            try:
                pre, post = float(row.pre_value), float(row.post_value)
            except (TypeError, ValueError):
                raise AssignmentError(f"non-numeric policy values for {row.country} {row.period}")
            records.append(PolicyRecord(str(row.country), str(row.period), pre, post, str(row.measure)))
        return cls(tuple(records))


def load_panel_csv(path: str, delimiter: str = ",") -> PolicyPanel:
    try:
        frame = pd.read_csv(path, sep=delimiter, dtype={"country": str, "period": str, "measure": str},
                            encoding="utf-8")
    except FileNotFoundError:
        raise AssignmentError(f"policy file not found: {path}")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise AssignmentError(f"unreadable policy file {path}: {e}")
    return PolicyPanel.from_frame(frame)


def pct_change(pre: float, post: float) -> float:
    if not pre > 0:
        raise AssignmentError(f"percent change needs pre > 0, got {pre}")
    return 100.0 * (post - pre) / pre


def assign_change(change_pct: float, rule: AssignmentRule) -> Label:
    """Label for one percent change: strict threshold for Treated, closed band for Control."""
    value = round(change_pct, rule.round_decimals) if rule.round_decimals is not None else change_pct
    # -0.0 after rounding compares equal to 0.0
    lo, hi = rule.control_band_pct
    if value > rule.treat_threshold_pct:
        return Label.TREATED
    if lo <= value <= hi:
        return Label.CONTROL
    return Label.EXCLUDED


@dataclass(frozen=True)
class AssignmentEntry:
    country: str
    analysis_period: str
    pre_value: float
    post_value: float
    change_pct: float
    label: Label

    @property
    def d(self) -> Optional[int]:
        return {Label.TREATED: 1, Label.CONTROL: 0}.get(self.label)


@dataclass(frozen=True)
class TreatmentAssignment:
    measure: Measure
    entries: Mapping[tuple[str, str], AssignmentEntry]

    def label(self, country: str, analysis_period: str) -> Label:
        return self.entries[(country, analysis_period)].label

    def counts(self) -> dict[Label, int]:
        out = {label: 0 for label in Label}
        for entry in self.entries.values():
            out[entry.label] += 1
        return out

    def to_frame(self) -> pd.DataFrame:
        rows = [{
            "country": e.country, "period": e.analysis_period, "measure": self.measure,
            "pre_value": e.pre_value, "post_value": e.post_value,
            "change_pct": round(e.change_pct, 2), "label": e.label.value,
            "D": "" if e.d is None else e.d,
        } for e in self.entries.values()]
        return pd.DataFrame(rows).sort_values(["country", "period"]).reset_index(drop=True)


def assign(panel: PolicyPanel, rule: AssignmentRule) -> TreatmentAssignment:
    records = panel.for_measure(rule.measure).records
    if not records:
        raise AssignmentError(f"policy panel has no {rule.measure} records")
    entries = {}
    for r in records:
        change = pct_change(r.pre_value, r.post_value)
        entries[(r.country, r.analysis_period)] = AssignmentEntry(
            r.country, r.analysis_period, r.pre_value, r.post_value, change, assign_change(change, rule)
        )
    assignment = TreatmentAssignment(rule.measure, entries)
    counts = assignment.counts()
    logger.info("%s assignment: %d treated, %d control, %d excluded", rule.measure,
                counts[Label.TREATED], counts[Label.CONTROL], counts[Label.EXCLUDED])
    return assignment


def write_assignment_csv(assignment: TreatmentAssignment, path: str) -> None:
    assignment.to_frame().to_csv(path, index=False, quoting=csv.QUOTE_MINIMAL)


def group_change_summary(assignment: TreatmentAssignment) -> pd.DataFrame:
    """Mean percent change per analysis period and label, plus an overall row."""
    frame = assignment.to_frame()
    frame = frame[frame["label"] != Label.EXCLUDED.value]
    frame = frame.assign(change=[assignment.entries[(c, p)].change_pct
                                 for c, p in zip(frame["country"], frame["period"])])
    by_period = frame.pivot_table(index="period", columns="label", values="change", aggfunc="mean")
    overall = frame.groupby("label")["change"].mean().rename("Overall").to_frame().T
    return pd.concat([by_period, overall])


# ----------------------------
#  Join onto survey waves
# ----------------------------
def period_map_from(periods: Mapping[str, tuple[int, int]]) -> dict[int, tuple[str, int]]:
    """``{"2018-2020": (2018, 2020)}`` -> ``{2018: ("2018-2020", 0), 2020: ("2018-2020", 1)}``."""
    out = {}
    for label, (pre_year, post_year) in periods.items():
        for year, t in ((int(pre_year), 0), (int(post_year), 1)):
            if year in out:
                raise AssignmentError(f"year {year} appears in more than one analysis period")
            out[year] = (label, t)
    return out


def join(assignment: TreatmentAssignment, survey: SurveyWaves,
         period_map: Mapping[int, tuple[str, int]], keep_excluded: bool = False) -> RepeatedCrossSection:
    """
    Attach d and t to survey rows and drop Excluded countries.

    Adds the stacking dummy ``analysis_period`` and the pre-treatment policy
    level ``pre_policy_level`` as covariates, and the current level
    ``policy_level`` plus the ``assignment`` label as pass-through columns.
    """
    frame = survey.frame.copy()
    years = frame["year"].to_numpy()
    unknown_years = sorted(set(int(y) for y in years) - set(period_map))
    if unknown_years:
        raise AssignmentError(f"year(s) {unknown_years} not in period map {sorted(period_map)}")

    frame["analysis_period"] = [period_map[int(y)][0] for y in years]
    frame["t"] = np.array([period_map[int(y)][1] for y in years], dtype=np.int64)

    entries = [assignment.entries.get((c, p)) for c, p in zip(frame["cluster"], frame["analysis_period"])]
    unmatched = np.array([e is None for e in entries])
    if unmatched.any():
        logger.warning("dropped %d survey row(s) whose country/period has no %s record",
                       int(unmatched.sum()), assignment.measure)
    labels = np.array([e.label.value if e is not None else "" for e in entries], dtype=object)
    keep = ~unmatched
    if not keep_excluded:
        excluded = labels == Label.EXCLUDED.value
        logger.info("dropped %d survey row(s) from excluded countries", int(excluded.sum()))
        keep &= ~excluded

    frame["assignment"] = labels
    frame["d"] = np.array([1 if e is not None and e.label is Label.TREATED else 0 for e in entries],
                          dtype=np.int64)
    frame["pre_policy_level"] = [e.pre_value if e is not None else np.nan for e in entries]
    frame["policy_level"] = [
        (e.post_value if t == 1 else e.pre_value) if e is not None else np.nan
        for e, t in zip(entries, frame["t"])
    ]
    frame = frame.loc[keep].reset_index(drop=True)

    continuous = survey.continuous + ("pre_policy_level",)
    categorical = survey.categorical + ("analysis_period",)
    schema = EncodingSchema.from_frame(frame, continuous, categorical, survey.standardize)
    data = RepeatedCrossSection(frame, schema)
    data.require_all_cells()
    logger.info("joined dataset: %d rows, cells %s", data.n, data.cell_counts())
    return data

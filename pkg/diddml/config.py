"""Config models for every stage of the pipeline.

Each block is a pydantic model so a run can be serialized, copied next to its
outputs and replayed. ``load_config`` reads YAML or JSON by extension.
"""

import json
import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from diddml.errors import ConfigError

load_dotenv()

THREADS_ENV = "DIDDML_THREADS"


def default_threads() -> int:
    raw = os.getenv(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ----------------------------
#  Data ingestion
# ----------------------------
class CovariateRoles(_Block):
    continuous: list[str] = []
    categorical: list[str] = []


class ColumnRoles(_Block):
    """Maps CSV columns onto the roles of a repeated cross-section."""
    outcome: str
    cluster: str
    treatment: Optional[str] = None
    period: Optional[str] = None
    year: Optional[str] = None
    row_id: Optional[str] = None
    covariates: CovariateRoles = CovariateRoles()
    keep: list[str] = []
    delimiter: str = ","
    binary_outcome: bool = True
    standardize: bool = False

    @model_validator(mode="after")
    def _no_duplicate_roles(self):
        named = [self.outcome, self.cluster, self.treatment, self.period, self.year, self.row_id]
        named = [c for c in named if c] + self.covariates.continuous + self.covariates.categorical
        dupes = sorted({c for c in named if named.count(c) > 1})
        if dupes:
            raise ValueError(f"columns assigned more than one role: {dupes}")
        return self


# ----------------------------
#  Treatment construction
# ----------------------------
Measure = Literal["price_ppp", "tax_share"]


class AssignmentRule(_Block):
    """Threshold rule turning a percent change into Treated / Control / Excluded."""
    measure: Measure
    treat_threshold_pct: float
    control_band_pct: tuple[float, float]
    round_decimals: Optional[int] = Field(2, ge=0)

    @model_validator(mode="after")
    def _ordered(self):
        lo, hi = self.control_band_pct
        if lo > hi:
            raise ValueError(f"control band lower bound {lo} exceeds upper bound {hi}")
        if not self.treat_threshold_pct > hi:
            raise ValueError(
                f"treat threshold {self.treat_threshold_pct} must lie strictly above the control band ({hi})"
            )
        return self

    @classmethod
    def default(cls, measure: Measure) -> "AssignmentRule":
        if measure == "price_ppp":
            return cls(measure=measure, treat_threshold_pct=15.0, control_band_pct=(-5.0, 5.0))
        return cls(measure=measure, treat_threshold_pct=2.0, control_band_pct=(0.0, 0.0))


# ----------------------------
#  Learners and estimators
# ----------------------------
class ForestConfig(_Block):
    learner: Literal["random_forest"] = "random_forest"
    n_trees: int = Field(500, ge=1)
    mtry: Optional[int] = Field(None, ge=1)
    min_leaf: Optional[int] = Field(None, ge=1)
    subsample_fraction: float = Field(0.5, gt=0.0, le=1.0)
    max_depth: Optional[int] = Field(None, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)


class DidDmlConfig(_Block):
    folds: int = Field(10, ge=2)
    trim: float = Field(0.01, ge=0.0, lt=0.5)
    cluster: bool = True
    pi_after_trim: bool = False
    seed: int = Field(12345, ge=0)
    regression: ForestConfig = ForestConfig()
    probability: ForestConfig = ForestConfig()
    covariates: Optional[list[str]] = None
    support_mass: float = Field(0.01, ge=0.0, le=1.0)
    support_bins: int = Field(20, ge=1)
    threads: int = Field(1, ge=1)


class TwfeSpec(_Block):
    treatment: Literal["binary", "continuous"] = "binary"
    covariates: Optional[list[str]] = None
    country_fe: bool = True
    year_fe: bool = True
    cluster: bool = True
    outcome: Optional[str] = None
    policy_column: str = "policy_level"
    history_column: str = "pre_policy_level"
    include_history: bool = True
    year_column: str = "year"


# ----------------------------
#  Analysis suite
# ----------------------------
class SubgroupFilter(_Block):
    """A named row filter: categorical ``levels`` or an inclusive numeric ``bounds``."""
    name: str
    column: str
    levels: Optional[list[str]] = None
    bounds: Optional[tuple[Optional[float], Optional[float]]] = None
    family: str = "main"

    @model_validator(mode="after")
    def _one_kind(self):
        if (self.levels is None) == (self.bounds is None):
            raise ValueError(f"subgroup {self.name!r} needs exactly one of levels / bounds")
        return self


def default_subgroup_grid(gender: str = "gender", age: str = "age",
                          education_age: str = "education_age") -> list[SubgroupFilter]:
    return [
        SubgroupFilter(name="men", column=gender, levels=["Man"]),
        SubgroupFilter(name="women", column=gender, levels=["Woman"]),
        SubgroupFilter(name="age_15_24", column=age, bounds=(15, 24)),
        SubgroupFilter(name="age_25_44", column=age, bounds=(25, 44)),
        SubgroupFilter(name="age_45_64", column=age, bounds=(45, 64)),
        SubgroupFilter(name="age_65_plus", column=age, bounds=(65, None)),
        SubgroupFilter(name="education_upto_15", column=education_age, bounds=(None, 15)),
        SubgroupFilter(name="education_16_19", column=education_age, bounds=(16, 19)),
        SubgroupFilter(name="education_20_plus", column=education_age, bounds=(20, None)),
    ]


class CovariateGroups(_Block):
    history: list[str] = ["pre_policy_level"]
    socio: list[str] = []
    policy: list[str] = []
    always: list[str] = ["analysis_period"]

    def sets(self) -> dict[str, list[str]]:
        base = self.always + self.history
        return {
            "history": base,
            "history_socio": base + self.socio,
            "history_policy": base + self.policy,
            "all": base + self.socio + self.policy,
        }


class PlaceboConfig(_Block):
    inference: Literal["across_units", "pooled_influence"] = "across_units"
    unit_columns: list[str] = ["cluster", "analysis_period"]
    bins: int = Field(20, ge=1)


# ----------------------------
#  Synthetic data
# ----------------------------
class DgpSpec(_Block):
    n: int = Field(5000, ge=8)
    n_clusters: int = Field(50, ge=1)
    p_continuous: int = Field(3, ge=1)
    n_categorical: int = Field(2, ge=0)
    categorical_levels: int = Field(3, ge=2)
    assignment_strength: float = 0.5
    propensity_bounds: tuple[float, float] = (0.02, 0.98)
    surface: Literal["linear", "nonlinear"] = "linear"
    base_rate: float = 0.3
    trend: float = -0.03
    tau: float = -0.03
    tau_heterogeneity: float = 0.0
    outcome: Literal["binary", "probability"] = "binary"
    outcome_clamp: tuple[float, float] = (0.01, 0.99)
    max_clamp_fraction: float = Field(0.05, ge=0.0, le=1.0)
    cluster_scale: float = Field(0.0, ge=0.0)
    cluster_in_assignment: bool = False
    reverse_causality: float = 0.0
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _bounds(self):
        lo, hi = self.propensity_bounds
        if not 0.0 < lo < 0.25 or not lo < hi <= 1.0:
            raise ValueError(f"propensity bounds {self.propensity_bounds} must satisfy 0 < lo < 0.25, lo < hi <= 1")
        lo, hi = self.outcome_clamp
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"outcome clamp {self.outcome_clamp} must lie in [0, 1]")
        return self


class SimulationConfig(_Block):
    dgp: DgpSpec = DgpSpec()
    replications: int = Field(100, ge=1)
    estimators: list[Literal["diddml", "twfe_binary"]] = ["diddml", "twfe_binary"]


# ----------------------------
#  Whole run
# ----------------------------
class InputPaths(_Block):
    micro: Optional[str] = None
    policy: Optional[str] = None
    prepared: Optional[str] = None


class RunConfig(_Block):
    inputs: InputPaths = InputPaths()
    columns: Optional[ColumnRoles] = None
    measure: Measure = "tax_share"
    rule: Optional[AssignmentRule] = None
    periods: dict[str, tuple[int, int]] = {"2012-2014": (2012, 2014), "2018-2020": (2018, 2020)}
    analysis_period: Optional[str] = None
    estimator: Literal["diddml", "twfe_binary", "twfe_continuous"] = "diddml"
    diddml: DidDmlConfig = DidDmlConfig()
    twfe: TwfeSpec = TwfeSpec()
    covariate_groups: CovariateGroups = CovariateGroups()
    subgroups: list[SubgroupFilter] = Field(default_factory=default_subgroup_grid)
    placebo: PlaceboConfig = PlaceboConfig()
    simulation: SimulationConfig = SimulationConfig()
    seed: int = Field(12345, ge=0)
    threads: Optional[int] = Field(None, ge=1)
    output_dir: str = "results"

    def assignment_rule(self) -> AssignmentRule:
        rule = self.rule or AssignmentRule.default(self.measure)
        if rule.measure != self.measure:
            raise ConfigError(f"rule measure {rule.measure!r} does not match run measure {self.measure!r}")
        return rule

    def estimator_config(self) -> DidDmlConfig:
        """DiDDML block with the run-level seed and thread count applied."""
        return self.diddml.model_copy(update={"seed": self.seed, "threads": self.threads or default_threads()})

    def with_overrides(self, seed: Optional[int] = None, threads: Optional[int] = None,
                       output_dir: Optional[str] = None) -> "RunConfig":
        update = {}
        if seed is not None:
            update["seed"] = seed
        if threads is not None:
            update["threads"] = threads
        if output_dir is not None:
            update["output_dir"] = output_dir
        return self.model_copy(update=update)


def parse_config(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw or {})
    except ValidationError as e:
        raise ConfigError(f"invalid run config:\n{e}") from e


def load_config(path: str) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            if path.suffix.lower() == ".json":
                raw = json.load(f)
            else:
                raw = yaml.safe_load(f)
        except (json.JSONDecodeError, yaml.YAMLError, UnicodeDecodeError) as e:
            raise ConfigError(f"unreadable config file {path}: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping at the top level")
    return parse_config(raw)


def dump_config(config: RunConfig, path: str) -> None:
    """Write the resolved config so the run can be replayed from it alone."""
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)

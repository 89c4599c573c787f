"""Exception hierarchy shared by every module.

Library code raises these; only ``diddml.cli`` turns them into exit codes.
"""


class DidDmlError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(DidDmlError, ValueError):
    """A config file or config block is missing keys or holds invalid values."""


class DataValidationError(DidDmlError, ValueError):
    """Input microdata violate the repeated cross-section contract."""


class AssignmentError(DidDmlError, ValueError):
    """Policy panel or assignment rule is invalid."""


class LearnerError(DidDmlError, ValueError):
    """A nuisance learner cannot be fitted on the data it was given."""


class EstimationError(DidDmlError):
    """An estimator precondition failed (empty cells, too few clusters, zero propensity)."""


class RankDeficiencyError(EstimationError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


class SimulationError(DidDmlError, ValueError):
    """A data-generating process spec is infeasible."""

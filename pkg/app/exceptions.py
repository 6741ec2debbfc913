"""Error hierarchy for the planner."""


class DiverError(Exception):
    """Base class for all planner errors"""


class ConfigError(DiverError, ValueError):
    """Run configuration could not be parsed or failed validation"""


class ConfigMismatch(DiverError):
    """Checkpoint and scene corpus were produced under incompatible configs"""


class InvalidTrajectory(DiverError, ValueError):
    pass


class InvalidScale(DiverError, ValueError):
    pass


class InsufficientDiversity(DiverError):
    """The drivable corridor cannot host the requested number of distinct references"""


class InsufficientData(DiverError):
    pass


class InvalidSchedule(DiverError, ValueError):
    pass


class MissingAnchors(DiverError):
    pass


class InvalidDim(DiverError, ValueError):
    pass


class StaleCache(DiverError):
    """Backward was called without a forward cache matching the current weights"""


class InvalidCost(DiverError, ValueError):
    pass


class InvalidBatch(DiverError, ValueError):
    pass


class InvalidGroup(DiverError, ValueError):
    pass


class InvalidSigma(DiverError, ValueError):
    pass


class InvalidSet(DiverError, ValueError):
    pass


class InvalidCorpus(DiverError, ValueError):
    pass


class InvalidPair(DiverError, ValueError):
    pass


class TrajectoryParseError(DiverError):
    """A trajectory JSONL line could not be decoded"""

    def __init__(self, path: str, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {reason}")


class NonFiniteLoss(DiverError):
    """Training produced a NaN/Inf loss; the offending batch was dumped"""

    def __init__(self, step: int, dump_path: str):
        self.step = step
        self.dump_path = dump_path
        super().__init__(f"non-finite loss at step {step}, batch dumped to {dump_path}")

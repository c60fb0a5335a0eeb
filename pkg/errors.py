"""Exception hierarchy shared by the simulator modules and the CLI."""


class SimulationError(Exception):
    """Base class for every error the simulator raises on purpose."""

    exit_code = 1


class UsageError(SimulationError):
    """Bad command-line usage, e.g. an unknown policy name."""

    exit_code = 1


class ConfigError(SimulationError, ValueError):
    """A configuration value is invalid or the configuration is infeasible."""

    exit_code = 2


class TraceParseError(ConfigError):
    """A trace CSV row could not be parsed."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class TraceSchemaError(TraceParseError):
    """A trace row parses but breaks the schema (unknown id, bad invariant)."""


class CapacityError(SimulationError, RuntimeError):
    """A plan cannot be placed on the cluster."""

    exit_code = 3


class EvaluationError(SimulationError, RuntimeError):
    """An infeasible plan was submitted for evaluation."""

    exit_code = 1

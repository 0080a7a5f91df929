"""Exception types raised across the package."""


class ParameterError(ValueError):
    """An argument is outside its valid range or has the wrong shape."""


class ContractError(ValueError):
    """A call violates an operation's precondition (e.g. stepping below t=0)."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite during optimization."""

    def __init__(self, iteration: int, message: str = "loss is not finite"):
        self.iteration = iteration
        super().__init__(f"training diverged at iteration {iteration}: {message}")


class ScheduleMismatchError(ValueError):
    """A checkpoint was produced under a different noise schedule."""


class ConfigError(ValueError):
    """One or more configuration fields are invalid.

    ``problems`` lists every violated field so callers can report them all.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


class DependencyMissingError(FileNotFoundError):
    """A pipeline stage needs an artifact that has not been produced yet."""

class ConfigError(ValueError):
    """Invalid configuration, detected before any computation."""

    def __init__(self, message, pointer=None):
        self.pointer = pointer
        self.message = message
        super().__init__(f"{pointer}: {message}" if pointer else message)


class SchemaError(ValueError):
    """A persisted record does not match its documented schema."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class PrerequisiteError(RuntimeError):
    """A pipeline step ran before the artifact it depends on existed."""


class TrainingDiverged(RuntimeError):
    """Loss exploded or produced NaN during optimization."""

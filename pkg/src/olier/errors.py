"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinite values."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class GroupMembershipError(ValueError):
    """A tensor is not a member of the Hadamard group (an entry is too close to zero)."""

    def __init__(self, index, value, eps):
        self.index = tuple(index)
        self.value = float(value)
        self.eps = float(eps)
        super().__init__(
            f"entry {self.index} has magnitude {abs(self.value):.3e} <= {self.eps:.3e}; "
            "group members must have all entries bounded away from zero"
        )


class StateError(RuntimeError):
    """A model lifecycle method was called in the wrong state."""


class ConfigError(ValueError):
    """Invalid configuration value or flag combination."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite or exceeded the divergence threshold."""


class CheckpointError(ValueError):
    """A checkpoint or stream file is corrupt, truncated, or has an unsupported version."""

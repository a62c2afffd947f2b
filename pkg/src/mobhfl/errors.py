"""Exception hierarchy shared by every module."""


class MobHFLError(Exception):
    """Base class for all package errors."""


class ConfigError(MobHFLError, ValueError):
    """Invalid configuration or precondition on a user-supplied parameter."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ContractError(MobHFLError, ValueError):
    """A function was called with arguments that violate its contract."""


class NumericError(MobHFLError, ArithmeticError):
    def __init__(self, message, index=None):
        self.index = index
        if index is not None:
            message = f"{message} (index {index})"
        super().__init__(message)


class UnsupportedOperationError(MobHFLError, TypeError):
    pass


class NonMixingError(MobHFLError, ValueError):
    """The Markov chain has a non-Perron eigenvalue of modulus (numerically) one."""


class StructureError(MobHFLError, ValueError):
    """The transition matrix is reducible."""


class DegenerateEdgeError(MobHFLError, ValueError):
    pass


class EmptyEdgeError(MobHFLError, RuntimeError):
    pass


class TraceError(MobHFLError, ValueError):
    """Malformed trajectory trace file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TraceGapError(TraceError):
    def __init__(self, step, vehicle):
        self.step = step
        self.vehicle = vehicle
        super().__init__(f"trace has no row for vehicle {vehicle} at step {step}")


class ConditionsViolatedError(MobHFLError, ValueError):
    def __init__(self, failed):
        self.failed = list(failed)
        super().__init__("bound conditions violated: " + "; ".join(self.failed))


class RunError(MobHFLError, RuntimeError):
    """A training run failed; ``records`` holds everything emitted before the failure."""

    def __init__(self, message, records=()):
        self.records = list(records)
        super().__init__(message)

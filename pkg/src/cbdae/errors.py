"""Exception types raised across the package."""


class CbdaeError(Exception):
    """Base class for all package errors."""


class DimensionError(CbdaeError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CbdaeError, ValueError):
    """A precondition of an operation was violated."""


class RangeError(CbdaeError, IndexError):
    """An index or history requirement falls outside the available data."""


class SimulationFault(CbdaeError, RuntimeError):
    """The process simulator produced a non-finite state."""


class NumericalFault(CbdaeError, RuntimeError):
    """A numerical routine hit a singular or non-finite quantity."""

"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front-end can map
failures to its documented status codes without inspecting messages.
"""


class MVFlowError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ConfigError(MVFlowError, ValueError):
    """Invalid configuration or argument."""

    exit_code = 2


class DimensionError(MVFlowError, ValueError):
    """Array shapes are inconsistent with the model or operation."""

    exit_code = 2


class DegenerateGridError(MVFlowError, ValueError):
    """An evaluation grid is empty or otherwise unusable."""

    exit_code = 2


class ClassMismatchError(MVFlowError, ValueError):
    """A payoff lacks the structure tag or flags a formula requires."""

    exit_code = 2


class ModelEvaluationError(MVFlowError, FloatingPointError):
    """A coefficient callable returned non-finite values."""

    exit_code = 3


class BlowUpError(MVFlowError, FloatingPointError):
    """A simulated state became non-finite."""

    exit_code = 3

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SingularJacobianError(MVFlowError, FloatingPointError):
    """A Jacobian is numerically singular (condition number too large)."""

    exit_code = 3


class MissingAuxiliaryPathError(MVFlowError, RuntimeError):
    """A Lions tangent was requested for a point with no auxiliary path."""

    exit_code = 3


class MissingFieldError(MVFlowError, RuntimeError):
    """A random anticipating factor was supplied without its Malliavin field."""

    exit_code = 3


class OrderExceededError(MVFlowError, ValueError):
    """The requested total integration-by-parts order is not supported."""

    exit_code = 4

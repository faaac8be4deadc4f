"""Decoding message meaning in a goal-signalling gridworld."""

__version__ = "0.1.0"

from .env import Action, Cell, GridConfig, State  # noqa: E402
from .errors import (CommDecodeError, DomainError, NumericError, SizeError,  # noqa: E402
                     TrainingFailure, UsageError)

__all__ = ["Action", "Cell", "GridConfig", "State", "CommDecodeError", "DomainError",
           "NumericError", "SizeError", "TrainingFailure", "UsageError", "__version__"]

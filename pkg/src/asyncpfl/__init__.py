"""Asynchronous personalized federated learning simulator."""

from .estimators import OptionA, OptionB, OptionC
from .numerics import SeededRng
from .simulator import DelayModel, Horizon, RunLog, simulate_async, simulate_sync
from .tasks import make_fleet

__version__ = "0.1.0"

__all__ = ["OptionA", "OptionB", "OptionC", "SeededRng", "DelayModel", "Horizon", "RunLog",
           "simulate_async", "simulate_sync", "make_fleet", "__version__"]

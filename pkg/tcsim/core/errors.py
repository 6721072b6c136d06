"""This module defines the exceptions raised by the simulator."""


class TcsimError(Exception):
    """Base class for every error raised by the simulator."""


class ScenarioError(TcsimError):
    """A scenario file could not be parsed or violates an invariant."""


class NetworkError(TcsimError):
    """An OD pair is unreachable or a path is not a valid segment chain."""


class ChoiceError(TcsimError):
    """An alternative set is empty or a travel-time lookup is missing."""


class MarketError(TcsimError):
    """A market request cannot be executed (e.g. selling an empty account)."""


class MetricsError(TcsimError):
    """Metrics were requested over empty or mismatched records."""


class GPError(TcsimError):
    """The Gaussian-process system could not be factorized."""

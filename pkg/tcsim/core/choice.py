"""This module implements the joint departure-time and route choice.

A trip's alternatives are the departure intervals of its time window crossed
with the paths of its OD choice set. Systematic utilities combine travel
time, schedule delay, the monetized credit charge and path attributes; the
choice is drawn from the multinomial logit.

Usage example:

  window = build_time_window(trip, predicted_tt=12.0, prev_activity_end=0.0,
                             params=config.choice)
  alternatives = enumerate_alternatives(traveler, trip, window, choice_set, toll,
                                        price, tt_lookup, config.choice,
                                        config.tcs.max_credits_per_trip)
  chosen = choose(alternatives, rng)
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from ..config.settings import MINUTES_PER_DAY, ChoiceParams
from .errors import ChoiceError
from .market import TollProfile
from .network import ChoiceSet
from .types import Path, Traveler, Trip

# Predicted travel time of a path for a departure minute.
TravelTimeLookup = Callable[[Path, float], float]

# Latest admissible departure: the start of the last 5-minute bin of the day.
LATEST_DEPARTURE = MINUTES_PER_DAY - 5.0


@dataclass(frozen=True)
class TimeWindow:
    """Candidate departure times of a trip.

    Attributes:
        intervals: 2η+1 departure times, ascending, Δtw apart.
        interval: Δtw in minutes.
        preferred_departure: t̂ on the Δtw grid, before any shift.
    """

    intervals: Tuple[float, ...]
    interval: float
    preferred_departure: float

    def __len__(self) -> int:
        return len(self.intervals)

    @property
    def start(self) -> float:
        return self.intervals[0]


def round_half_down(value: float, step: float) -> float:
    """Rounds to the nearest multiple of `step`, halves going down."""
    return math.ceil(value / step - 0.5) * step


def build_time_window(trip: Trip, predicted_tt: float, prev_activity_end: float,
                      params: ChoiceParams, latest: float = LATEST_DEPARTURE) -> TimeWindow:
    """Centers 2η+1 departure intervals on the preferred departure time.

    The window is moved right when it would start before the end of the
    previous activity, otherwise moved inside [0, latest].

    Args:
      trip: the trip.
      predicted_tt: predicted travel time, minutes, > 0.
      prev_activity_end: earliest admissible departure.
      params: choice parameters (η, Δtw).
      latest: last admissible departure when no shift is required.
    """
    if predicted_tt <= 0:
        raise ChoiceError(f"predicted travel time must be positive, got {predicted_tt}")
    step = params.interval
    preferred = round_half_down(trip.preferred_arrival - predicted_tt, step)
    start = preferred - params.eta * step
    span = 2 * params.eta * step
    if start + span > latest:
        start = latest - span
    start = max(start, 0.0, prev_activity_end)
    intervals = tuple(start + j * step for j in range(2 * params.eta + 1))
    return TimeWindow(intervals=intervals, interval=step, preferred_departure=preferred)


@dataclass(frozen=True)
class Alternative:
    """A (departure time, path) pair of a trip.

    Attributes:
        departure: t_k, minutes.
        path_id: Index of the path in the choice set.
        path: The path.
        dummies: (min_tt, min_dist, min_sig, max_hwy) indicators of the path.
        utility: Systematic utility V.
        credits: Credits charged for departing at t_k on this path.
        travel_time: Predicted travel time used in V.
    """

    departure: float
    path_id: int
    path: Path
    dummies: Tuple[int, int, int, int] = (0, 0, 0, 0)
    utility: float = 0.0
    credits: int = 0
    travel_time: float = 0.0


def cost_coefficient(traveler: Traveler, params: ChoiceParams) -> float:
    """β_cost of a traveler: utility per dollar (negative)."""
    return params.beta_tt / traveler.vot


def path_utility(path: Path, dummies: Sequence[int], params: ChoiceParams) -> float:
    """Utility of the path attributes; distances in kilometers."""
    min_tt, min_dist, min_sig, max_hwy = dummies
    return (params.beta_length * path.total_distance / 1000.0
            + params.beta_path_size * path.path_size
            + params.beta_signals * path.signal_count
            + params.beta_highway_dist * path.highway_distance / 1000.0
            + params.beta_min_tt * min_tt
            + params.beta_min_dist * min_dist
            + params.beta_min_signals * min_sig
            + params.beta_max_highway * max_hwy)


def systematic_utility(traveler: Traveler, trip: Trip, departure: float, travel_time: float,
                       path: Path, dummies: Sequence[int], toll_money: float,
                       params: ChoiceParams) -> float:
    """Systematic utility of a trip given its timing and toll expenditure.

    Args:
      traveler: the traveler, for β_cost and the schedule-delay rates.
      trip: the trip, for T*.
      departure: departure minute.
      travel_time: travel time, minutes.
      path: path driven.
      dummies: dominance indicators of the path.
      toll_money: credits charged times the credit price, $.
      params: choice coefficients.
    """
    beta_cost = cost_coefficient(traveler, params)
    arrival = departure + travel_time
    early = max(trip.preferred_arrival - arrival, 0.0)
    late = max(arrival - trip.preferred_arrival, 0.0)
    return (params.beta_tt * travel_time
            + beta_cost * traveler.sde_rate * early
            + beta_cost * traveler.sdl_rate * late
            + beta_cost * toll_money
            + path_utility(path, dummies, params))


def utility(traveler: Traveler, trip: Trip, alternative: Alternative, toll: TollProfile,
            price: float, tt_lookup: TravelTimeLookup, params: ChoiceParams,
            max_credits: int) -> Alternative:
    """Evaluates an alternative against the predicted travel times.

    Returns:
      The alternative with utility, credits and travel_time filled in.

    Raises:
      ChoiceError: the lookup has no entry for the path and departure.
    """
    try:
        travel_time = tt_lookup(alternative.path, alternative.departure)
    except (KeyError, IndexError) as e:
        raise ChoiceError(f"no travel time for path {alternative.path_id} at "
                          f"{alternative.departure}") from e
    credits = toll.charge(alternative.departure, alternative.path.total_distance, max_credits)
    value = systematic_utility(traveler, trip, alternative.departure, travel_time,
                               alternative.path, alternative.dummies, credits * price, params)
    return Alternative(departure=alternative.departure, path_id=alternative.path_id,
                       path=alternative.path, dummies=alternative.dummies, utility=value,
                       credits=credits, travel_time=travel_time)


def dummies_of(choice_set: ChoiceSet, index: int) -> Tuple[int, int, int, int]:
    return (choice_set.min_tt[index], choice_set.min_dist[index],
            choice_set.min_sig[index], choice_set.max_hwy[index])


def enumerate_alternatives(traveler: Traveler, trip: Trip, window: TimeWindow,
                           choice_set: ChoiceSet, toll: TollProfile, price: float,
                           tt_lookup: TravelTimeLookup, params: ChoiceParams,
                           max_credits: int) -> List[Alternative]:
    """All (departure, path) alternatives of a trip with their utilities."""
    alternatives = []
    for departure in window.intervals:
        for index, path in enumerate(choice_set.paths):
            candidate = Alternative(departure=departure, path_id=index, path=path,
                                    dummies=dummies_of(choice_set, index))
            alternatives.append(utility(traveler, trip, candidate, toll, price, tt_lookup,
                                        params, max_credits))
    return alternatives


def logit_probabilities(utilities: Sequence[float]) -> np.ndarray:
    """Multinomial logit probabilities, computed on max-shifted utilities.

    Raises:
      ChoiceError: no utilities or a non-finite one.
    """
    values = np.asarray(utilities, dtype=float)
    if values.size == 0:
        raise ChoiceError("cannot choose from an empty alternative set")
    if not np.all(np.isfinite(values)):
        raise ChoiceError("utilities must be finite")
    weights = np.exp(values - values.max())
    return weights / weights.sum()


def choose(alternatives: Sequence[Alternative], rng: np.random.Generator) -> Alternative:
    """Samples one alternative from the logit over their utilities."""
    probabilities = logit_probabilities([a.utility for a in alternatives])
    cumulative = np.cumsum(probabilities)
    index = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side='right'))
    return alternatives[min(index, len(alternatives) - 1)]

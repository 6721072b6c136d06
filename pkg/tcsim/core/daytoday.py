"""This module runs multi-day experiments.

Each day, travelers choose departure times and routes against the learned
link travel times, the supply simulator moves their vehicles and the credit
market handles allocations, charges and sales on the same clock. After the
day the link table is smoothed with the observed times and the credit price
is updated.

Usage example:

  scenario = build_scenario(load_scenario(Path('scenarios/desk.json')))
  result = run_experiment(scenario, TollProfile.zeros())
  for day in result.days:
      print(day.day, day.inconsistency)
"""

import heapq
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..config.settings import MINUTES_PER_DAY, ScenarioConfig, SupplyParams
from .choice import (Alternative, TimeWindow, build_time_window, choose, enumerate_alternatives,
                     round_half_down, systematic_utility)
from .errors import MetricsError
from .market import CreditMarket, HorizonTrip, TollProfile
from .metrics import DayMetrics, day_metrics, net_utilities
from .network import RoadNetwork
from .scenario import Scenario, substream
from .supply import SupplySimulator, Vehicle, bin_index
from .types import Path, Transaction, TransactionKind, Traveler, TripRecord

logger = logging.getLogger(__name__)


class LinkTravelTimeTable:
    """Learned travel time per (segment, 5-minute entry bin), in minutes.

    Entries never drop below the segment's free-flow time.
    """

    def __init__(self, network: RoadNetwork, values: np.ndarray, bin_minutes: int):
        self.network = network
        self.bin_minutes = bin_minutes
        self.index = {s.id: i for i, s in enumerate(network.description.segments)}
        self.free_flow = np.array([s.free_flow_time for s in network.description.segments])
        self.values = np.maximum(np.asarray(values, dtype=float), self.free_flow[:, None])
        self._path_cache: Dict[Tuple[Tuple[int, ...], float], float] = {}

    @classmethod
    def free_flow_table(cls, network: RoadNetwork, params: SupplyParams) -> 'LinkTravelTimeTable':
        n_bins = MINUTES_PER_DAY // params.bin_minutes
        free_flow = np.array([s.free_flow_time for s in network.description.segments])
        return cls(network, np.repeat(free_flow[:, None], n_bins, axis=1), params.bin_minutes)

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def segment_time(self, segment_id: int, minute: float) -> float:
        return float(self.values[self.index[segment_id], bin_index(minute, self.bin_minutes, self.n_bins)])

    def path_time(self, path: Path, departure: float) -> float:
        """Predicted path travel time, the entry bin advancing along the path."""
        key = (path.segments, departure)
        cached = self._path_cache.get(key)
        if cached is None:
            t = departure
            for segment_id in path.segments:
                t += self.segment_time(segment_id, t)
            cached = self._path_cache[key] = t - departure
        return cached

    def delta(self, other: 'LinkTravelTimeTable') -> float:
        """Mean absolute entry-wise difference, minutes."""
        return float(np.mean(np.abs(self.values - other.values)))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=[str(b * self.bin_minutes) for b in range(self.n_bins)])
        frame.insert(0, 'segment', [s.id for s in self.network.description.segments])
        return frame


def smooth(table: LinkTravelTimeTable, observed: np.ndarray, rate: float) -> LinkTravelTimeTable:
    """Exponential smoothing towards the observed times; NaN entries keep the old value."""
    observed = np.asarray(observed, dtype=float)
    if observed.shape != table.values.shape:
        raise ValueError(f"observed table shape {observed.shape} does not match {table.values.shape}")
    blended = np.where(np.isfinite(observed), (1.0 - rate) * table.values + rate * observed, table.values)
    return LinkTravelTimeTable(table.network, blended, table.bin_minutes)


def inconsistency(records: Sequence[TripRecord]) -> float:
    """Normalized gap between simulated and predicted trip travel times.

    Raises:
      MetricsError: no records.
    """
    if not records:
        raise MetricsError("inconsistency needs at least one trip record")
    simulated = np.array([r.travel_time for r in records])
    predicted = np.array([r.predicted_time for r in records])
    return float(np.sum(np.abs(simulated - predicted)) / np.sum(simulated))


def stability(values: Sequence[float], window: int, tolerance: float) -> Tuple[float, bool]:
    """Relative spread of the last `window` values and whether it is below tolerance."""
    last = np.asarray(list(values)[-window:], dtype=float)
    if len(last) < window or len(last) == 0:
        return float('inf'), False
    mean = float(np.mean(last))
    if mean == 0:
        ratio = 0.0 if np.all(last == 0) else float('inf')
    else:
        ratio = float(np.std(last) / abs(mean))
    return ratio, ratio < tolerance


def replay_prices(initial: float, excesses: Sequence[int], step: float) -> List[float]:
    """Prices p_1, p_2, ... implied by a logged excess sequence."""
    prices = [initial]
    for z in excesses:
        prices.append(max(prices[-1] + step * z, 0.0))
    return prices


@dataclass
class DayResult:
    """Outputs of one simulated day.

    Attributes:
        day: Day index, 1-based.
        price: Credit price in force during the day.
        next_price: Price after the day's update.
        excess: Z_d, credits bought minus sold.
        inconsistency: Normalized prediction gap of the day's trips.
        table_delta: Mean change of the link table caused by the day.
        peak_queues: Longest physical queue per segment during the day, meters.
        metrics: Per-day measures.
        records: Trip records.
        transactions: Transaction log, kept only on request.
    """

    day: int
    price: float
    next_price: float
    excess: int
    inconsistency: float
    table_delta: float
    peak_queues: np.ndarray = field(repr=False)
    metrics: DayMetrics
    records: List[TripRecord] = field(repr=False)
    transactions: List[Transaction] = field(default_factory=list, repr=False)


@dataclass
class ExperimentResult:
    """A multi-day run.

    Attributes:
        days: One result per simulated day.
        table: Link table after the last day.
        market: Market after the last day.
        stable: Whether per-capita utility met the stability criterion.
        stability_ratio: Relative spread of per-capita utility over the window.
    """

    days: List[DayResult]
    table: LinkTravelTimeTable
    market: CreditMarket
    stable: bool
    stability_ratio: float

    @property
    def metrics(self) -> List[DayMetrics]:
        return [d.metrics for d in self.days]

    def reference(self, window: int, population: Sequence[Traveler], config: ScenarioConfig) -> np.ndarray:
        """Per-traveler net utility averaged over the last `window` days."""
        last = self.days[-window:]
        return np.mean([net_utilities(d.records, population, config.choice) for d in last], axis=0)


@dataclass
class _Pending:
    """A traveler's trip between decision and arrival."""

    traveler: int
    trip_index: int
    window: TimeWindow
    alternative: Optional[Alternative] = None
    credits: int = 0
    price: float = 0.0


class DaySimulation:
    """Interleaves choices, supply ticks and market events over one day."""

    def __init__(self, scenario: Scenario, network: RoadNetwork, table: LinkTravelTimeTable,
                 market: CreditMarket, toll: TollProfile, day: int,
                 plans: Sequence[Sequence[Tuple[float, int]]]):
        self.config = scenario.config
        self.population = scenario.population
        self.network = network
        self.table = table
        self.market = market
        self.toll = toll
        self.day = day
        self.plans = plans
        self.supply = SupplySimulator(network, self.config.supply)

        self._decisions: List[Tuple[float, int]] = []
        self._departures: List[Tuple[float, int, int]] = []
        self._pending: Dict[int, _Pending] = {}
        self._next_trip = [0] * len(self.population)
        self._rngs: Dict[int, np.random.Generator] = {}
        self.records: List[TripRecord] = []

    def _choice_set(self, traveler: Traveler, trip_index: int):
        trip = traveler.trips[trip_index]
        return self.network.choice_set((trip.origin, trip.destination), self.config.choice)

    def _schedule(self, traveler: Traveler, trip_index: int, earliest: float, prev_end: float) -> None:
        trip = traveler.trips[trip_index]
        fastest = self._choice_set(traveler, trip_index).paths[0]
        predicted = self.table.path_time(fastest, max(trip.preferred_arrival - fastest.free_flow_time, 0.0))
        window = build_time_window(trip, predicted, prev_end, self.config.choice)
        self._pending[traveler.id] = _Pending(traveler=traveler.id, trip_index=trip_index, window=window)
        decision = max(window.start - window.interval, earliest)
        heapq.heappush(self._decisions, (decision, traveler.id))

    def _decide(self, traveler_id: int) -> None:
        traveler = self.population[traveler_id]
        pending = self._pending[traveler_id]
        trip = traveler.trips[pending.trip_index]
        rng = self._rngs.get(traveler_id)
        if rng is None:
            rng = self._rngs[traveler_id] = substream(self.config.seed, 'choice', self.day, traveler_id)
        alternatives = enumerate_alternatives(
            traveler, trip, pending.window, self._choice_set(traveler, pending.trip_index), self.toll,
            self.market.state.price, self.table.path_time, self.config.choice,
            self.config.tcs.max_credits_per_trip)
        pending.alternative = choose(alternatives, rng)
        heapq.heappush(self._departures, (pending.alternative.departure, traveler_id, pending.trip_index))

    def horizon(self, traveler_id: int, now: float) -> List[HorizonTrip]:
        """Upcoming departures and charges: the rest of today, then tomorrow's chain.

        A trip already chosen but not yet started uses its chosen departure
        and charge; other trips use the preferred departure on the fastest path.
        """
        offset = (self.day - 1) * MINUTES_PER_DAY
        plan = self.plans[traveler_id]
        pending = self._pending.get(traveler_id)
        trips = []
        for index in range(self._next_trip[traveler_id], len(plan)):
            if pending is not None and pending.trip_index == index and pending.alternative is not None:
                trips.append((offset + pending.alternative.departure, pending.alternative.credits))
            else:
                trips.append((offset + plan[index][0], plan[index][1]))
        trips.extend((offset + MINUTES_PER_DAY + t, g) for t, g in plan)
        return trips

    def _tick_of(self, minute: float) -> int:
        return int(minute * 60.0 // self.config.supply.tick)

    def _minute(self, n: int) -> float:
        return n * self.config.supply.tick / 60.0

    def run(self) -> Tuple[List[TripRecord], np.ndarray, np.ndarray]:
        """Simulates the day until every trip has arrived.

        Returns:
          (trip records, observed link times, accumulation series).
        """
        self.market.horizon = self.horizon
        for traveler in self.population:
            if traveler.trips:
                self._schedule(traveler, 0, 0.0, 0.0)

        day_ticks = self._tick_of(MINUTES_PER_DAY)
        n = 0
        while n < day_ticks or self._decisions or self._departures or self.supply.on_network:
            now, horizon_end = self._minute(n), self._minute(n + 1)

            while self._decisions and self._decisions[0][0] < horizon_end:
                _, traveler_id = heapq.heappop(self._decisions)
                self._decide(traveler_id)

            departing = []
            while self._departures and self._departures[0][0] < horizon_end:
                departure, traveler_id, trip_index = heapq.heappop(self._departures)
                departing.append((traveler_id, departure, trip_index))
            self._depart(now, departing)

            for vehicle in self.supply.step():
                self._arrive(vehicle)
            n += 1
            n = self._skip_idle(n, day_ticks)

        self.records.sort(key=lambda r: (r.traveler, r.trip_index))
        return self.records, self.supply.observed_link_times(), self.supply.accumulation()

    def _skip_idle(self, n: int, day_ticks: int) -> int:
        """Jumps over ticks in which nothing can happen."""
        if self.supply.on_network:
            return n
        candidates = []
        if n < day_ticks:
            interval = self._tick_of(self.market.params.allocation_interval)
            candidates.append(min(-(-n // interval) * interval, day_ticks))
        for queue in (self._decisions, self._departures):
            if queue:
                candidates.append(self._tick_of(queue[0][0]))
        if not candidates:
            return n
        target = max(n, min(candidates))
        self.supply.skip_idle(target - n)
        return target

    def _depart(self, now: float, departing: List[Tuple[int, float, int]]) -> None:
        for traveler_id, _, trip_index in departing:
            self._next_trip[traveler_id] = trip_index + 1
        charges = [(traveler_id, departure, self._pending[traveler_id].alternative.path.total_distance)
                   for traveler_id, departure, _ in departing]
        transactions = self.market.tick(now, charges) if (departing or now < MINUTES_PER_DAY) else []
        used = {t.seller: t.amount for t in transactions if t.kind == TransactionKind.USE}
        for traveler_id, departure, trip_index in departing:
            pending = self._pending[traveler_id]
            pending.credits = used.get(traveler_id, 0)
            pending.price = self.market.state.price
            self.supply.add_vehicle(traveler_id, trip_index, pending.alternative.path, departure)

    def _arrive(self, vehicle: Vehicle) -> None:
        traveler = self.population[vehicle.traveler]
        pending = self._pending.pop(vehicle.traveler)
        trip = traveler.trips[vehicle.trip_index]
        alternative = pending.alternative
        arrival = vehicle.arrival
        self.records.append(TripRecord(
            traveler=traveler.id,
            trip_index=vehicle.trip_index,
            departure=vehicle.departure,
            arrival=arrival,
            travel_time=vehicle.travel_time,
            distance=alternative.path.total_distance,
            path_id=alternative.path_id,
            free_flow_time=alternative.path.free_flow_time,
            predicted_time=alternative.travel_time,
            charged_credits=pending.credits,
            preferred_arrival=trip.preferred_arrival,
            schedule_delay_early=max(trip.preferred_arrival - arrival, 0.0),
            schedule_delay_late=max(arrival - trip.preferred_arrival, 0.0),
            price=pending.price,
            utility=systematic_utility(traveler, trip, vehicle.departure, vehicle.travel_time,
                                       alternative.path, alternative.dummies,
                                       pending.credits * pending.price, self.config.choice),
            segments=list(alternative.path.segments)
        ))
        next_index = vehicle.trip_index + 1
        if next_index < len(traveler.trips):
            duration = traveler.trips[next_index].preceding_activity_duration
            self._schedule(traveler, next_index, arrival, arrival + duration)


def selling_plans(scenario: Scenario, network: RoadNetwork,
                  toll: TollProfile) -> List[List[Tuple[float, int]]]:
    """Per traveler and trip, the preferred departure and its predicted charge.

    The preferred departure assumes free-flow travel on the fastest path of
    the choice set.
    """
    config = scenario.config
    plans = []
    for traveler in scenario.population:
        plan = []
        for trip in traveler.trips:
            fastest = network.choice_set((trip.origin, trip.destination), config.choice).paths[0]
            departure = max(round_half_down(trip.preferred_arrival - fastest.free_flow_time,
                                            config.choice.interval), 0.0)
            plan.append((departure, toll.charge(departure, fastest.total_distance,
                                                config.tcs.max_credits_per_trip)))
        plans.append(plan)
    return plans


def run_experiment(scenario: Scenario, toll: TollProfile, network: Optional[RoadNetwork] = None,
                   reference: Optional[np.ndarray] = None, keep_transactions: bool = False,
                   on_day: Optional[Callable[[DayResult], None]] = None) -> ExperimentResult:
    """Runs the day-to-day loop from free-flow knowledge and the initial price.

    Args:
      scenario: the experiment.
      toll: toll profile in force every day; all zeros for the base case.
      network: road network with memoized choice sets, built if omitted.
      reference: per-traveler net utility of the no-toll run, for welfare.
      keep_transactions: keep each day's transaction log in its result.
      on_day: called with every finished day.
    """
    config = scenario.config
    population = scenario.population
    network = network or RoadNetwork(scenario.network)
    table = LinkTravelTimeTable.free_flow_table(network, config.supply)
    market = CreditMarket(config.tcs, toll, len(population))
    market.grant_initial(day=1)
    plans = selling_plans(scenario, network, toll)

    days: List[DayResult] = []
    n_days = min(config.days, config.learning.max_days)
    for day in range(1, n_days + 1):
        price = market.state.price
        simulation = DaySimulation(scenario, network, table, market, toll, day, plans)
        records, observed, accumulation = simulation.run()
        transactions = list(market.transactions)
        gap = inconsistency(records)
        metrics = day_metrics(day, price, gap, records, transactions, accumulation, population,
                              config.choice, reference, market.full_wallet_sells)
        updated = smooth(table, observed, config.learning.rate)
        delta = updated.delta(table)
        table = updated
        excess, next_price = market.end_day()

        result = DayResult(day=day, price=price, next_price=next_price, excess=excess,
                           inconsistency=gap, table_delta=delta, peak_queues=simulation.supply.peak_queue_lengths(),
                           metrics=metrics, records=records,
                           transactions=transactions if keep_transactions else [])
        days.append(result)
        logger.info(f"Day {day}: price {price:.5f}, inconsistency {gap:.4f}, "
                    f"bought {metrics.bought}, sold {metrics.sold}")
        if on_day is not None:
            on_day(result)

    ratio, stable = stability([d.metrics.utility_per_capita for d in days],
                              config.learning.stability_window, config.learning.stability_tolerance)
    logger.info(f"Experiment finished after {len(days)} days, utility spread {ratio:.4f}, "
                f"{'stable' if stable else 'not stable'}")
    return ExperimentResult(days=days, table=table, market=market, stable=stable, stability_ratio=ratio)

"""This module implements the mesoscopic traffic loading of the simulator.

Every segment has a moving part, traversed at the speed given by a
speed-density function evaluated when the vehicle enters, and a FIFO queuing
part discharged at capacity. Time advances in fixed ticks (5 s by default).

Usage example:

  simulator = SupplySimulator(network, config.supply)
  simulator.add_vehicle(traveler=0, trip_index=0, path=path, departure=480.0)
  while simulator.on_network:
      for vehicle in simulator.step():
          print(vehicle.traveler, vehicle.arrival)
"""

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Optional, Tuple

import numpy as np

from ..config.settings import MINUTES_PER_DAY, SupplyParams
from .errors import NetworkError
from .network import RoadNetwork
from .types import Path, Segment, TripRecord

logger = logging.getLogger(__name__)

# A departure handed to run_day: (traveler, trip index, path, departure minute).
Departure = Tuple[int, int, Path, float]


def speed(segment: Segment, density: float, params: SupplyParams) -> float:
    """Speed in km/h on `segment` at `density` vehicles per km per lane."""
    if density < 0:
        raise ValueError('density must be >= 0')
    ratio = min(density, segment.kjam) / segment.kjam
    return max(params.min_speed, segment.vf * (1.0 - ratio ** params.alpha) ** params.beta)


def bin_index(minute: float, bin_minutes: float, n_bins: int) -> int:
    """Time bin of a minute of day; times past the day fall in the last bin."""
    return min(max(int(minute // bin_minutes), 0), n_bins - 1)


@dataclass(eq=False)
class Vehicle:
    """A vehicle travelling one trip.

    Attributes:
        id: Sequence number in order of entry.
        traveler: Traveler id.
        trip_index: Trip index within the traveler's chain.
        path: Path followed.
        departure: Departure time, minutes.
        position: Index of the current segment within the path.
        entry_time: Time the current segment was entered.
        exit_due: Time the moving part of the current segment is cleared.
        queued_at_tick: Tick in which the vehicle reached the segment end.
        arrival: Final exit time, set when the trip completes.
    """

    id: int
    traveler: int
    trip_index: int
    path: Path
    departure: float
    position: int = 0
    entry_time: float = 0.0
    exit_due: float = 0.0
    queued_at_tick: int = -1
    arrival: Optional[float] = None

    @property
    def segment_id(self) -> int:
        return self.path.segments[self.position]

    @property
    def travel_time(self) -> float:
        return self.arrival - self.departure


@dataclass
class SegmentState:
    """Moving and queuing parts of one segment.

    Attributes:
        segment: Static segment attributes.
        moving: Heap of (exit_due, vehicle id, vehicle).
        queue: Vehicles waiting to be discharged, FIFO.
        budget: Discharge allowance carried between ticks, vehicles.
    """

    segment: Segment
    moving: List[Tuple[float, int, Vehicle]] = field(default_factory=list)
    queue: Deque[Vehicle] = field(default_factory=deque)
    budget: float = 0.0

    @property
    def density(self) -> float:
        """Vehicles per km per lane over the moving part."""
        return len(self.moving) / (self.segment.length / 1000.0 * self.segment.lanes)

    @property
    def occupancy(self) -> int:
        return len(self.moving) + len(self.queue)

    @property
    def queue_length_m(self) -> float:
        """Physical queue length at jam spacing; upstream segments are not blocked."""
        return len(self.queue) * 1000.0 / (self.segment.kjam * self.segment.lanes)


class SupplySimulator:
    """Advances vehicles through the network tick by tick.

    Attributes:
        network: Road network.
        params: Supply parameters.
        tick_index: Number of ticks simulated.
        entered: Vehicles added so far.
        exited: Vehicles that completed their trip.
    """

    def __init__(self, network: RoadNetwork, params: SupplyParams, start: float = 0.0):
        self.network = network
        self.params = params
        self.dt = params.tick / 60.0
        self.start = start
        self.tick_index = 0
        self.entered = 0
        self.exited = 0

        self._states: Dict[int, SegmentState] = {
            s.id: SegmentState(segment=s, budget=1.0) for s in network.description.segments
        }
        self._active: Dict[int, SegmentState] = {}
        self._index = {s.id: i for i, s in enumerate(network.description.segments)}

        self.n_bins = MINUTES_PER_DAY // params.bin_minutes
        self._tt_sum = np.zeros((len(self._index), self.n_bins))
        self._tt_count = np.zeros((len(self._index), self.n_bins), dtype=int)
        self._acc_sum = np.zeros(self.n_bins)
        self._acc_ticks = np.zeros(self.n_bins, dtype=int)
        self._peak_queue = np.zeros(len(self._index))

    @property
    def now(self) -> float:
        """Clock time in minutes at the start of the next tick."""
        return self.start + self.tick_index * self.params.tick / 60.0

    @property
    def on_network(self) -> int:
        return self.entered - self.exited

    def vehicles_on_segments(self) -> int:
        """Vehicles held in the moving and queuing parts of all segments."""
        return sum(state.occupancy for state in self._active.values())

    def _per_tick(self, segment: Segment) -> float:
        return segment.capacity * self.params.tick / 3600.0

    def add_vehicle(self, traveler: int, trip_index: int, path: Path, departure: float) -> Vehicle:
        """Loads a vehicle onto the first segment of its path at `departure`.

        Raises:
          NetworkError: the path references an unknown segment.
        """
        for segment_id in path.segments:
            if segment_id not in self._states:
                raise NetworkError(f"traveler {traveler} trip {trip_index}: unknown segment {segment_id}")
        vehicle = Vehicle(id=self.entered, traveler=traveler, trip_index=trip_index, path=path,
                          departure=departure)
        self.entered += 1
        self._enter(vehicle, departure)
        return vehicle

    def _enter(self, vehicle: Vehicle, time: float) -> None:
        state = self._states[vehicle.segment_id]
        v = speed(state.segment, state.density, self.params)
        vehicle.entry_time = time
        vehicle.exit_due = time + state.segment.length / 1000.0 / v * 60.0
        heapq.heappush(state.moving, (vehicle.exit_due, vehicle.id, vehicle))
        self._active[state.segment.id] = state

    def _record(self, vehicle: Vehicle, leave: float) -> None:
        row = self._index[vehicle.segment_id]
        col = bin_index(vehicle.entry_time, self.params.bin_minutes, self.n_bins)
        self._tt_sum[row, col] += leave - vehicle.entry_time
        self._tt_count[row, col] += 1

    def step(self) -> List[Vehicle]:
        """Simulates one tick and returns the vehicles that completed their trip."""
        end = self.now + self.dt
        transfers: List[Tuple[Vehicle, float]] = []
        completed: List[Vehicle] = []

        for state in list(self._active.values()):
            while state.moving and state.moving[0][0] <= end + 1e-9:
                _, _, vehicle = heapq.heappop(state.moving)
                vehicle.queued_at_tick = self.tick_index
                state.queue.append(vehicle)

            state.budget += self._per_tick(state.segment)
            while state.queue and state.budget >= 1.0:
                vehicle = state.queue.popleft()
                state.budget -= 1.0
                leave = vehicle.exit_due if vehicle.queued_at_tick == self.tick_index else end
                self._record(vehicle, leave)
                transfers.append((vehicle, leave))
            row = self._index[state.segment.id]
            self._peak_queue[row] = max(self._peak_queue[row], state.queue_length_m)
            if not state.queue:
                # An idle segment holds at most one tick of discharge allowance.
                state.budget = min(state.budget, max(1.0, self._per_tick(state.segment)))
            if not state.moving and not state.queue:
                del self._active[state.segment.id]

        # Moving on to the next segment happens after all discharges so that
        # a vehicle is served by at most one segment per tick.
        for vehicle, leave in sorted(transfers, key=lambda item: (item[1], item[0].id)):
            if vehicle.position + 1 < len(vehicle.path.segments):
                vehicle.position += 1
                self._enter(vehicle, leave)
            else:
                vehicle.arrival = leave
                self.exited += 1
                completed.append(vehicle)

        col = bin_index(self.now, self.params.bin_minutes, self.n_bins)
        self._acc_sum[col] += self.on_network
        self._acc_ticks[col] += 1
        self.tick_index += 1
        return completed

    def skip_idle(self, ticks: int) -> None:
        """Advances an empty network by `ticks` without simulating them."""
        if self.on_network:
            raise NetworkError("cannot skip ticks while vehicles are on the network")
        for _ in range(ticks):
            self._acc_ticks[bin_index(self.now, self.params.bin_minutes, self.n_bins)] += 1
            self.tick_index += 1

    def drain(self, limit: float = 3 * MINUTES_PER_DAY) -> List[Vehicle]:
        """Steps until the network is empty.

        Raises:
          NetworkError: vehicles remain on the network at `limit`.
        """
        completed = []
        while self.on_network:
            if self.now >= limit:
                raise NetworkError(f"{self.on_network} vehicles still on the network at minute {limit}")
            completed.extend(self.step())
        return completed

    def observed_link_times(self) -> np.ndarray:
        """Mean traversal time per (segment, entry bin); NaN where unobserved."""
        with np.errstate(invalid='ignore', divide='ignore'):
            return np.where(self._tt_count > 0, self._tt_sum / np.maximum(self._tt_count, 1), np.nan)

    def accumulation(self) -> np.ndarray:
        """Mean number of vehicles on the network per bin."""
        return self._acc_sum / np.maximum(self._acc_ticks, 1)

    def peak_queue_lengths(self) -> np.ndarray:
        """Longest queue left after discharge per segment so far, meters."""
        return self._peak_queue.copy()


@dataclass
class SupplyResult:
    """Outcome of a standalone supply run."""

    records: List[TripRecord]
    link_times: np.ndarray
    accumulation: np.ndarray
    peak_queues: np.ndarray


def run_day(network: RoadNetwork, departures: Iterable[Departure], params: SupplyParams) -> SupplyResult:
    """Loads a fixed list of departures and simulates until the network is empty.

    Args:
      network: road network.
      departures: (traveler, trip index, path, departure minute) tuples.
      params: supply parameters.

    Raises:
      NetworkError: a path is not valid on the network.
    """
    pending = sorted(departures, key=lambda d: (d[3], d[0], d[1]))
    for traveler, trip_index, path, _ in pending:
        try:
            network.make_path(path.segments)
        except NetworkError as e:
            raise NetworkError(f"traveler {traveler} trip {trip_index}: {e}") from e

    simulator = SupplySimulator(network, params)
    completed: List[Vehicle] = []
    cursor = 0
    while cursor < len(pending) or simulator.on_network:
        while cursor < len(pending) and pending[cursor][3] <= simulator.now + 1e-9:
            traveler, trip_index, path, departure = pending[cursor]
            simulator.add_vehicle(traveler, trip_index, path, departure)
            cursor += 1
        completed.extend(simulator.step())

    records = [trip_record(v) for v in sorted(completed, key=lambda v: (v.traveler, v.trip_index))]
    logger.debug(f"Supply run: {len(records)} trips, {simulator.tick_index} ticks")
    return SupplyResult(records=records, link_times=simulator.observed_link_times(),
                        accumulation=simulator.accumulation(), peak_queues=simulator.peak_queue_lengths())


def trip_record(vehicle: Vehicle, predicted_time: Optional[float] = None) -> TripRecord:
    """Turns a completed vehicle into a trip record."""
    path = vehicle.path
    return TripRecord(
        traveler=vehicle.traveler,
        trip_index=vehicle.trip_index,
        departure=vehicle.departure,
        arrival=vehicle.arrival,
        travel_time=vehicle.travel_time,
        distance=path.total_distance,
        path_id=-1,
        free_flow_time=path.free_flow_time,
        predicted_time=path.free_flow_time if predicted_time is None else predicted_time,
        segments=list(path.segments)
    )

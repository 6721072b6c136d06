"""This module assembles an experiment: the road network, the population with
its trip chains and the run settings, all drawn from one seeded source.

Randomness is split into named substreams so that, for example, changing the
population size does not perturb the network attributes.

Usage example:

  config = load_scenario(Path('scenarios/desk.json'))
  scenario = build_scenario(config)
"""

import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..config.settings import MINUTES_PER_DAY, NetworkParams, ScenarioConfig
from .errors import ScenarioError
from .types import NetworkDescription, Segment, Traveler, Trip, TripPurpose

logger = logging.getLogger(__name__)

SEGMENT_COLUMNS = ['id', 'from', 'to', 'length_m', 'vf_kmh', 'capacity_veh_per_h',
                   'kjam_veh_per_km', 'lanes', 'signal', 'highway']

_PURPOSES = (TripPurpose.WORK, TripPurpose.EDUCATION, TripPurpose.OTHER)
_TRIP_COUNTS = (2, 3, 4)
# Preferred arrivals are kept inside this span so that every window fits the day.
_EARLIEST_ARRIVAL = 300.0
_LATEST_ARRIVAL = 1350.0


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Returns the generator of a named substream of the run seed.

    Args:
      seed: 64-bit run seed.
      name: stream name, e.g. 'population', 'choice', 'bo'.
      keys: further integers identifying the stream (day, traveler, ...).
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]
    entropy.extend(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class Scenario:
    """A fully materialized experiment."""

    config: ScenarioConfig
    network: NetworkDescription
    population: Tuple[Traveler, ...]


def build_scenario(config: ScenarioConfig) -> Scenario:
    """Loads or synthesizes the network and the population of a config."""
    network_file = config.resolve(config.network.file)
    if network_file is not None:
        network = load_network(network_file)
    else:
        network = generate_grid_network(config.network.rows, config.network.cols,
                                        config.network, substream(config.seed, 'network'))

    population_file = config.resolve(config.population.file)
    if population_file is not None:
        population = load_population(population_file)
    else:
        population = synthesize_population(config, substream(config.seed, 'population'),
                                           nodes=network.nodes)
    logger.info(f"Scenario with {len(network.nodes)} nodes, {len(network.segments)} segments, "
                f"{len(population)} travelers")
    return Scenario(config=config, network=network, population=tuple(population))


def _lognormal_parameters(mean: float, cv: float) -> Tuple[float, float]:
    sigma2 = np.log1p(cv ** 2)
    return float(np.log(mean) - sigma2 / 2), float(np.sqrt(sigma2))


def synthesize_population(config: ScenarioConfig, rng: np.random.Generator,
                          nodes: Optional[Sequence[int]] = None) -> List[Traveler]:
    """Draws travelers with values of time, schedule-delay rates and trip chains.

    VOT is log-normal with the configured mean and coefficient of variation;
    the schedule-delay ratios are triangular and redrawn until
    sde_rate < vot < sdl_rate. Trip chains leave home in the morning peak and
    return in the evening peak, with optional intermediate stops.

    Args:
      config: scenario configuration.
      rng: population substream.
      nodes: node ids available as trip ends; the configured grid by default.
    """
    params = config.population
    if nodes is None:
        nodes = range(config.network.rows * config.network.cols)
    nodes = np.asarray(list(nodes), dtype=int)
    if len(nodes) < 2:
        raise ScenarioError("population synthesis needs at least two nodes")

    mu, sigma = _lognormal_parameters(params.vot_mean_per_hour / 60.0, params.vot_cv)
    travelers = []
    for traveler_id in range(config.population_size):
        vot = float(rng.lognormal(mu, sigma))
        while True:
            sde = vot * float(rng.triangular(*params.sde_ratio))
            sdl = vot * float(rng.triangular(*params.sdl_ratio))
            if 0 < sde < vot < sdl:
                break
        trips = _trip_chain(params, rng, nodes)
        travelers.append(Traveler(id=traveler_id, vot=vot, sde_rate=sde, sdl_rate=sdl,
                                  trips=tuple(trips)))
    return travelers


def _other_node(rng: np.random.Generator, nodes: np.ndarray, *excluded: int) -> int:
    candidates = nodes[~np.isin(nodes, excluded)]
    return int(rng.choice(candidates))


def _trip_chain(params, rng: np.random.Generator, nodes: np.ndarray) -> List[Trip]:
    count = int(rng.choice(_TRIP_COUNTS, p=params.trips_per_person))
    first = float(np.clip(rng.normal(*params.morning_peak), _EARLIEST_ARRIVAL, 720.0))
    last = float(np.clip(rng.normal(*params.evening_peak), first + 240.0, _LATEST_ARRIVAL))
    arrivals = [first]
    if count > 2:
        arrivals.extend(np.sort(rng.uniform(first + 60.0, last - 60.0, size=count - 2)))
    arrivals.append(last)
    arrivals = [round(float(a), 1) for a in arrivals]

    home = int(rng.choice(nodes))
    location = home
    trips = []
    for index, arrival in enumerate(arrivals):
        if index == count - 1:
            destination = home
        else:
            destination = _other_node(rng, nodes, home, location)
        purpose = _PURPOSES[int(rng.choice(len(_PURPOSES), p=params.purpose_mix))]
        if index == 0:
            duration = 0.0
        else:
            gap = arrival - arrivals[index - 1]
            duration = round(max(0.5 * gap, gap - 40.0), 1)
        trips.append(Trip(origin=location, destination=destination, preferred_arrival=arrival,
                          purpose=purpose, preceding_activity_duration=duration))
        location = destination
    return trips


def generate_grid_network(rows: int, cols: int, params: NetworkParams,
                          rng: np.random.Generator) -> NetworkDescription:
    """Builds a bidirectional grid standing in for a city network.

    Node (r, c) has id r * cols + c. Every row and column whose index is a
    multiple of `highway_every` is a two-lane unsignalized highway.

    Args:
      rows: grid rows, at least 2.
      cols: grid columns, at least 2.
      params: attribute ranges.
      rng: network substream.
    """
    if rows < 2 or cols < 2:
        raise ScenarioError("grid needs at least 2 rows and 2 columns")

    links = []
    for r in range(rows):
        for c in range(cols):
            node = r * cols + c
            if c + 1 < cols:
                links.append((node, node + 1, r % params.highway_every == 0))
            if r + 1 < rows:
                links.append((node, node + cols, c % params.highway_every == 0))

    segments = []
    for a, b, highway in links:
        length = round(float(rng.uniform(*params.length_range)))
        for from_node, to_node in ((a, b), (b, a)):
            lanes = 2 if highway else 1
            capacity = round(lanes * float(rng.uniform(*params.lane_capacity_range)))
            signal = (not highway) and bool(rng.random() < params.signal_probability)
            segments.append(Segment(
                id=len(segments),
                from_node=from_node,
                to_node=to_node,
                length=float(length),
                vf=params.highway_speed if highway else params.arterial_speed,
                capacity=float(capacity),
                kjam=params.kjam,
                lanes=lanes,
                signal=signal,
                highway=highway
            ))
    return NetworkDescription(nodes=tuple(range(rows * cols)), segments=tuple(segments))


def save_network(network: NetworkDescription, path: Path) -> None:
    """Writes the segment table as CSV."""
    frame = pd.DataFrame([s.to_dict() for s in network.segments], columns=SEGMENT_COLUMNS)
    frame.to_csv(path, index=False)


def load_network(path: Path) -> NetworkDescription:
    """Reads a segment table written by save_network (or by hand).

    Raises:
      ScenarioError: a column is missing or a segment violates its invariants.
    """
    frame = pd.read_csv(path)
    missing = [c for c in SEGMENT_COLUMNS if c not in frame.columns and c != 'lanes']
    if missing:
        raise ScenarioError(f"network file {path} lacks column(s): {', '.join(missing)}")
    segments = tuple(Segment.from_dict(row) for row in frame.to_dict('records'))
    for s in segments:
        if min(s.length, s.vf, s.capacity, s.kjam) <= 0:
            raise ScenarioError(f"segment {s.id} must have positive length, vf, capacity and kjam")
    nodes = sorted({s.from_node for s in segments} | {s.to_node for s in segments})
    return NetworkDescription(nodes=tuple(nodes), segments=segments)


def save_population(population: Sequence[Traveler], path: Path) -> None:
    """Writes one record per traveler, trips inlined."""
    with open(path, 'w') as f:
        json.dump([t.to_dict() for t in population], f, indent=1)


def load_population(path: Path) -> List[Traveler]:
    """Reads a population written by save_population and checks its invariants."""
    with open(path, 'r') as f:
        try:
            records = json.load(f)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"cannot parse population {path}: {e}") from e
    population = [Traveler.from_dict(r) for r in records]
    for t in population:
        if not 0 < t.sde_rate < t.vot < t.sdl_rate:
            raise ScenarioError(f"traveler {t.id} must satisfy 0 < sde_rate < vot < sdl_rate")
        arrivals = [trip.preferred_arrival for trip in t.trips]
        if arrivals != sorted(arrivals):
            raise ScenarioError(f"traveler {t.id} trips must be ordered by preferred arrival")
        for trip in t.trips:
            if trip.origin == trip.destination or not 0 <= trip.preferred_arrival < MINUTES_PER_DAY:
                raise ScenarioError(f"traveler {t.id} has an invalid trip")
    return population

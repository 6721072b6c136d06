"""This module implements the road graph, route choice-set generation and the
path attributes used by the route utility.

Choice sets combine k-shortest paths under free-flow time and under distance
with link-elimination variants of the fastest path, deduplicated and capped.

Usage example:

  network = RoadNetwork(scenario.network)
  choice_set = network.choice_set((0, 35), config.choice)
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from itertools import islice
from pathlib import Path as FilePath
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from ..config.settings import ChoiceParams
from .errors import NetworkError, ScenarioError
from .types import NetworkDescription, Path, Segment

logger = logging.getLogger(__name__)

OD = Tuple[int, int]
Weight = Union[str, Mapping[int, float]]


@dataclass(frozen=True)
class ChoiceSet:
    """Distinct paths of an OD pair with their dominance dummies.

    Attributes:
        od: (origin, destination).
        paths: Distinct paths; index 0 is the free-flow fastest.
        min_tt: 1 for the path with least free-flow time, else 0.
        min_dist: 1 for the shortest path by distance.
        min_sig: 1 for the path with fewest signals.
        max_hwy: 1 for the path with most highway distance.
    """

    od: OD
    paths: Tuple[Path, ...]
    min_tt: Tuple[int, ...]
    min_dist: Tuple[int, ...]
    min_sig: Tuple[int, ...]
    max_hwy: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.paths)


class RoadNetwork:
    """Directed road graph built from a network description.

    Each graph edge carries its segment id, length and free-flow time.
    Choice sets are memoized per OD pair.
    """

    def __init__(self, description: NetworkDescription):
        self.description = description
        self.segments: Dict[int, Segment] = {s.id: s for s in description.segments}
        self.graph = nx.DiGraph()
        self.graph.add_nodes_from(description.nodes)
        for s in description.segments:
            if self.graph.has_edge(s.from_node, s.to_node):
                raise ScenarioError(f"parallel segments between {s.from_node} and {s.to_node}")
            self.graph.add_edge(s.from_node, s.to_node, segment=s.id, length=s.length,
                                free_flow_time=s.free_flow_time)
        self._choice_sets: Dict[OD, ChoiceSet] = {}

    def fingerprint(self) -> str:
        """Hash of the segment table, used to invalidate cached choice sets."""
        payload = json.dumps([s.to_dict() for s in self.description.segments], sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def segment_ids(self, nodes: Sequence[int]) -> Tuple[int, ...]:
        return tuple(self.graph[u][v]['segment'] for u, v in zip(nodes, nodes[1:]))

    def make_path(self, segment_ids: Sequence[int], path_size: float = 1.0) -> Path:
        """Builds a Path with its attributes from a segment chain.

        Raises:
          NetworkError: unknown segment or non-contiguous chain.
        """
        if not segment_ids:
            raise NetworkError("a path needs at least one segment")
        try:
            chain = [self.segments[i] for i in segment_ids]
        except KeyError as e:
            raise NetworkError(f"unknown segment {e.args[0]}") from e
        for a, b in zip(chain, chain[1:]):
            if a.to_node != b.from_node:
                raise NetworkError(f"segments {a.id} and {b.id} are not contiguous")
        return Path(
            segments=tuple(segment_ids),
            total_distance=sum(s.length for s in chain),
            signal_count=sum(1 for s in chain if s.signal),
            highway_distance=sum(s.length for s in chain if s.highway),
            free_flow_time=sum(s.free_flow_time for s in chain),
            path_size=path_size
        )

    def choice_set(self, od: OD, params: ChoiceParams) -> ChoiceSet:
        if od not in self._choice_sets:
            self._choice_sets[od] = build_choice_set(self, od, params)
        return self._choice_sets[od]

    def preload(self, choice_sets: Mapping[OD, ChoiceSet]) -> None:
        self._choice_sets.update(choice_sets)

    @property
    def cached_choice_sets(self) -> Dict[OD, ChoiceSet]:
        return dict(self._choice_sets)


def _weighted_graph(network: RoadNetwork, weight: Weight) -> Tuple[nx.DiGraph, str]:
    if isinstance(weight, str):
        return network.graph, weight
    graph = network.graph.copy()
    for u, v, data in graph.edges(data=True):
        data['cost'] = float(weight[data['segment']])
    return graph, 'cost'


def k_shortest_paths(network: RoadNetwork, od: OD, k: int, weight: Weight = 'free_flow_time') -> List[Path]:
    """Returns up to k loopless paths in nondecreasing weight order.

    This wraps :func:`networkx.shortest_simple_paths` (Yen's algorithm).

    Args:
      network: road network.
      od: (origin, destination) node ids.
      k: number of paths wanted, at least 1.
      weight: edge attribute name ('free_flow_time', 'length') or a mapping
        from segment id to cost.

    Returns:
      The paths found; empty when the destination is unreachable.
    """
    if k < 1:
        raise ValueError('k must be at least 1')
    graph, attribute = _weighted_graph(network, weight)
    origin, destination = od
    try:
        generator = nx.shortest_simple_paths(graph, origin, destination, weight=attribute)
        node_paths = list(islice(generator, k))
    except (nx.NetworkXNoPath, nx.NodeNotFound):
        return []
    return [network.make_path(network.segment_ids(p)) for p in node_paths]


def _link_elimination(network: RoadNetwork, od: OD, base: Path) -> List[Path]:
    """Shortest free-flow path after removing each segment of `base` in turn."""
    origin, destination = od
    variants = []
    for segment_id in base.segments:
        removed = network.segments[segment_id]
        view = nx.restricted_view(network.graph, [], [(removed.from_node, removed.to_node)])
        try:
            nodes = nx.shortest_path(view, origin, destination, weight='free_flow_time')
        except nx.NetworkXNoPath:
            continue
        variants.append(network.make_path(network.segment_ids(nodes)))
    return variants


def path_size(path: Path, paths: Sequence[Path], lengths: Mapping[int, float]) -> float:
    """Length-weighted overlap factor of a path within its set.

    Sum over the path's segments of (l_a / L_path) * (1 / N_a), where N_a is
    the number of paths in the set using segment a.

    Args:
      path: a member of `paths`.
      paths: the choice set's paths.
      lengths: segment id to length in meters.
    """
    usage: Dict[int, int] = {}
    for p in paths:
        for a in set(p.segments):
            usage[a] = usage.get(a, 0) + 1
    return sum(lengths[a] / path.total_distance / usage[a] for a in path.segments)


def save_choice_sets(network: RoadNetwork, path: FilePath) -> None:
    """Writes the memoized choice sets, keyed by OD, with the network hash."""
    payload = {
        'network': network.fingerprint(),
        'choice_sets': {f"{o}-{d}": [list(p.segments) for p in cs.paths]
                        for (o, d), cs in sorted(network.cached_choice_sets.items())}
    }
    with open(path, 'w') as f:
        json.dump(payload, f)


def load_choice_sets(network: RoadNetwork, path: FilePath) -> Optional[Dict[OD, ChoiceSet]]:
    """Reads a choice-set cache; returns None if it belongs to another network."""
    path = FilePath(path)
    if not path.exists():
        return None
    with open(path, 'r') as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError:
            logger.warning(f"Ignoring unreadable choice-set cache {path}")
            return None
    if payload.get('network') != network.fingerprint():
        logger.info(f"Choice-set cache {path} is stale, regenerating")
        return None
    choice_sets = {}
    for key, chains in payload['choice_sets'].items():
        o, d = (int(x) for x in key.split('-'))
        choice_sets[(o, d)] = _assemble(network, (o, d), [network.make_path(c) for c in chains])
    return choice_sets


def build_choice_set(network: RoadNetwork, od: OD, params: ChoiceParams) -> ChoiceSet:
    """Generates the route choice set of an OD pair.

    Raises:
      NetworkError: the OD pair is unreachable.
    """
    k = params.paths_per_method
    fastest = k_shortest_paths(network, od, k, 'free_flow_time')
    if not fastest:
        raise NetworkError(f"OD pair {od[0]}->{od[1]} is unreachable")
    candidates = fastest + k_shortest_paths(network, od, k, 'length') \
        + _link_elimination(network, od, fastest[0])

    unique: List[Path] = []
    seen = set()
    for p in candidates:
        if p.segments not in seen:
            seen.add(p.segments)
            unique.append(p)
        if len(unique) == params.max_paths:
            break

    choice_set = _assemble(network, od, unique)
    logger.debug(f"Choice set {od[0]}->{od[1]}: {len(choice_set)} paths")
    return choice_set


def _dummy(values: Sequence[float], best) -> Tuple[int, ...]:
    # np.argmin/np.argmax return the first index among ties.
    index = int(best(np.asarray(values)))
    return tuple(int(i == index) for i in range(len(values)))


def _assemble(network: RoadNetwork, od: OD, unique: Sequence[Path]) -> ChoiceSet:
    lengths = {a: network.segments[a].length for p in unique for a in p.segments}
    paths = tuple(network.make_path(p.segments, path_size(p, unique, lengths)) for p in unique)
    return ChoiceSet(
        od=od,
        paths=paths,
        min_tt=_dummy([p.free_flow_time for p in paths], np.argmin),
        min_dist=_dummy([p.total_distance for p in paths], np.argmin),
        min_sig=_dummy([p.signal_count for p in paths], np.argmin),
        max_hwy=_dummy([p.highway_distance for p in paths], np.argmax),
    )

import pytest

from tcsim.config.settings import ChoiceParams
from tcsim.core.errors import NetworkError, ScenarioError
from tcsim.core.network import (RoadNetwork, build_choice_set, k_shortest_paths, load_choice_sets,
                                path_size, save_choice_sets)
from tcsim.core.types import NetworkDescription

from conftest import segment


def test_make_path_attributes(triangle):
    path = triangle.make_path((0, 1))
    assert path.total_distance == 2000.0
    assert path.signal_count == 2
    assert path.highway_distance == 0.0
    assert path.free_flow_time == pytest.approx(2.0)


def test_make_path_rejects_broken_chains(triangle):
    with pytest.raises(NetworkError, match='not contiguous'):
        triangle.make_path((0, 2))
    with pytest.raises(NetworkError, match='unknown segment'):
        triangle.make_path((0, 42))
    with pytest.raises(NetworkError):
        triangle.make_path(())


def test_parallel_segments_are_rejected():
    segments = (segment(0, 0, 1, 100.0), segment(1, 0, 1, 200.0))
    with pytest.raises(ScenarioError, match='parallel'):
        RoadNetwork(NetworkDescription(nodes=(0, 1), segments=segments))


def test_k_shortest_paths_orders_by_weight(triangle):
    by_time = k_shortest_paths(triangle, (0, 2), 5)
    assert [p.segments for p in by_time] == [(2,), (0, 1)]
    by_length = k_shortest_paths(triangle, (0, 2), 5, 'length')
    assert [p.segments for p in by_length] == [(0, 1), (2,)]
    costs = {0: 10.0, 1: 10.0, 2: 1.0, 3: 1.0, 4: 1.0, 5: 1.0}
    assert k_shortest_paths(triangle, (0, 2), 1, costs)[0].segments == (2,)


def test_k_shortest_paths_unreachable_is_empty():
    network = RoadNetwork(NetworkDescription(nodes=(0, 1, 2), segments=(segment(0, 0, 1, 100.0),)))
    assert k_shortest_paths(network, (0, 2), 3) == []
    assert k_shortest_paths(network, (0, 9), 3) == []
    with pytest.raises(ValueError):
        k_shortest_paths(network, (0, 1), 0)


def test_choice_set_dummies_and_path_sizes(triangle):
    choice_set = build_choice_set(triangle, (0, 2), ChoiceParams())
    assert [p.segments for p in choice_set.paths] == [(2,), (0, 1)]
    assert choice_set.min_tt == (1, 0)
    assert choice_set.min_dist == (0, 1)
    assert choice_set.min_sig == (1, 0)
    assert choice_set.max_hwy == (1, 0)
    # disjoint paths do not overlap
    assert all(p.path_size == pytest.approx(1.0) for p in choice_set.paths)


def test_choice_set_is_capped_and_distinct(small_scenario):
    network = RoadNetwork(small_scenario.network)
    params = ChoiceParams(max_paths=3)
    choice_set = network.choice_set((0, 8), params)
    assert 1 <= len(choice_set) <= 3
    assert len({p.segments for p in choice_set.paths}) == len(choice_set)
    fastest = min(p.free_flow_time for p in choice_set.paths)
    assert choice_set.paths[0].free_flow_time == pytest.approx(fastest)
    for dummies in (choice_set.min_tt, choice_set.min_dist, choice_set.min_sig, choice_set.max_hwy):
        assert sum(dummies) == 1
    assert network.choice_set((0, 8), params) is choice_set


def test_path_size_of_overlapping_paths(triangle):
    lengths = {s.id: s.length for s in triangle.description.segments}
    shared = triangle.make_path((0, 1))
    other = triangle.make_path((0, 1))
    assert path_size(shared, [shared, other], lengths) == pytest.approx(0.5)
    assert path_size(shared, [shared], lengths) == pytest.approx(1.0)


def test_unreachable_od_raises():
    network = RoadNetwork(NetworkDescription(nodes=(0, 1, 2), segments=(segment(0, 0, 1, 100.0),)))
    with pytest.raises(NetworkError, match='unreachable'):
        build_choice_set(network, (1, 0), ChoiceParams())


def test_choice_set_cache_round_trip(tmp_path, triangle):
    params = ChoiceParams()
    original = triangle.choice_set((0, 2), params)
    triangle.choice_set((2, 0), params)
    save_choice_sets(triangle, tmp_path / 'choice_sets.json')

    fresh = RoadNetwork(triangle.description)
    cached = load_choice_sets(fresh, tmp_path / 'choice_sets.json')
    assert set(cached) == {(0, 2), (2, 0)}
    assert cached[(0, 2)] == original
    assert load_choice_sets(fresh, tmp_path / 'absent.json') is None


def test_stale_choice_set_cache_is_ignored(tmp_path, triangle):
    triangle.choice_set((0, 2), ChoiceParams())
    save_choice_sets(triangle, tmp_path / 'choice_sets.json')
    changed = RoadNetwork(NetworkDescription(
        nodes=triangle.description.nodes,
        segments=triangle.description.segments[:-1]))
    assert load_choice_sets(changed, tmp_path / 'choice_sets.json') is None


def test_fingerprint_tracks_the_segment_table(triangle):
    same = RoadNetwork(triangle.description)
    assert same.fingerprint() == triangle.fingerprint()
    shorter = RoadNetwork(NetworkDescription(nodes=(0, 1, 2), segments=triangle.description.segments[:3]))
    assert shorter.fingerprint() != triangle.fingerprint()

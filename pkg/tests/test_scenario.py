import json
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from tcsim.config.settings import NetworkParams, ScenarioConfig
from tcsim.core.errors import ScenarioError
from tcsim.core.scenario import (build_scenario, generate_grid_network, load_network,
                                 load_population, save_network, save_population, substream,
                                 synthesize_population)
from tcsim.core.types import TripPurpose


def test_substreams_are_reproducible_and_independent():
    a = substream(7, 'choice', 1, 3).random(5)
    assert np.array_equal(a, substream(7, 'choice', 1, 3).random(5))
    assert not np.array_equal(a, substream(7, 'choice', 1, 4).random(5))
    assert not np.array_equal(a, substream(7, 'population').random(5))
    assert not np.array_equal(a, substream(8, 'choice', 1, 3).random(5))


def test_population_respects_traveler_invariants(small_scenario):
    population = small_scenario.population
    assert len(population) == 40
    for index, traveler in enumerate(population):
        assert traveler.id == index
        assert 0 < traveler.sde_rate < traveler.vot < traveler.sdl_rate
        arrivals = [t.preferred_arrival for t in traveler.trips]
        assert arrivals == sorted(arrivals)
        assert 2 <= len(traveler.trips) <= 4
        assert traveler.trips[-1].destination == traveler.trips[0].origin
        for previous, trip in zip(traveler.trips, traveler.trips[1:]):
            assert trip.origin == previous.destination
        for trip in traveler.trips:
            assert trip.origin != trip.destination
            assert 0 <= trip.preferred_arrival < 1440


def test_large_population_matches_its_moments():
    config = ScenarioConfig.from_dict({'population_size': 19000, 'seed': 3})
    population = synthesize_population(config, substream(config.seed, 'population'))
    vot_per_hour = 60.0 * np.mean([t.vot for t in population])
    assert vot_per_hour == pytest.approx(13.0, rel=0.05)
    trips = [trip for t in population for trip in t.trips]
    assert len(trips) / len(population) == pytest.approx(2.6, abs=0.05)
    purposes = Counter(trip.purpose for trip in trips)
    for purpose, share in zip(TripPurpose, (0.85, 0.10, 0.05)):
        assert purposes[purpose] / len(trips) == pytest.approx(share, abs=0.01)


def test_population_size_does_not_perturb_the_network(small_config):
    bigger = ScenarioConfig.from_dict({**small_config.to_dict(), 'population_size': 80})
    assert build_scenario(bigger).network == build_scenario(small_config).network


def test_same_seed_same_scenario(small_config):
    assert build_scenario(small_config) == build_scenario(small_config)


def test_grid_network_layout():
    params = NetworkParams(rows=3, cols=4)
    network = generate_grid_network(3, 4, params, np.random.default_rng(0))
    assert network.nodes == tuple(range(12))
    # 3 * 3 horizontal + 2 * 4 vertical links, both directions
    assert len(network.segments) == 2 * (9 + 8)
    assert [s.id for s in network.segments] == list(range(len(network.segments)))
    for s in network.segments:
        assert params.length_range[0] <= s.length <= params.length_range[1]
        if s.highway:
            assert s.lanes == 2 and not s.signal and s.vf == params.highway_speed
    pairs = {(s.from_node, s.to_node): s.length for s in network.segments}
    for (a, b), length in pairs.items():
        assert pairs[(b, a)] == length


def test_grid_needs_two_rows():
    with pytest.raises(ScenarioError):
        generate_grid_network(1, 4, NetworkParams(), np.random.default_rng(0))


def test_network_and_population_files_round_trip(tmp_path, small_scenario):
    save_network(small_scenario.network, tmp_path / 'network.csv')
    save_population(small_scenario.population, tmp_path / 'population.json')
    assert load_network(tmp_path / 'network.csv') == small_scenario.network
    assert tuple(load_population(tmp_path / 'population.json')) == small_scenario.population


def test_scenario_files_replace_synthesis(tmp_path, small_scenario):
    save_network(small_scenario.network, tmp_path / 'network.csv')
    save_population(small_scenario.population[:5], tmp_path / 'population.json')
    config = ScenarioConfig.from_dict({
        'network': {'file': 'network.csv'},
        'population': {'file': 'population.json'},
    })
    config = replace(config, base_dir=str(tmp_path))
    scenario = build_scenario(config)
    assert scenario.network == small_scenario.network
    assert len(scenario.population) == 5


def test_invalid_population_file_is_rejected(tmp_path, small_scenario):
    record = small_scenario.population[0].to_dict()
    record['sde_rate'] = record['vot'] * 2
    path = tmp_path / 'population.json'
    path.write_text(json.dumps([record]))
    with pytest.raises(ScenarioError, match='sde_rate < vot'):
        load_population(path)


def test_network_file_missing_columns(tmp_path):
    path = tmp_path / 'network.csv'
    path.write_text('id,from,to\n0,0,1\n')
    with pytest.raises(ScenarioError, match='length_m'):
        load_network(path)


def test_synthesis_needs_two_nodes(small_config):
    with pytest.raises(ScenarioError):
        synthesize_population(small_config, np.random.default_rng(0), nodes=[3])

import json
import logging

import pytest

from tcsim.config.settings import (LOG_FORMAT, ScenarioConfig, TcsParams, configure_logging,
                                   load_scenario, save_scenario)
from tcsim.core.errors import ScenarioError


def test_defaults_follow_the_credit_scheme_table():
    tcs = ScenarioConfig().tcs
    assert tcs.allocation_rate == pytest.approx(0.05)
    assert tcs.allocation_interval == 20
    assert tcs.lifetime == 1420
    assert tcs.initial_price == 0.1
    assert tcs.initial_allocation == 72
    assert tcs.max_credits_per_trip == 160
    assert tcs.price_step == 1e-5
    assert tcs.credits_per_allocation == 1
    assert tcs.wallet_capacity == 72


def test_missing_keys_fall_back_to_defaults():
    config = ScenarioConfig.from_dict({'seed': 5, 'tcs': {'fees': {'sell_rate': 0.1}}})
    assert config.seed == 5
    assert config.tcs.fees.sell_rate == 0.1
    assert config.tcs.lifetime == 1420
    assert config.choice.eta == 6


@pytest.mark.parametrize('data, message', [
    ({'colour': 'red'}, 'unknown key'),
    ({'tcs': {'speed': 1}}, 'unknown key'),
    ({'days': 0}, 'days must be >= 1'),
    ({'population_size': 0}, 'population_size'),
    ({'tcs': {'allocation_rate': 0.03}}, 'positive integer'),
    ({'tcs': {'lifetime': 1430}}, 'multiple of allocation_interval'),
    ({'tcs': {'fees': {'sell_rate': 1.0}}}, 'sell_rate must be < 1'),
    ({'tcs': {'fees': {'buy_fixed': -1.0}}}, 'buy_fixed'),
    ({'learning': {'rate': 0.0}}, 'learning.rate'),
    ({'bo': {'std_box': [0.0, 10.0]}}, 'std_box'),
])
def test_invalid_scenarios_name_the_violated_invariant(data, message):
    with pytest.raises(ScenarioError, match=message):
        ScenarioConfig.from_dict(data)


def test_lump_sum_allocation_is_valid():
    params = TcsParams(allocation_rate=72 / 1440, allocation_interval=1440, lifetime=1440)
    params.validate()
    assert params.credits_per_allocation == 72
    assert params.wallet_capacity == 144


def test_overrides_return_a_validated_copy(small_config):
    config = small_config.with_overrides(seed=99, days=2, threshold=1.0, iterations=4)
    assert (config.seed, config.days, config.learning.max_days) == (99, 2, 2)
    assert config.tcs.profit_threshold == 1.0
    assert config.bo.iterations == 4
    assert small_config.seed == 11
    with pytest.raises(ScenarioError):
        small_config.with_overrides(threshold=-1.0)


def test_scenario_file_round_trip_and_relative_files(tmp_path, small_config):
    path = tmp_path / 'scenario.json'
    save_scenario(small_config, path)
    loaded = load_scenario(path)
    assert loaded == small_config
    assert loaded.resolve('net.csv') == tmp_path / 'net.csv'


def test_unparsable_scenario_is_a_scenario_error(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"days": ')
    with pytest.raises(ScenarioError, match='broken.json'):
        load_scenario(path)


def test_missing_scenario_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        load_scenario(tmp_path / 'absent.json')


def test_desk_scenario_loads():
    from pathlib import Path
    config = load_scenario(Path(__file__).parent.parent / 'scenarios' / 'desk.json')
    assert config.population_size == 2000
    assert config.days == 25
    assert json.loads(json.dumps(config.to_dict()))['tcs']['lifetime'] == 1420


def test_configure_logging_starts_a_fresh_file(tmp_path):
    log_file = tmp_path / 'run_log.txt'
    log_file.write_text('old content\n')
    configure_logging(log_file, debug=True)
    logger = logging.getLogger('tcsim.test')
    logger.debug('debug line')
    for handler in logging.getLogger('tcsim').handlers:
        handler.flush()
    text = log_file.read_text()
    assert 'old content' not in text
    assert 'Starting new log session' in text
    assert ' - DEBUG - debug line' in text
    assert LOG_FORMAT.startswith('%(asctime)s')

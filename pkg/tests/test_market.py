import math

import numpy as np
import pytest

from tcsim.config.settings import FeeSchedule, TcsParams
from tcsim.core.daytoday import replay_prices
from tcsim.core.errors import MarketError
from tcsim.core.market import (N_TOLL_BINS, Credit, CreditAccount, CreditMarket, MarketState, Regulator,
                               TollProfile, allocate, allocation_events, buy_cost, charge_trip,
                               grant_initial, predicted_balances, selling_profit, sell_all,
                               sell_revenue, should_sell, update_price)
from tcsim.core.types import REGULATOR_ID, TransactionKind

PARAMS = TcsParams()


def flat_toll(rate=0.001):
    return TollProfile(np.full(N_TOLL_BINS, rate))


def account_with(balance, params=PARAMS, now=0):
    """An account holding `balance` tokens allocated on the grid just before `now`."""
    account = CreditAccount(owner=0, capacity=params.wallet_capacity)
    per = params.credits_per_allocation
    births = sorted(now - params.allocation_interval * (j // per) for j in range(balance))
    for birth in births:
        account.receive([Credit(birth=birth, lifetime=params.lifetime)])
    return account


# -- account dynamics -------------------------------------------------------

def test_full_wallet_allocation_keeps_the_balance():
    account = CreditAccount(owner=0, capacity=72)
    grant_initial(account, PARAMS, start=0)
    assert account.balance == 72
    allocate([account], 0, PARAMS, day=1, price=0.1)
    assert account.balance == 72
    assert account.expired == 1
    allocate([account], 20, PARAMS, day=1, price=0.1)
    assert account.balance == 72
    assert account.counters_balance()


def test_allocation_to_empty_and_partial_accounts():
    empty = CreditAccount(owner=0, capacity=72)
    partial = account_with(10, now=0)
    transactions = allocate([empty, partial], 20, PARAMS, day=1, price=0.1)
    assert (empty.balance, partial.balance) == (1, 11)
    assert [t.kind for t in transactions] == [TransactionKind.ALLOCATION] * 2
    assert transactions[0].buyer == 0 and transactions[0].seller == REGULATOR_ID


def test_allocation_off_the_grid_is_rejected():
    with pytest.raises(MarketError):
        allocate([CreditAccount(owner=0, capacity=72)], 30, PARAMS, day=1, price=0.1)


def test_charge_from_the_account_then_allocate():
    account = account_with(10, now=0)
    market = MarketState()
    result = charge_trip(account, market, flat_toll(), 5.0, 3000.0, PARAMS)
    assert (result.charged, result.bought) == (3, 0)
    assert account.balance == 7
    allocate([account], 20, PARAMS, day=1, price=0.1)
    assert account.balance == 8


def test_short_account_buys_the_shortfall():
    account = account_with(2, now=0)
    market = MarketState(price=0.1)
    regulator = Regulator()
    result = charge_trip(account, market, flat_toll(), 5.0, 5000.0, PARAMS, regulator)
    assert (result.charged, result.bought) == (5, 3)
    assert account.balance == 0
    assert account.cash == pytest.approx(-0.3)
    assert market.bought_today == 3
    assert [t.kind for t in result.transactions] == [TransactionKind.BUY, TransactionKind.USE]
    assert (regulator.sold, regulator.collected) == (3, 5)
    assert regulator.revenue == pytest.approx(0.3)


def test_exact_balance_is_the_no_purchase_branch():
    account = account_with(5, now=0)
    result = charge_trip(account, MarketState(), flat_toll(), 5.0, 5000.0, PARAMS)
    assert (result.charged, result.bought, account.balance) == (5, 0, 0)


def test_charge_rounds_up_and_is_capped():
    assert TollProfile(np.full(N_TOLL_BINS, 0.0194)).charge(480.0, 5000.0, 160) == 97
    assert flat_toll().charge(480.0, 2500.5, 160) == 3
    assert flat_toll(0.05).charge(480.0, 10000.0, 160) == 160
    result = charge_trip(account_with(5), MarketState(), TollProfile.zeros(), 480.0, 5000.0, PARAMS)
    assert (result.charged, result.transactions) == (0, ())


def test_toll_profile_validation_and_file(tmp_path):
    with pytest.raises(MarketError):
        TollProfile(np.zeros(10))
    with pytest.raises(MarketError):
        TollProfile(np.full(N_TOLL_BINS, -0.1))
    values = np.linspace(0.0, 0.01, N_TOLL_BINS)
    TollProfile(values).to_csv(tmp_path / 'toll.csv')
    loaded = TollProfile.from_csv(tmp_path / 'toll.csv')
    assert np.allclose(loaded.values, values)
    assert loaded.rate(1500.0) == pytest.approx(values[-1])
    (tmp_path / 'bad.csv').write_text('bin_start,rate\n0,1\n')
    with pytest.raises(MarketError):
        TollProfile.from_csv(tmp_path / 'bad.csv')


class ReferenceAccount:
    """Token births only; the balance rules replayed step by step."""

    def __init__(self, params, initial):
        self.params = params
        per = params.credits_per_allocation
        self.births = sorted(-params.allocation_interval * (1 + j // per) for j in range(initial))

    def expire(self, now):
        self.births = [b for b in self.births if b + self.params.lifetime >= now]

    def allocate(self, now):
        self.expire(now)
        self.births.extend([now] * self.params.credits_per_allocation)
        self.births = self.births[-self.params.wallet_capacity:]

    def charge(self, amount):
        self.births = [] if amount >= len(self.births) else self.births[amount:]

    def sell(self):
        self.births = []


def _random_params(rng):
    interval = int(rng.choice([10, 20, 30, 60]))
    per = int(rng.integers(1, 3))
    lifetime = interval * int(rng.integers(1, 8))
    initial = int(rng.integers(0, 20))
    return TcsParams(allocation_rate=per / interval, allocation_interval=interval,
                     lifetime=lifetime, initial_allocation=initial, max_credits_per_trip=40)


def test_account_dynamics_match_a_reference_replay():
    rng = np.random.default_rng(2024)
    toll = flat_toll()
    for _ in range(10_000):
        params = _random_params(rng)
        account = CreditAccount(owner=0, capacity=params.wallet_capacity)
        grant_initial(account, params, start=0)
        reference = ReferenceAccount(params, min(params.initial_allocation, params.wallet_capacity))
        market = MarketState()
        last = -1
        now = 0
        for _ in range(int(rng.integers(1, 12))):
            now = last + 1 + int(rng.integers(0, 90))
            for instant in range((last // params.allocation_interval + 1) * params.allocation_interval,
                                 now + 1, params.allocation_interval):
                allocate([account], instant, params, day=1, price=0.1)
                reference.allocate(instant)
            account.expire(now)
            reference.expire(now)
            action = rng.choice(['charge', 'sell', 'idle'])
            if action == 'charge':
                amount = int(rng.integers(1, 30))
                charge_trip(account, market, toll, 0.0, amount * 1000.0, params)
                reference.charge(amount)
            elif action == 'sell' and account.balance > 0:
                sell_all(account, market, params.fees, now)
                reference.sell()
            assert account.balance == len(reference.births)
            assert [c.birth for c in account.active] == reference.births
            assert account.counters_balance()
            assert 0 <= account.balance <= params.wallet_capacity
            last = now


# -- selling rule -------------------------------------------------------------

def test_selling_profit_examples():
    horizon = [(600.0, 5)]
    assert selling_profit(72, 0.0, horizon, 0.1, PARAMS) == pytest.approx(7.2)
    fees = TcsParams(fees=FeeSchedule(sell_fixed=0.05))
    assert selling_profit(0, 0.0, [], 0.1, fees) == pytest.approx(-0.05)
    # balance 40, trips charging 60 then 20
    horizon = [(100.0, 60), (700.0, 20)]
    expected_balances = [5, 30]
    assert predicted_balances(0.0, horizon, PARAMS) == expected_balances
    assert selling_profit(40, 0.0, horizon, 0.1, PARAMS) == pytest.approx(0.1 * 40 - 0.1 * 55)


def test_predicted_balances_cap_and_carry():
    params = TcsParams()
    horizon = [(20.0 * 100, 0), (20.0 * 101, 3), (20.0 * 110, 2)]
    assert predicted_balances(0.0, horizon, params) == [72, 72, 72]
    assert predicted_balances(0.0, [(60.0, 10), (120.0, 1)], params) == [3, 3]


def test_full_wallet_sells():
    assert should_sell(72, 0.0, [(600.0, 5)], 0.1, PARAMS)
    assert not should_sell(72, 0.0, [(600.0, 5)], 0.1, PARAMS, threshold=100.0)
    assert not should_sell(0, 0.0, [(600.0, 50)], 0.1, PARAMS)


def test_funded_trips_and_room_in_the_wallet_keep_the_credits():
    # 30 allocation events before the trip predict 30 credits for a 10-credit toll
    assert not should_sell(40, 0.0, [(600.0, 10)], 0.1, PARAMS)


def test_underfunded_trip_triggers_a_sale():
    assert should_sell(40, 0.0, [(600.0, 30)], 0.1, PARAMS)


def test_threshold_blocks_small_profits():
    params = TcsParams(profit_threshold=1.0)
    assert not should_sell(5, 0.0, [(600.0, 30)], 0.1, params)
    assert should_sell(15, 0.0, [(600.0, 30)], 0.1, params)


def _oracle_profit(balance, now, horizon, price, params):
    fees = params.fees
    profit = balance * price * (1 - fees.sell_rate) - fees.sell_fixed
    step = params.allocation_interval
    carry, previous = 0, now
    for time, credits in horizon:
        arrived = (math.floor(time / step) - math.floor(previous / step)) * params.credits_per_allocation
        expected = min(carry + arrived, params.wallet_capacity)
        if credits > expected:
            short = credits - expected
            profit -= short * price * (1 + fees.buy_rate) + fees.buy_fixed
        carry = max(expected - credits, 0)
        previous = time
    return profit


def _random_instance(rng):
    step = 20
    fees = FeeSchedule(
        buy_fixed=float(rng.choice([0.0, rng.uniform(0, 0.1)])),
        sell_fixed=float(rng.choice([0.0, rng.uniform(0, 0.1)])),
        buy_rate=float(rng.choice([0.0, rng.uniform(0, 0.2)])),
        sell_rate=float(rng.choice([0.0, rng.uniform(0, 0.2)])))
    params = TcsParams(fees=fees, profit_threshold=float(rng.choice([0.0, rng.uniform(0, 2)])))
    now = float(rng.integers(0, 1440))
    first = now + 1 + float(rng.integers(0, 600))
    times = np.sort(rng.uniform(first, now + params.lifetime - 1, size=int(rng.integers(0, 3))))
    horizon = [(first, int(rng.integers(0, 161)))] + [(float(t), int(rng.integers(0, 161))) for t in times]
    balance = int(rng.integers(1, params.wallet_capacity + 1))
    price = float(rng.uniform(0.01, 0.2))
    return balance, now, horizon, price, params


def test_selling_rule_matches_exhaustive_search():
    rng = np.random.default_rng(7)
    decided = 0
    for _ in range(4000):
        balance, now, horizon, price, params = _random_instance(rng)
        step = params.allocation_interval
        candidates = [now] + [float(t) for t in range(int(now // step + 1) * step, int(horizon[0][0]), step)
                              if t < horizon[0][0]]
        profits = []
        for t in candidates:
            events = math.floor(t / step) - math.floor(now / step)
            held = min(balance + events * params.credits_per_allocation, params.wallet_capacity)
            profits.append(_oracle_profit(held, t, horizon, price, params))
        now_profit, later_best = profits[0], max(profits[1:], default=-math.inf)
        if abs(now_profit - later_best) < 1e-9 or abs(now_profit - params.profit_threshold) < 1e-9:
            continue
        expected = now_profit > later_best and now_profit > params.profit_threshold
        assert should_sell(balance, now, horizon, price, params) == expected, (balance, now, horizon)
        decided += 1
    assert decided >= 1000


def test_deferring_never_pays_with_fees_and_an_underfunded_trip():
    rng = np.random.default_rng(8)
    params = TcsParams(fees=FeeSchedule(buy_rate=0.05, sell_rate=0.05))
    for _ in range(500):
        now = float(rng.integers(0, 1440))
        horizon = [(now + 200.0 + float(rng.integers(0, 400)), int(rng.integers(30, 60)))]
        balance = int(rng.integers(1, 72))
        if horizon[0][1] < predicted_balances(now, horizon, params)[0]:
            continue
        now_profit = _oracle_profit(balance, now, horizon, 0.1, params)
        for t in range(int(now // 20 + 1) * 20, int(horizon[0][0]), 20):
            held = min(balance + (t // 20 - int(now // 20)), params.wallet_capacity)
            assert _oracle_profit(held, float(t), horizon, 0.1, params) <= now_profit + 1e-12


# -- sales and prices -------------------------------------------------------

def test_sell_all_revenue():
    account = account_with(72)
    market = MarketState(price=0.041)
    transaction = sell_all(account, market, FeeSchedule(), 600.0)
    assert account.cash == pytest.approx(2.952)
    assert (transaction.amount, transaction.fee, account.balance) == (72, 0.0, 0)
    assert market.sold_today == 72

    fees = FeeSchedule(sell_rate=0.1, sell_fixed=0.05)
    assert sell_revenue(10, 0.1, fees) == pytest.approx(10 * 0.1 * 0.9 - 0.05)
    assert sell_revenue(1, 0.01, FeeSchedule(sell_fixed=0.05)) < 0
    assert buy_cost(3, 0.1, FeeSchedule()) == pytest.approx(0.3)
    with pytest.raises(MarketError):
        sell_all(account, market, FeeSchedule(), 610.0)


@pytest.mark.parametrize('price, excess, expected', [
    (0.1, 0, 0.1),
    (0.1, -1000, 0.09),
    (0.001, -1000, 0.0),
])
def test_price_update(price, excess, expected):
    market = MarketState(price=price, step=1e-5, sold_today=max(-excess, 0), bought_today=max(excess, 0))
    assert update_price(market) == pytest.approx(expected, abs=1e-12)
    assert (market.bought_today, market.sold_today, market.day) == (0, 0, 2)


def test_price_replay_of_a_short_log():
    prices = replay_prices(0.1, [100, -100, 0], 1e-4)
    assert prices[1:] == pytest.approx([0.11, 0.10, 0.10], abs=1e-12)
    market = MarketState(price=0.1, step=1e-4)
    replayed = []
    for z in (100, -100, 0):
        market.bought_today, market.sold_today = max(z, 0), max(-z, 0)
        replayed.append(update_price(market))
    assert replayed == prices[1:]


def test_allocation_events_count_grid_instants():
    assert allocation_events(0.0, 20.0, 20) == 1
    assert allocation_events(0.0, 19.9, 20) == 0
    assert allocation_events(5.0, 65.0, 20) == 3
    assert allocation_events(30.0, 30.0, 20) == 0


# -- clock instants -----------------------------------------------------------

def _market(toll, n=2, horizon=None):
    market = CreditMarket(PARAMS, toll, n, horizon)
    market.grant_initial(day=1)
    return market


def test_idle_off_grid_tick_has_no_transactions():
    market = _market(flat_toll(), horizon=lambda traveler, now: [])
    assert market.tick(7.0) == []


def test_charge_precedes_sale_at_the_same_instant():
    horizon = lambda traveler, now: [(now + 100.0, 40)]
    market = _market(flat_toll(), n=1, horizon=horizon)
    transactions = market.tick(2.5, departures=[(0, 2.5, 5000.0)])
    kinds = [t.kind for t in transactions]
    assert kinds == [TransactionKind.USE, TransactionKind.SELL]
    # the two tokens born at -1440 and -1420 are dead by minute 2.5
    assert market.accounts[0].expired == 2
    assert transactions[1].amount == 70 - 5


def test_allocation_instant_checks_every_traveler():
    horizon = lambda traveler, now: [(now + 100.0, 40)]
    market = _market(flat_toll(), n=3, horizon=horizon)
    transactions = market.tick(480.0)
    kinds = [t.kind for t in transactions]
    assert kinds[:3] == [TransactionKind.ALLOCATION] * 3
    assert kinds[3:] == [TransactionKind.SELL] * 3


def test_zero_toll_market_only_allocates():
    market = _market(TollProfile.zeros(), horizon=lambda traveler, now: [(now + 100.0, 60)])
    assert not market.trading
    transactions = market.tick(480.0, departures=[(0, 480.0, 5000.0)])
    assert [t.kind for t in transactions] == [TransactionKind.ALLOCATION] * 2


def test_day_of_ticks_keeps_the_ledger_consistent():
    horizon = lambda traveler, now: [(now + 300.0, 40 + traveler)]
    market = _market(flat_toll(0.004), n=4, horizon=horizon)
    rng = np.random.default_rng(1)
    for step in range(0, 1440 * 12, 1):
        minute = step * 5.0 / 60.0
        departures = [(int(t), minute, 5000.0) for t in range(4) if rng.random() < 0.002]
        market.tick(minute, departures)
        if market.is_allocation_instant(minute):
            assert all(a.counters_balance() for a in market.accounts)
            assert all(a.balance <= a.capacity for a in market.accounts)
    assert all(0.0 <= t.time < 1440.0 for t in market.transactions)
    regulator = market.regulator
    assert regulator.issued == sum(a.allocated for a in market.accounts)
    assert regulator.collected == sum(a.used for a in market.accounts)
    assert regulator.repurchased == sum(a.sold for a in market.accounts)
    excess, price = market.end_day()
    assert excess == sum(a.bought for a in market.accounts) - sum(a.sold for a in market.accounts)
    assert price == pytest.approx(max(0.1 + 1e-5 * excess, 0.0))
    assert market.transactions == []

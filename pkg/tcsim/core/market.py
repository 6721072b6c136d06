"""This module implements the tradable credit market.

Credits are indivisible tokens allocated to every traveler at a fixed rate,
expiring after their lifetime. Travelers pay trip tolls in credits, buy any
shortfall from the regulator and sell their whole account when the selling
rule says so. The credit price is adjusted between days from the net excess
consumption.

All market times are absolute minutes since the start of day 1, so tokens
keep their age across midnight.

Usage example:

  market = CreditMarket(config.tcs, toll, n_travelers=len(population))
  market.grant_initial(day=1)
  transactions = market.tick(480.0, departures=[(traveler, 480.0, 4200.0)])
  market.end_day()
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path as FilePath
from typing import Callable, Deque, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..config.settings import MINUTES_PER_DAY, TOLL_BIN_MINUTES, FeeSchedule, TcsParams
from .errors import MarketError
from .types import REGULATOR_ID, Transaction, TransactionKind

logger = logging.getLogger(__name__)

N_TOLL_BINS = MINUTES_PER_DAY // TOLL_BIN_MINUTES

# (predicted departure in absolute minutes, predicted charge in credits)
HorizonTrip = Tuple[float, int]
HorizonProvider = Callable[[int, float], Sequence[HorizonTrip]]


@dataclass(frozen=True)
class Credit:
    """A token born at an allocation instant.

    Attributes:
        birth: Allocation instant, absolute minutes.
        lifetime: Minutes the token stays valid.
    """

    birth: int
    lifetime: int

    @property
    def expiry(self) -> int:
        """Last instant the token is alive."""
        return self.birth + self.lifetime

    def alive(self, now: float) -> bool:
        return now <= self.expiry


@dataclass
class CreditAccount:
    """A traveler's credit account.

    Tokens are kept oldest first; consumption, expiry and truncation all act
    on the oldest tokens.

    Attributes:
        owner: Traveler id.
        capacity: W, the largest balance the account can hold.
        active: Alive tokens, age-ordered.
        allocated, expired, used, bought, sold: Lifetime counters in credits;
            `used` includes credits bought for immediate use.
        cash: Money received from sales minus money paid for purchases, $.
        last_predicted_profit: Selling profit of the most recent check, $.
        history: Transactions of the current day.
    """

    owner: int
    capacity: int
    active: Deque[Credit] = field(default_factory=deque)
    allocated: int = 0
    expired: int = 0
    used: int = 0
    bought: int = 0
    sold: int = 0
    cash: float = 0.0
    last_predicted_profit: Optional[float] = None
    history: List[Transaction] = field(default_factory=list, repr=False)

    @property
    def balance(self) -> int:
        return len(self.active)

    @property
    def is_full(self) -> bool:
        return self.balance >= self.capacity

    def counters_balance(self) -> bool:
        """allocated + bought == active + expired + used + sold."""
        return self.allocated + self.bought == self.balance + self.expired + self.used + self.sold

    def expire(self, now: float) -> int:
        count = 0
        while self.active and not self.active[0].alive(now):
            self.active.popleft()
            count += 1
        self.expired += count
        return count

    def receive(self, credits: Iterable[Credit]) -> None:
        """Adds tokens, then drops the oldest beyond capacity."""
        for credit in credits:
            self.active.append(credit)
            self.allocated += 1
        while len(self.active) > self.capacity:
            self.active.popleft()
            self.expired += 1

    def take(self, amount: int) -> None:
        """Removes the `amount` oldest tokens."""
        if amount > self.balance:
            raise MarketError(f"account {self.owner} holds {self.balance} credits, {amount} requested")
        for _ in range(amount):
            self.active.popleft()


@dataclass
class Regulator:
    """Counterparty of every buy and sell; issues all credits.

    Attributes:
        issued: Credits allocated to travelers.
        collected: Credits received as trip tolls.
        sold: Credits sold to travelers short of credits.
        repurchased: Credits bought back from selling travelers.
        revenue: Money received for sold credits including fees, $.
        payments: Money paid out to selling travelers, net of fees, $.
    """

    issued: int = 0
    collected: int = 0
    sold: int = 0
    repurchased: int = 0
    revenue: float = 0.0
    payments: float = 0.0

    @property
    def net_revenue(self) -> float:
        return self.revenue - self.payments


@dataclass
class MarketState:
    """Day-level market state.

    Attributes:
        day: Current day, 1-based.
        price: p_d, $ per credit.
        step: k, price change per credit of excess consumption.
        bought_today: Credits bought on the current day.
        sold_today: Credits sold on the current day.
    """

    day: int = 1
    price: float = 0.1
    step: float = 1e-5
    bought_today: int = 0
    sold_today: int = 0

    @property
    def excess(self) -> int:
        """Z_d: bought minus sold."""
        return self.bought_today - self.sold_today


class TollProfile:
    """Step toll in credits per meter, one value per 5-minute bin of the day."""

    def __init__(self, values: Sequence[float]):
        values = np.asarray(values, dtype=float)
        if values.shape != (N_TOLL_BINS,):
            raise MarketError(f"a toll profile has {N_TOLL_BINS} bins, got {values.size}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise MarketError("toll values must be finite and >= 0")
        self.values = values

    @classmethod
    def zeros(cls) -> 'TollProfile':
        return cls(np.zeros(N_TOLL_BINS))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values > 0)

    def rate(self, minute: float) -> float:
        """g(t) in credits per meter; minutes past the day use the last bin."""
        index = min(max(int(minute // TOLL_BIN_MINUTES), 0), N_TOLL_BINS - 1)
        return float(self.values[index])

    def charge(self, minute: float, distance: float, cap: int) -> int:
        """Credits charged for a trip departing at `minute`, capped per trip."""
        raw = self.rate(minute) * distance
        if raw <= 0:
            return 0
        return min(int(math.ceil(raw - 1e-9)), cap)

    def to_csv(self, path: FilePath) -> None:
        frame = pd.DataFrame({'bin_start': np.arange(N_TOLL_BINS) * TOLL_BIN_MINUTES,
                              'credits_per_meter': self.values})
        frame.to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: FilePath) -> 'TollProfile':
        """Reads a profile written by to_csv.

        Raises:
          MarketError: wrong columns or bin count.
        """
        frame = pd.read_csv(path)
        if 'credits_per_meter' not in frame.columns:
            raise MarketError(f"toll file {path} lacks a credits_per_meter column")
        if 'bin_start' in frame.columns:
            frame = frame.sort_values('bin_start')
        return cls(frame['credits_per_meter'].to_numpy())


def sell_revenue(amount: int, price: float, fees: FeeSchedule) -> float:
    """S(x): money received for selling x credits."""
    return amount * price * (1.0 - fees.sell_rate) - fees.sell_fixed


def buy_cost(amount: int, price: float, fees: FeeSchedule) -> float:
    """B(x): money paid for buying x credits."""
    return amount * price * (1.0 + fees.buy_rate) + fees.buy_fixed


def allocation_events(start: float, end: float, interval: int) -> int:
    """Allocation instants in the half-open interval (start, end]."""
    if end <= start:
        return 0
    return int(math.floor(end / interval) - math.floor(start / interval))


def _record(account: CreditAccount, transaction: Transaction,
            log: Optional[List[Transaction]]) -> Transaction:
    account.history.append(transaction)
    if log is not None:
        log.append(transaction)
    return transaction


def allocate(accounts: Sequence[CreditAccount], now: int, params: TcsParams, day: int,
             price: float, regulator: Optional[Regulator] = None,
             log: Optional[List[Transaction]] = None) -> List[Transaction]:
    """Expires old tokens, then hands out one allocation to every account.

    Args:
      accounts: all accounts.
      now: allocation instant, absolute minutes, on the allocation grid.
      params: scheme parameters.
      day: current day for the records.
      price: current price for the records.
      regulator: ledger to update, if any.
      log: transaction list to append to, if any.
    """
    if now % params.allocation_interval:
        raise MarketError(f"minute {now} is not an allocation instant")
    per = params.credits_per_allocation
    minute = now - (day - 1) * MINUTES_PER_DAY
    transactions = []
    for account in accounts:
        account.expire(now)
        account.receive(Credit(birth=now, lifetime=params.lifetime) for _ in range(per))
        transactions.append(_record(account, Transaction(
            kind=TransactionKind.ALLOCATION, buyer=account.owner, seller=REGULATOR_ID,
            amount=per, time=minute, day=day, price=price), log))
    if regulator is not None:
        regulator.issued += per * len(accounts)
    return transactions


def grant_initial(account: CreditAccount, params: TcsParams, start: int = 0) -> int:
    """Gives an account its initial credits, backdated onto the allocation grid.

    Token j is born `(1 + j // per)` allocation intervals before `start`, so
    the initial wallet ages like one filled by regular allocations.

    Returns:
      The number of credits granted.
    """
    per = params.credits_per_allocation
    amount = min(params.initial_allocation, account.capacity)
    births = [start - params.allocation_interval * (1 + j // per) for j in range(amount)]
    account.receive(Credit(birth=b, lifetime=params.lifetime) for b in sorted(births))
    return amount


@dataclass(frozen=True)
class ChargeResult:
    """Outcome of charging one trip."""

    charged: int
    bought: int
    transactions: Tuple[Transaction, ...]


def charge_trip(account: CreditAccount, market: MarketState, toll: TollProfile, t_dep: float,
                distance: float, params: TcsParams, regulator: Optional[Regulator] = None,
                log: Optional[List[Transaction]] = None) -> ChargeResult:
    """Charges the toll of a trip departing at minute-of-day `t_dep`.

    With enough credits the oldest tokens are used; otherwise the shortfall
    is bought from the regulator and the account is emptied.
    """
    charged = toll.charge(t_dep, distance, params.max_credits_per_trip)
    if charged == 0:
        return ChargeResult(charged=0, bought=0, transactions=())

    transactions = []
    bought = 0
    if account.balance < charged:
        bought = charged - account.balance
        cost = buy_cost(bought, market.price, params.fees)
        fee = cost - bought * market.price
        account.bought += bought
        account.cash -= cost
        market.bought_today += bought
        if regulator is not None:
            regulator.sold += bought
            regulator.revenue += cost
        transactions.append(_record(account, Transaction(
            kind=TransactionKind.BUY, buyer=account.owner, seller=REGULATOR_ID, amount=bought,
            time=t_dep, day=market.day, price=market.price, fee=fee), log))

    account.take(charged - bought)
    account.used += charged
    if regulator is not None:
        regulator.collected += charged
    transactions.append(_record(account, Transaction(
        kind=TransactionKind.USE, buyer=REGULATOR_ID, seller=account.owner, amount=charged,
        time=t_dep, day=market.day, price=market.price), log))
    return ChargeResult(charged=charged, bought=bought, transactions=tuple(transactions))


def predicted_balances(now: float, horizon: Sequence[HorizonTrip], params: TcsParams) -> List[int]:
    """Expected balance at each upcoming departure if the account is emptied now.

    Credits arrive with the allocation events between departures, each trip
    spends its predicted charge and the balance never exceeds W.
    """
    per = params.credits_per_allocation
    capacity = params.wallet_capacity
    balances = []
    previous_time, carry = now, 0
    for time, credits in horizon:
        arrived = allocation_events(previous_time, time, params.allocation_interval) * per
        balance = min(carry + arrived, capacity)
        balances.append(balance)
        carry = max(balance - credits, 0)
        previous_time = time
    return balances


def selling_profit(balance: int, now: float, horizon: Sequence[HorizonTrip], price: float,
                   params: TcsParams) -> float:
    """Expected profit of selling the whole account now.

    Revenue of the sale minus the cost of buying what the upcoming trips
    will then lack.
    """
    profit = sell_revenue(balance, price, params.fees)
    for (_, credits), expected in zip(horizon, predicted_balances(now, horizon, params)):
        if credits > expected:
            profit -= buy_cost(credits - expected, price, params.fees)
    return profit


def should_sell(balance: int, now: float, horizon: Sequence[HorizonTrip], price: float,
                params: TcsParams, threshold: Optional[float] = None) -> bool:
    """Whether selling all credits now beats waiting.

    Sell when the expected profit clears the threshold and either the wallet
    is full or some upcoming trip will have to buy credits anyway.
    """
    if balance == 0:
        return False
    threshold = params.profit_threshold if threshold is None else threshold
    if selling_profit(balance, now, horizon, price, params) <= threshold:
        return False
    if balance >= params.wallet_capacity:
        return True
    expected = predicted_balances(now, horizon, params)
    return any(credits >= x for (_, credits), x in zip(horizon, expected))


def sell_all(account: CreditAccount, market: MarketState, fees: FeeSchedule, now: float,
             regulator: Optional[Regulator] = None,
             log: Optional[List[Transaction]] = None) -> Transaction:
    """Sells every credit of the account to the regulator.

    Raises:
      MarketError: the account is empty.
    """
    amount = account.balance
    if amount == 0:
        raise MarketError(f"account {account.owner} has no credits to sell")
    revenue = sell_revenue(amount, market.price, fees)
    account.take(amount)
    account.sold += amount
    account.cash += revenue
    market.sold_today += amount
    if regulator is not None:
        regulator.repurchased += amount
        regulator.payments += revenue
    return _record(account, Transaction(
        kind=TransactionKind.SELL, buyer=REGULATOR_ID, seller=account.owner, amount=amount,
        time=now, day=market.day, price=market.price, fee=amount * market.price - revenue), log)


def update_price(market: MarketState) -> float:
    """Moves to the next day's price and resets the daily counters."""
    market.price = max(market.price + market.step * market.excess, 0.0)
    market.bought_today = 0
    market.sold_today = 0
    market.day += 1
    return market.price


class CreditMarket:
    """All accounts, the regulator and the day state of one experiment.

    Attributes:
        params: scheme parameters.
        toll: toll profile in force.
        accounts: one account per traveler, indexed by traveler id.
        regulator: regulator ledger.
        state: day state and price.
        transactions: log of the current day.
        horizon: callback giving a traveler's upcoming (departure, charge)
            pairs at an absolute minute; no selling checks without it.
    """

    def __init__(self, params: TcsParams, toll: TollProfile, n_travelers: int,
                 horizon: Optional[HorizonProvider] = None):
        self.params = params
        self.toll = toll
        self.accounts = [CreditAccount(owner=i, capacity=params.wallet_capacity) for i in range(n_travelers)]
        self.regulator = Regulator()
        self.state = MarketState(day=1, price=params.initial_price, step=params.price_step)
        self.transactions: List[Transaction] = []
        self.horizon = horizon
        self.full_wallet_sells = 0

    @property
    def trading(self) -> bool:
        """Selling is only meaningful when credits have a use."""
        return self.horizon is not None and not self.toll.is_zero

    def grant_initial(self, day: int = 1) -> None:
        start = (day - 1) * MINUTES_PER_DAY
        for account in self.accounts:
            amount = grant_initial(account, self.params, start)
            if amount == 0:
                continue
            self.regulator.issued += amount
            self.transactions.append(_record(account, Transaction(
                kind=TransactionKind.ALLOCATION, buyer=account.owner, seller=REGULATOR_ID,
                amount=amount, time=0.0, day=day, price=self.state.price), None))

    def absolute(self, minute: float, day: Optional[int] = None) -> float:
        day = self.state.day if day is None else day
        return (day - 1) * MINUTES_PER_DAY + minute

    def is_allocation_instant(self, minute: float) -> bool:
        return minute < MINUTES_PER_DAY and float(minute).is_integer() \
            and int(minute) % self.params.allocation_interval == 0

    def check_sell(self, traveler: int, minute: float) -> Optional[Transaction]:
        """Runs the selling rule for one traveler at a minute of the current day."""
        account = self.accounts[traveler]
        now = self.absolute(minute)
        account.expire(now)
        if account.balance == 0:
            return None
        horizon = [(max(t, now), g) for t, g in self.horizon(traveler, now)]
        account.last_predicted_profit = selling_profit(account.balance, now, horizon,
                                                       self.state.price, self.params)
        if not should_sell(account.balance, now, horizon, self.state.price, self.params):
            return None
        if account.is_full:
            self.full_wallet_sells += 1
        transaction = sell_all(account, self.state, self.params.fees, minute, self.regulator,
                               self.transactions)
        logger.debug(f"Traveler {traveler} sold {transaction.amount} credits at {minute:.0f}")
        return transaction

    def tick(self, minute: float, departures: Sequence[Tuple[int, float, float]] = ()) -> List[Transaction]:
        """Runs the market events of one clock instant of the current day.

        Allocation comes first (on the allocation grid), then the charges of
        the departures at this instant, then the selling checks: every
        traveler at an allocation instant, otherwise the departed ones.

        Args:
          minute: minute of the current day.
          departures: (traveler, departure minute, path distance in meters).
        """
        start = len(self.transactions)
        allocation = self.is_allocation_instant(minute)
        if allocation:
            allocate(self.accounts, int(self.absolute(minute)), self.params, self.state.day,
                     self.state.price, self.regulator, self.transactions)
        for traveler, t_dep, distance in departures:
            self.accounts[traveler].expire(self.absolute(t_dep))
            charge_trip(self.accounts[traveler], self.state, self.toll, t_dep, distance,
                        self.params, self.regulator, self.transactions)
        if self.trading:
            if allocation:
                checks = [(traveler, minute) for traveler in range(len(self.accounts))]
            else:
                checks = sorted({traveler: t_dep for traveler, t_dep, _ in departures}.items())
            for traveler, at in checks:
                self.check_sell(traveler, at)
        return self.transactions[start:]

    def end_day(self) -> Tuple[int, float]:
        """Closes the day: applies the price update and clears daily logs.

        Returns:
          (Z_d, next day's price).
        """
        excess = self.state.excess
        price = update_price(self.state)
        self.transactions = []
        self.full_wallet_sells = 0
        for account in self.accounts:
            account.history = []
        logger.debug(f"Price update: Z={excess}, next price {price:.6f}")
        return excess, price

"""This module computes the outcome measures of simulated days: welfare
relative to the no-toll reference, travel time index, schedule delay costs,
departure rates and credit market statistics."""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config.settings import MINUTES_PER_DAY, TOLL_BIN_MINUTES, ChoiceParams
from .choice import cost_coefficient
from .errors import MetricsError
from .types import Transaction, TransactionKind, Traveler, TripRecord

logger = logging.getLogger(__name__)

REPORT_BIN_MINUTES = 30


def _bins(minutes: Sequence[float], width: float) -> np.ndarray:
    n_bins = int(MINUTES_PER_DAY // width)
    return np.clip((np.asarray(minutes, dtype=float) // width).astype(int), 0, n_bins - 1)


def _binned_mean(values: Sequence[float], minutes: Sequence[float], width: float,
                 weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Weighted mean of `values` per time bin, NaN for empty bins."""
    n_bins = int(MINUTES_PER_DAY // width)
    if len(values) == 0:
        return np.full(n_bins, np.nan)
    index = _bins(minutes, width)
    weights = np.ones(len(values)) if weights is None else np.asarray(weights, dtype=float)
    totals = np.bincount(index, weights=weights * np.asarray(values, dtype=float), minlength=n_bins)
    mass = np.bincount(index, weights=weights, minlength=n_bins)
    with np.errstate(invalid='ignore', divide='ignore'):
        return np.where(mass > 0, totals / np.where(mass > 0, mass, 1.0), np.nan)


def net_utilities(records: Sequence[TripRecord], population: Sequence[Traveler],
                  params: ChoiceParams) -> np.ndarray:
    """Per-traveler experienced utility with the toll expenditure added back.

    Credits are a transfer between travelers and the regulator, so the toll
    term is removed before comparing with the reference.
    """
    totals = np.zeros(len(population))
    for record in records:
        traveler = population[record.traveler]
        toll_money = record.charged_credits * record.price
        totals[record.traveler] += record.utility - cost_coefficient(traveler, params) * toll_money
    return totals


def _cost_scales(population: Sequence[Traveler], params: ChoiceParams) -> np.ndarray:
    return np.array([abs(cost_coefficient(t, params)) for t in population])


def welfare_gain(utilities: np.ndarray, reference: np.ndarray, population: Sequence[Traveler],
                 params: ChoiceParams) -> Tuple[float, float]:
    """Money-metric welfare change of net utilities against a reference.

    Returns:
      (total $, $ per capita).

    Raises:
      MetricsError: the arrays do not cover the same population.
    """
    if utilities.shape != reference.shape or len(utilities) != len(population):
        raise MetricsError("welfare needs the same population in both runs")
    total = float(np.sum((utilities - reference) / _cost_scales(population, params)))
    return total, total / len(population)


def social_welfare(records: Sequence[TripRecord], base_records: Sequence[TripRecord],
                   population: Sequence[Traveler], params: ChoiceParams) -> Tuple[float, float]:
    """Welfare of a tolled day relative to a matched no-toll day.

    Raises:
      MetricsError: the two record sets do not cover the same travelers.
    """
    ids = {r.traveler for r in records}
    if ids != {r.traveler for r in base_records} or not ids <= set(range(len(population))):
        raise MetricsError("tolled and reference runs cover different travelers")
    return welfare_gain(net_utilities(records, population, params),
                        net_utilities(base_records, population, params), population, params)


def weighted_tti(records: Sequence[TripRecord], bin_minutes: float = TOLL_BIN_MINUTES) -> np.ndarray:
    """Distance-weighted ratio of travel time to free-flow time per departure bin.

    Bin b holds departures in [b * bin_minutes, (b + 1) * bin_minutes), the
    same binning as the toll profile and departure_rates.
    """
    return _binned_mean([r.travel_time / r.free_flow_time for r in records],
                        [r.departure for r in records], bin_minutes,
                        weights=[r.distance for r in records])


def departure_rates(records: Sequence[TripRecord], bin_minutes: float = TOLL_BIN_MINUTES) -> np.ndarray:
    """Departures per bin."""
    n_bins = int(MINUTES_PER_DAY // bin_minutes)
    if not records:
        return np.zeros(n_bins)
    return np.bincount(_bins([r.departure for r in records], bin_minutes),
                       minlength=n_bins).astype(float)


def schedule_delay_costs(records: Sequence[TripRecord], population: Sequence[Traveler],
                         bin_minutes: float = REPORT_BIN_MINUTES) -> Tuple[np.ndarray, np.ndarray]:
    """Mean early and late schedule delay cost per trip, by preferred-arrival bin, $."""
    early = [population[r.traveler].sde_rate * r.schedule_delay_early for r in records]
    late = [population[r.traveler].sdl_rate * r.schedule_delay_late for r in records]
    preferred = [r.preferred_arrival for r in records]
    return _binned_mean(early, preferred, bin_minutes), _binned_mean(late, preferred, bin_minutes)


@dataclass(frozen=True)
class TransactionStats:
    """Trade counts of a transaction log.

    Attributes:
        sells: Sell transactions.
        buys: Buy transactions.
        sold_credits: Credits sold to the regulator.
        bought_credits: Credits bought from the regulator.
        traded_credits: sold_credits + bought_credits.
        buyback: Travelers who sold and later bought on the same day.
    """

    sells: int = 0
    buys: int = 0
    sold_credits: int = 0
    bought_credits: int = 0
    traded_credits: int = 0
    buyback: int = 0


def transaction_stats(transactions: Sequence[Transaction]) -> TransactionStats:
    """Counts trades; the log must be in execution order."""
    sells = buys = sold = bought = 0
    sold_before = set()
    buyback = set()
    for t in transactions:
        if t.kind == TransactionKind.SELL:
            sells += 1
            sold += t.amount
            sold_before.add((t.day, t.seller))
        elif t.kind == TransactionKind.BUY:
            buys += 1
            bought += t.amount
            if (t.day, t.buyer) in sold_before:
                buyback.add(t.buyer)
    return TransactionStats(sells=sells, buys=buys, sold_credits=sold, bought_credits=bought,
                            traded_credits=sold + bought, buyback=len(buyback))


def mean_sell_amount(transactions: Sequence[Transaction],
                     bin_minutes: float = REPORT_BIN_MINUTES) -> np.ndarray:
    """Mean credits per sell transaction by time-of-day bin."""
    sells = [t for t in transactions if t.kind == TransactionKind.SELL]
    return _binned_mean([t.amount for t in sells], [t.time for t in sells], bin_minutes)


@dataclass
class DayMetrics:
    """Outcome measures of one simulated day.

    Series are numpy arrays over time-of-day bins (5 minutes unless noted);
    bins without observations hold NaN.
    """

    day: int
    price: float
    inconsistency: float
    utility_per_capita: float
    welfare_per_capita: Optional[float]
    bought: int
    sold: int
    excess: int
    stats: TransactionStats
    full_wallet_sells: int
    mean_travel_time: float
    tti: np.ndarray = field(repr=False)
    accumulation: np.ndarray = field(repr=False)
    departure_rate: np.ndarray = field(repr=False)
    early_cost: np.ndarray = field(repr=False)
    late_cost: np.ndarray = field(repr=False)
    sell_amount: np.ndarray = field(repr=False)

    @property
    def peak_tti(self) -> float:
        return float(np.nanmax(self.tti)) if np.any(np.isfinite(self.tti)) else 1.0

    @property
    def peak_accumulation(self) -> float:
        return float(np.max(self.accumulation))

    def row(self) -> Dict[str, float]:
        """Scalar columns of the per-day metrics table."""
        row = {
            'day': self.day,
            'price': self.price,
            'inconsistency': self.inconsistency,
            'utility_per_capita': self.utility_per_capita,
            'welfare_per_capita': self.welfare_per_capita,
            'bought': self.bought,
            'sold': self.sold,
            'excess': self.excess,
            'full_wallet_sells': self.full_wallet_sells,
            'mean_travel_time': self.mean_travel_time,
            'peak_tti': self.peak_tti,
            'peak_accumulation': self.peak_accumulation,
        }
        row.update({k: v for k, v in asdict(self.stats).items() if k not in ('sold_credits', 'bought_credits')})
        return row


def day_metrics(day: int, price: float, inconsistency: float, records: Sequence[TripRecord],
                transactions: Sequence[Transaction], accumulation: np.ndarray,
                population: Sequence[Traveler], params: ChoiceParams,
                reference: Optional[np.ndarray] = None, full_wallet_sells: int = 0) -> DayMetrics:
    """Computes every per-day measure from a day's logs."""
    if not records:
        raise MetricsError(f"day {day} has no trip records")
    stats = transaction_stats(transactions)
    welfare = None
    if reference is not None:
        _, welfare = welfare_gain(net_utilities(records, population, params), reference,
                                  population, params)
    early, late = schedule_delay_costs(records, population)
    return DayMetrics(
        day=day,
        price=price,
        inconsistency=inconsistency,
        utility_per_capita=float(sum(r.utility for r in records) / len(population)),
        welfare_per_capita=welfare,
        bought=stats.bought_credits,
        sold=stats.sold_credits,
        excess=stats.bought_credits - stats.sold_credits,
        stats=stats,
        full_wallet_sells=full_wallet_sells,
        mean_travel_time=float(np.mean([r.travel_time for r in records])),
        tti=weighted_tti(records),
        accumulation=np.asarray(accumulation, dtype=float),
        departure_rate=departure_rates(records),
        early_cost=early,
        late_cost=late,
        sell_amount=mean_sell_amount(transactions)
    )


def mean_with_ci(series: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Bin-wise mean over days and the 95% confidence half-width.

    Each bin uses the days that observed it; bins never observed are NaN.
    """
    stacked = np.vstack([np.asarray(s, dtype=float) for s in series])
    observed = np.isfinite(stacked)
    count = observed.sum(axis=0)
    filled = np.where(observed, stacked, 0.0)
    mean = np.where(count > 0, filled.sum(axis=0) / np.maximum(count, 1), np.nan)
    squares = np.where(observed, (filled - np.nan_to_num(mean)) ** 2, 0.0).sum(axis=0)
    variance = np.where(count > 1, squares / np.maximum(count - 1, 1), 0.0)
    half = 1.96 * np.sqrt(variance / np.maximum(count, 1))
    return mean, half


def _json_series(values: np.ndarray) -> List[Optional[float]]:
    return [round(float(v), 6) if np.isfinite(v) else None for v in values]


def window_summary(metrics: Sequence[DayMetrics], window: int) -> Dict[str, object]:
    """Averages of the last `window` days, as reported in run summaries."""
    if not metrics:
        raise MetricsError("no days to summarize")
    last = list(metrics)[-window:]
    summary: Dict[str, object] = {
        'days_averaged': len(last),
        'price': float(np.mean([m.price for m in last])),
        'inconsistency': float(np.mean([m.inconsistency for m in last])),
        'utility_per_capita': float(np.mean([m.utility_per_capita for m in last])),
        'sells': float(np.mean([m.stats.sells for m in last])),
        'buys': float(np.mean([m.stats.buys for m in last])),
        'traded_credits': float(np.mean([m.stats.traded_credits for m in last])),
        'buyback': float(np.mean([m.stats.buyback for m in last])),
        'peak_tti': float(np.mean([m.peak_tti for m in last])),
        'peak_accumulation': float(np.mean([m.peak_accumulation for m in last])),
    }
    welfare = [m.welfare_per_capita for m in last if m.welfare_per_capita is not None]
    summary['welfare_per_capita'] = float(np.mean(welfare)) if welfare else None
    for name in ('tti', 'accumulation', 'departure_rate'):
        mean, half = mean_with_ci([getattr(m, name) for m in last])
        summary[f'{name}_series'] = {'mean': _json_series(mean), 'ci95': _json_series(half)}
    return summary

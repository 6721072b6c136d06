"""This module sets the configuration for a credit scheme experiment.

A scenario is a JSON document with one nested section per component. Missing
keys fall back to the defaults below and unknown keys are rejected.

Usage example:

  config = load_scenario(Path('scenarios/desk.json'))
  config = config.with_overrides(seed=7, days=10)
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from ..core.errors import ScenarioError

MINUTES_PER_DAY = 1440
TOLL_BIN_MINUTES = 5
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ScenarioError(message)


def _build(cls, data: Optional[Dict[str, Any]], section: str):
    """Instantiates a section dataclass, rejecting unknown keys."""
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ScenarioError(f"unknown key(s) in section '{section}': {', '.join(unknown)}")
    for f in fields(cls):
        value = data.get(f.name)
        if isinstance(value, list):
            data[f.name] = tuple(value)
    return cls(**data)


@dataclass(frozen=True)
class FeeSchedule:
    """Transaction fees levied by the regulator.

    Attributes:
        buy_fixed: f_b, fixed fee per buy, $.
        sell_fixed: f_s, fixed fee per sell, $.
        buy_rate: f̂_b, proportional buy fee.
        sell_rate: f̂_s, proportional sell fee, must stay below 1.
    """

    buy_fixed: float = 0.0
    sell_fixed: float = 0.0
    buy_rate: float = 0.0
    sell_rate: float = 0.0

    def validate(self) -> None:
        for name in ('buy_fixed', 'sell_fixed', 'buy_rate', 'sell_rate'):
            _require(getattr(self, name) >= 0, f"fees.{name} must be >= 0")
        _require(self.sell_rate < 1, "fees.sell_rate must be < 1")


@dataclass(frozen=True)
class TcsParams:
    """Credit scheme design: allocation, credit lifetime, price dynamics and fees."""

    allocation_rate: float = 1.0 / 20.0
    allocation_interval: int = 20
    lifetime: int = 1420
    initial_price: float = 0.1
    initial_allocation: int = 72
    max_credits_per_trip: int = 160
    price_step: float = 1e-5
    fees: FeeSchedule = field(default_factory=FeeSchedule)
    profit_threshold: float = 0.0

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> 'TcsParams':
        data = dict(data or {})
        fees = _build(FeeSchedule, data.pop('fees', None), 'tcs.fees')
        params = _build(cls, data, 'tcs')
        return replace(params, fees=fees)

    @property
    def credits_per_allocation(self) -> int:
        """Whole tokens handed out at every allocation instant."""
        return int(round(self.allocation_rate * self.allocation_interval))

    @property
    def wallet_capacity(self) -> int:
        """W: tokens alive from birth through birth + lifetime inclusive."""
        return (self.lifetime // self.allocation_interval + 1) * self.credits_per_allocation

    def validate(self) -> None:
        _require(self.allocation_rate > 0, "tcs.allocation_rate must be > 0")
        _require(self.allocation_interval > 0, "tcs.allocation_interval must be > 0")
        per_event = self.allocation_rate * self.allocation_interval
        _require(per_event >= 1 - 1e-9 and abs(per_event - round(per_event)) < 1e-9,
                 "tcs.allocation_rate * allocation_interval must be a positive integer")
        _require(self.lifetime > 0 and self.lifetime % self.allocation_interval == 0,
                 "tcs.lifetime must be a positive multiple of allocation_interval")
        _require(MINUTES_PER_DAY % self.allocation_interval == 0,
                 "tcs.allocation_interval must divide the day")
        for name in ('initial_price', 'price_step', 'profit_threshold'):
            _require(getattr(self, name) >= 0, f"tcs.{name} must be >= 0")
        _require(self.initial_allocation >= 0, "tcs.initial_allocation must be >= 0")
        _require(self.max_credits_per_trip >= 0, "tcs.max_credits_per_trip must be >= 0")
        self.fees.validate()


@dataclass(frozen=True)
class ChoiceParams:
    """Coefficients of the departure-time and route logit.

    Distances enter the utility in kilometers, times in minutes.
    """

    beta_tt: float = -0.03
    beta_length: float = -0.05
    beta_path_size: float = 1.0
    beta_signals: float = -0.02
    beta_highway_dist: float = 0.01
    beta_min_tt: float = 0.1
    beta_min_dist: float = 0.1
    beta_min_signals: float = 0.1
    beta_max_highway: float = 0.1
    eta: int = 6
    interval: float = 5.0
    max_paths: int = 8
    paths_per_method: int = 4

    def validate(self) -> None:
        _require(self.eta >= 1, "choice.eta must be >= 1")
        _require(self.interval > 0, "choice.interval must be > 0")
        _require(self.beta_tt < 0, "choice.beta_tt must be < 0")
        _require(self.max_paths >= 1, "choice.max_paths must be >= 1")
        _require(self.paths_per_method >= 1, "choice.paths_per_method must be >= 1")


@dataclass(frozen=True)
class SupplyParams:
    """Mesoscopic supply settings."""

    tick: float = 5.0
    alpha: float = 2.0
    beta: float = 2.0
    min_speed: float = 5.0
    bin_minutes: int = TOLL_BIN_MINUTES

    def validate(self) -> None:
        _require(self.tick > 0, "supply.tick must be > 0")
        _require(self.min_speed > 0, "supply.min_speed must be > 0")
        _require(self.alpha > 0 and self.beta > 0, "supply.alpha and supply.beta must be > 0")
        _require(self.bin_minutes > 0 and MINUTES_PER_DAY % self.bin_minutes == 0,
                 "supply.bin_minutes must divide the day")


@dataclass(frozen=True)
class LearningParams:
    """Day-to-day learning settings."""

    rate: float = 0.2
    max_days: int = 25
    stability_window: int = 10
    stability_tolerance: float = 0.05

    def validate(self) -> None:
        _require(0 < self.rate <= 1, "learning.rate must lie in (0, 1]")
        _require(self.max_days >= 1, "learning.max_days must be >= 1")
        _require(self.stability_window >= 1, "learning.stability_window must be >= 1")
        _require(self.stability_tolerance > 0, "learning.stability_tolerance must be > 0")


@dataclass(frozen=True)
class BoParams:
    """Bayesian-optimization settings.

    The search box is given per dimension as (low, high): amplitude in credits
    per meter, peak time in minutes of day, spread in minutes.
    """

    rho: float = 2.0
    iterations: int = 30
    initial_design: int = 6
    amplitude_box: Tuple[float, float] = (0.0, 0.04)
    mean_box: Tuple[float, float] = (360.0, 720.0)
    std_box: Tuple[float, float] = (15.0, 120.0)
    averaging_window: int = 10
    acquisition_samples: int = 4096
    signal_variance: float = 1.0
    length_scale: float = 0.3
    noise_variance: float = 1e-4
    refine_hyperparameters: bool = False

    @property
    def box(self) -> Tuple[Tuple[float, float], ...]:
        return (tuple(self.amplitude_box), tuple(self.mean_box), tuple(self.std_box))

    def validate(self) -> None:
        _require(self.rho >= 0, "bo.rho must be >= 0")
        _require(self.iterations >= 1, "bo.iterations must be >= 1")
        _require(self.initial_design >= 1, "bo.initial_design must be >= 1")
        _require(self.averaging_window >= 1, "bo.averaging_window must be >= 1")
        _require(self.acquisition_samples >= 1, "bo.acquisition_samples must be >= 1")
        _require(self.signal_variance > 0, "bo.signal_variance must be > 0")
        _require(self.length_scale > 0, "bo.length_scale must be > 0")
        _require(self.noise_variance >= 0, "bo.noise_variance must be >= 0")
        for name, (low, high) in zip(('amplitude_box', 'mean_box', 'std_box'), self.box):
            _require(low <= high, f"bo.{name} must have low <= high")
        _require(self.amplitude_box[0] >= 0, "bo.amplitude_box must be non-negative")
        _require(self.std_box[0] > 0, "bo.std_box must be positive")
        _require(0 <= self.mean_box[0] and self.mean_box[1] < MINUTES_PER_DAY,
                 "bo.mean_box must lie within the day")


@dataclass(frozen=True)
class NetworkParams:
    """Synthetic grid settings; `file` replaces the grid with a segment CSV."""

    rows: int = 6
    cols: int = 6
    length_range: Tuple[float, float] = (400.0, 900.0)
    arterial_speed: float = 50.0
    highway_speed: float = 80.0
    lane_capacity_range: Tuple[float, float] = (250.0, 400.0)
    kjam: float = 120.0
    highway_every: int = 3
    signal_probability: float = 0.6
    file: Optional[str] = None

    def validate(self) -> None:
        _require(self.rows >= 2 and self.cols >= 2, "network.rows and network.cols must be >= 2")
        _require(0 < self.length_range[0] <= self.length_range[1], "network.length_range invalid")
        _require(0 < self.lane_capacity_range[0] <= self.lane_capacity_range[1],
                 "network.lane_capacity_range invalid")
        _require(self.arterial_speed > 0 and self.highway_speed > 0, "network speeds must be > 0")
        _require(self.kjam > 0, "network.kjam must be > 0")
        _require(self.highway_every >= 1, "network.highway_every must be >= 1")
        _require(0 <= self.signal_probability <= 1, "network.signal_probability must lie in [0, 1]")


@dataclass(frozen=True)
class PopulationParams:
    """Population synthesis settings; `file` loads a saved population instead."""

    vot_mean_per_hour: float = 13.0
    vot_cv: float = 0.5
    sde_ratio: Tuple[float, float, float] = (0.1, 0.5, 1.0)
    sdl_ratio: Tuple[float, float, float] = (1.0, 2.0, 4.0)
    morning_peak: Tuple[float, float] = (510.0, 40.0)
    evening_peak: Tuple[float, float] = (1080.0, 60.0)
    purpose_mix: Tuple[float, float, float] = (0.85, 0.10, 0.05)
    trips_per_person: Tuple[float, float, float] = (0.5, 0.4, 0.1)
    file: Optional[str] = None

    def validate(self) -> None:
        _require(self.vot_mean_per_hour > 0, "population.vot_mean_per_hour must be > 0")
        _require(self.vot_cv > 0, "population.vot_cv must be > 0")
        for name in ('sde_ratio', 'sdl_ratio'):
            low, mode, high = getattr(self, name)
            _require(0 < low <= mode <= high and low < high,
                     f"population.{name} must satisfy 0 < min <= mode <= max")
        _require(self.sde_ratio[0] < 1 < self.sdl_ratio[2],
                 "population ratios must admit sde < vot < sdl")
        for name in ('purpose_mix', 'trips_per_person'):
            weights = getattr(self, name)
            _require(all(w >= 0 for w in weights) and abs(sum(weights) - 1) < 1e-9,
                     f"population.{name} must be a probability vector")
        _require(self.morning_peak[1] > 0 and self.evening_peak[1] > 0,
                 "population peak spreads must be > 0")


@dataclass(frozen=True)
class ScenarioConfig:
    """A complete experiment: all component parameters plus run settings."""

    tcs: TcsParams = field(default_factory=TcsParams)
    choice: ChoiceParams = field(default_factory=ChoiceParams)
    supply: SupplyParams = field(default_factory=SupplyParams)
    learning: LearningParams = field(default_factory=LearningParams)
    bo: BoParams = field(default_factory=BoParams)
    network: NetworkParams = field(default_factory=NetworkParams)
    population: PopulationParams = field(default_factory=PopulationParams)
    days: int = 25
    seed: int = 2024
    population_size: int = 2000
    debug: bool = False
    base_dir: Optional[str] = field(default=None, compare=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ScenarioConfig':
        """Create a validated configuration from a parsed scenario document."""
        if not isinstance(data, dict):
            raise ScenarioError("scenario document must be an object")
        data = dict(data)
        sections = {
            'tcs': TcsParams.from_dict(data.pop('tcs', None)),
            'choice': _build(ChoiceParams, data.pop('choice', None), 'choice'),
            'supply': _build(SupplyParams, data.pop('supply', None), 'supply'),
            'learning': _build(LearningParams, data.pop('learning', None), 'learning'),
            'bo': _build(BoParams, data.pop('bo', None), 'bo'),
            'network': _build(NetworkParams, data.pop('network', None), 'network'),
            'population': _build(PopulationParams, data.pop('population', None), 'population'),
        }
        top = _build(cls, data, 'scenario')
        config = replace(top, **sections)
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop('base_dir')
        return data

    def resolve(self, relative: Optional[str]) -> Optional[Path]:
        """Resolves a file reference relative to the scenario file."""
        if relative is None:
            return None
        path = Path(relative)
        if not path.is_absolute() and self.base_dir:
            path = Path(self.base_dir) / path
        return path

    def with_overrides(self, seed: Optional[int] = None, days: Optional[int] = None,
                       threshold: Optional[float] = None,
                       iterations: Optional[int] = None) -> 'ScenarioConfig':
        """Returns a validated copy with command-line overrides applied."""
        config = self
        if seed is not None:
            config = replace(config, seed=seed)
        if days is not None:
            config = replace(config, days=days,
                             learning=replace(config.learning, max_days=days))
        if threshold is not None:
            config = replace(config, tcs=replace(config.tcs, profit_threshold=threshold))
        if iterations is not None:
            config = replace(config, bo=replace(config.bo, iterations=iterations))
        config.validate()
        return config

    def validate(self) -> None:
        _require(self.days >= 1, "days must be >= 1")
        _require(self.population_size >= 1, "population_size must be >= 1")
        _require(0 <= self.seed < 2 ** 64, "seed must be a 64-bit unsigned integer")
        for section in (self.tcs, self.choice, self.supply, self.learning, self.bo,
                        self.network, self.population):
            section.validate()


def load_scenario(path: Path) -> ScenarioConfig:
    """Loads and validates a scenario file.

    Args:
      path: JSON scenario file.

    Raises:
      ScenarioError: the file is malformed or violates an invariant.
      OSError: the file cannot be read.
    """
    path = Path(path)
    with open(path, 'r') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"cannot parse scenario {path}: {e}") from e
    config = ScenarioConfig.from_dict(data)
    return replace(config, base_dir=str(path.parent))


def save_scenario(config: ScenarioConfig, path: Path) -> None:
    """Writes the effective configuration next to the run outputs."""
    with open(path, 'w') as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)


def configure_logging(log_file: Path, debug: bool = False) -> None:
    """Sends the simulator's log records to a fresh log file.

    Args:
      log_file: destination; an existing file is replaced.
      debug: log at DEBUG level instead of INFO.
    """
    log_file = Path(log_file)
    if log_file.exists():
        log_file.unlink()
    log_file.parent.mkdir(parents=True, exist_ok=True)

    root = logging.getLogger('tcsim')
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    handler = logging.FileHandler(str(log_file))
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if debug else logging.INFO)
    root.info("Starting new log session")

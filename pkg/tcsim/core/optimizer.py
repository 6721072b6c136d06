"""This module searches the toll profile with Bayesian optimization.

Tolls are Gaussian curves over the day described by amplitude, peak time and
spread. A Gaussian process with a Matérn 5/2 kernel models the negated,
standardized welfare score on the unit box, and the next toll maximizes the
upper confidence bound -μ + ρσ.

Usage example:

  evaluator = SimulationEvaluator(scenario, network, reference)
  result = bo_loop(evaluator, config.bo, substream(config.seed, 'bo'))
  print(result.best, result.best_score)
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path as FilePath
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.stats import qmc

from ..config.settings import TOLL_BIN_MINUTES, BoParams
from .daytoday import ExperimentResult, run_experiment
from .errors import GPError
from .market import N_TOLL_BINS, TollProfile
from .network import RoadNetwork
from .scenario import Scenario

logger = logging.getLogger(__name__)

# Toll values below this many credits per meter are set to zero.
TOLL_FLOOR = 1e-6
_JITTERS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)
_REFINE_STEPS = (0.05, 0.02, 0.01, 0.005, 0.002)
_LENGTH_SCALE_GRID = (0.1, 0.2, 0.3, 0.5, 0.8)


@dataclass(frozen=True)
class TollParams:
    """Gaussian toll curve.

    Attributes:
        amplitude: Peak toll A_g, credits per meter.
        mean: Peak time μ_g, minutes of day.
        std: Spread σ_g, minutes.
    """

    amplitude: float
    mean: float
    std: float

    def to_vector(self) -> np.ndarray:
        return np.array([self.amplitude, self.mean, self.std], dtype=float)

    @classmethod
    def from_vector(cls, values: Sequence[float]) -> 'TollParams':
        return cls(amplitude=float(values[0]), mean=float(values[1]), std=float(values[2]))

    def to_dict(self) -> dict:
        return {'amplitude': self.amplitude, 'mean': self.mean, 'std': self.std}


def toll_profile(params: TollParams) -> TollProfile:
    """Evaluates the Gaussian curve at every 5-minute bin center."""
    if params.amplitude < 0 or params.std <= 0:
        raise ValueError("toll amplitude must be >= 0 and spread > 0")
    centers = np.arange(N_TOLL_BINS) * TOLL_BIN_MINUTES + TOLL_BIN_MINUTES / 2.0
    values = params.amplitude * np.exp(-(centers - params.mean) ** 2 / (2.0 * params.std ** 2))
    values[values < TOLL_FLOOR] = 0.0
    return TollProfile(values)


def to_unit(x: np.ndarray, box: Sequence[Tuple[float, float]]) -> np.ndarray:
    low, high = np.array(box, dtype=float).T
    width = np.where(high > low, high - low, 1.0)
    return (np.asarray(x, dtype=float) - low) / width


def from_unit(u: np.ndarray, box: Sequence[Tuple[float, float]]) -> np.ndarray:
    low, high = np.array(box, dtype=float).T
    return low + np.asarray(u, dtype=float) * (high - low)


@dataclass(frozen=True)
class GPHyper:
    """Kernel hyperparameters.

    Attributes:
        signal_variance: σ_f².
        length_scales: One length scale per input dimension.
        noise_variance: σ_n².
    """

    signal_variance: float = 1.0
    length_scales: Tuple[float, ...] = (0.3, 0.3, 0.3)
    noise_variance: float = 1e-4

    @classmethod
    def from_bo(cls, params: BoParams, dimensions: int = 3) -> 'GPHyper':
        return cls(signal_variance=params.signal_variance,
                   length_scales=(params.length_scale,) * dimensions,
                   noise_variance=params.noise_variance)


def matern52(x: np.ndarray, x2: np.ndarray, hyper: GPHyper) -> np.ndarray:
    """Matérn 5/2 covariance between the rows of x and x2."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    scales = np.asarray(hyper.length_scales, dtype=float)
    diff = x[:, None, :] / scales - x2[None, :, :] / scales
    d = np.sqrt(np.sum(diff ** 2, axis=-1))
    root5d = math.sqrt(5.0) * d
    return hyper.signal_variance * (1.0 + root5d + 5.0 / 3.0 * d ** 2) * np.exp(-root5d)


class GaussianProcess:
    """Zero-mean GP regression solved through a Cholesky factorization.

    Attributes:
        hyper: kernel hyperparameters.
        x: training inputs, one row per observation.
        y: training targets.
        jitter: diagonal jitter that made the factorization succeed.
    """

    def __init__(self, hyper: GPHyper):
        self.hyper = hyper
        self.x: Optional[np.ndarray] = None
        self.y: Optional[np.ndarray] = None
        self.jitter = 0.0
        self._factor = None
        self._alpha = None

    def fit(self, x: np.ndarray, y: np.ndarray) -> 'GaussianProcess':
        """Conditions the process on observations.

        Raises:
          GPError: no observation, or the kernel matrix stays singular after
            the largest jitter.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if len(y) == 0 or len(x) != len(y):
            raise GPError("a Gaussian process needs matching, non-empty inputs and targets")
        kernel = matern52(x, x, self.hyper)
        identity = np.eye(len(x))
        for jitter in _JITTERS:
            try:
                factor = linalg.cho_factor(kernel + (self.hyper.noise_variance + jitter) * identity,
                                           lower=True)
            except linalg.LinAlgError:
                logger.debug(f"Cholesky failed with jitter {jitter:g}, escalating")
                continue
            self.x, self.y, self.jitter, self._factor = x, y, jitter, factor
            self._alpha = linalg.cho_solve(factor, y)
            return self
        raise GPError(f"kernel matrix of {len(x)} points is not positive definite")

    def posterior(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at the rows of x."""
        if self._factor is None:
            raise GPError("the Gaussian process has not been fitted")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cross = matern52(x, self.x, self.hyper)
        mean = cross @ self._alpha
        solved = linalg.cho_solve(self._factor, cross.T)
        variance = self.hyper.signal_variance - np.sum(cross * solved.T, axis=1)
        return mean, np.maximum(variance, 0.0)

    def log_marginal_likelihood(self) -> float:
        if self._factor is None:
            raise GPError("the Gaussian process has not been fitted")
        lower = self._factor[0]
        return float(-0.5 * self.y @ self._alpha - np.sum(np.log(np.diag(lower)))
                     - 0.5 * len(self.y) * math.log(2.0 * math.pi))


def gp_fit(x: np.ndarray, y: np.ndarray, hyper: GPHyper) -> GaussianProcess:
    return GaussianProcess(hyper).fit(x, y)


def gp_posterior(model: GaussianProcess, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return model.posterior(x)


def refine_length_scale(x: np.ndarray, y: np.ndarray, hyper: GPHyper) -> GPHyper:
    """Picks the shared length scale of the grid with the largest marginal likelihood."""
    best, best_lml = hyper, -math.inf
    for scale in _LENGTH_SCALE_GRID:
        candidate = replace(hyper, length_scales=(scale,) * len(hyper.length_scales))
        try:
            lml = gp_fit(x, y, candidate).log_marginal_likelihood()
        except GPError:
            continue
        if lml > best_lml:
            best, best_lml = candidate, lml
    return best


def ucb(model: GaussianProcess, u: np.ndarray, rho: float) -> np.ndarray:
    """-μ + ρσ of a model fitted to a quantity being minimized."""
    mean, variance = model.posterior(u)
    return -mean + rho * np.sqrt(variance)


def propose_next(model: GaussianProcess, rho: float, box: Sequence[Tuple[float, float]],
                 rng: np.random.Generator, samples: int = 4096) -> Tuple[TollParams, float]:
    """Maximizes the acquisition over the box.

    Random candidates on the unit box are scored and the best one is
    refined by coordinate steps of shrinking size.

    Returns:
      The proposal and its acquisition value.
    """
    dimensions = len(box)
    candidates = rng.random((samples, dimensions))
    scores = ucb(model, candidates, rho)
    index = int(np.argmax(scores))
    best, best_score = candidates[index].copy(), float(scores[index])

    for step in _REFINE_STEPS:
        improved = True
        while improved:
            improved = False
            for dim in range(dimensions):
                for direction in (-1.0, 1.0):
                    trial = best.copy()
                    trial[dim] = min(max(trial[dim] + direction * step, 0.0), 1.0)
                    score = float(ucb(model, trial, rho)[0])
                    if score > best_score + 1e-12:
                        best, best_score, improved = trial, score, True
    return TollParams.from_vector(from_unit(best, box)), best_score


class TollEvaluator(ABC):
    """Scores a toll; higher is better."""

    @abstractmethod
    def evaluate(self, params: TollParams) -> float:
        pass


class FunctionEvaluator(TollEvaluator):
    """Scores tolls with a plain function, e.g. an analytic test objective."""

    def __init__(self, function: Callable[[TollParams], float]):
        self.function = function

    def evaluate(self, params: TollParams) -> float:
        return float(self.function(params))


class SimulationEvaluator(TollEvaluator):
    """Scores a toll by its mean per-capita welfare gain over the last days of a run.

    Every evaluation restarts from free-flow link times and the initial price.
    """

    def __init__(self, scenario: Scenario, network: RoadNetwork, reference: np.ndarray,
                 window: Optional[int] = None,
                 on_result: Optional[Callable[[TollParams, ExperimentResult], None]] = None):
        self.scenario = scenario
        self.network = network
        self.reference = reference
        self.window = window or scenario.config.bo.averaging_window
        self.on_result = on_result

    def evaluate(self, params: TollParams) -> float:
        result = run_experiment(self.scenario, toll_profile(params), self.network, self.reference)
        welfare = [d.metrics.welfare_per_capita for d in result.days[-self.window:]]
        score = float(np.mean(welfare))
        if self.on_result is not None:
            self.on_result(params, result)
        return score


@dataclass
class BoRecord:
    """One evaluated toll.

    Attributes:
        iteration: 0-based evaluation index.
        phase: 'initial' for the space-filling design, 'ucb' afterwards.
        params: The toll evaluated.
        score: Its welfare score.
        incumbent: Best score so far.
        acquisition: Acquisition value at proposal time, None for the design.
    """

    iteration: int
    phase: str
    params: TollParams
    score: float
    incumbent: float
    acquisition: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            'iteration': self.iteration,
            'phase': self.phase,
            'amplitude': self.params.amplitude,
            'mean': self.params.mean,
            'std': self.params.std,
            'score': self.score,
            'incumbent': self.incumbent,
            'acquisition': self.acquisition
        }


@dataclass
class BoResult:
    best: TollParams
    best_score: float
    history: List[BoRecord] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict() for r in self.history])

    def save(self, path: FilePath) -> None:
        self.to_frame().to_csv(path, index=False)


def initial_design(n: int, dimensions: int, rng: np.random.Generator) -> np.ndarray:
    """First n points of a scrambled Sobol sequence on the unit box."""
    sampler = qmc.Sobol(d=dimensions, scramble=True, seed=rng)
    return sampler.random_base2(m=max(0, math.ceil(math.log2(n))))[:n]


def _standardize(scores: Sequence[float]) -> np.ndarray:
    y = -np.asarray(scores, dtype=float)
    spread = float(np.std(y))
    return (y - np.mean(y)) / (spread if spread > 0 else 1.0)


def bo_loop(evaluator: TollEvaluator, params: BoParams, rng: np.random.Generator,
            on_record: Optional[Callable[[BoRecord], None]] = None) -> BoResult:
    """Evaluates a space-filling design, then `iterations` UCB proposals.

    Args:
      evaluator: scores a toll.
      params: optimizer settings; `box` bounds the search.
      rng: optimizer substream.
      on_record: called after every evaluation.
    """
    box = params.box
    hyper = GPHyper.from_bo(params, len(box))
    inputs: List[np.ndarray] = []
    scores: List[float] = []
    history: List[BoRecord] = []

    def record(u: np.ndarray, phase: str, acquisition: Optional[float]) -> None:
        toll = TollParams.from_vector(from_unit(u, box))
        score = evaluator.evaluate(toll)
        inputs.append(np.asarray(u, dtype=float))
        scores.append(score)
        entry = BoRecord(iteration=len(history), phase=phase, params=toll, score=score,
                         incumbent=max(scores), acquisition=acquisition)
        history.append(entry)
        logger.info(f"BO {entry.iteration} ({phase}): A={toll.amplitude:.5f} mu={toll.mean:.1f} "
                    f"sigma={toll.std:.1f} score={score:.5f} best={entry.incumbent:.5f}")
        if on_record is not None:
            on_record(entry)

    for u in initial_design(params.initial_design, len(box), rng):
        record(u, 'initial', None)

    for _ in range(params.iterations):
        x, y = np.vstack(inputs), _standardize(scores)
        if params.refine_hyperparameters:
            hyper = refine_length_scale(x, y, hyper)
        model = gp_fit(x, y, hyper)
        proposal, acquisition = propose_next(model, params.rho, box, rng, params.acquisition_samples)
        record(to_unit(proposal.to_vector(), box), 'ucb', acquisition)

    best = int(np.argmax(scores))
    return BoResult(best=history[best].params, best_score=scores[best], history=history)

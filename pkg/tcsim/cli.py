"""Command-line interface of the credit scheme simulator.

Modes:
  base     no-toll run
  toll     run under a fixed toll (Gaussian parameters or a profile file)
  bo       Bayesian optimization of the toll, the no-toll reference first
  compare  summary table of completed run directories

Usage example:

  python run.py base --scenario scenarios/desk.json --out runs/base
  python run.py toll --params 0.0194,8:59,72 --threshold 1 --out runs/toll
  python run.py compare runs/base runs/toll
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from . import __version__
from .config.settings import ScenarioConfig, configure_logging, load_scenario, save_scenario
from .core.daytoday import DayResult, ExperimentResult, run_experiment
from .core.errors import ScenarioError, TcsimError
from .core.market import TollProfile
from .core.metrics import window_summary
from .core.network import RoadNetwork, load_choice_sets, save_choice_sets
from .core.optimizer import SimulationEvaluator, TollParams, bo_loop, toll_profile
from .core.scenario import Scenario, build_scenario, save_network, save_population, substream

logger = logging.getLogger(__name__)

console = Console()

MODES = ('base', 'toll', 'bo', 'compare')
CHOICE_CACHE = 'choice_sets.json'


def parse_minutes(text: str) -> float:
    """Minutes of day from '539' or '8:59'."""
    text = text.strip()
    if ':' in text:
        hours, minutes = text.split(':', 1)
        return int(hours) * 60 + float(minutes)
    return float(text)


def parse_toll_params(text: str) -> TollParams:
    """Parses 'A,μ,σ' with μ in minutes or HH:MM.

    Raises:
      ScenarioError: malformed triple.
    """
    parts = text.split(',')
    if len(parts) != 3:
        raise ScenarioError(f"--params expects A,mu,sigma, got '{text}'")
    try:
        params = TollParams(amplitude=float(parts[0]), mean=parse_minutes(parts[1]), std=float(parts[2]))
    except ValueError as e:
        raise ScenarioError(f"--params expects numbers, got '{text}'") from e
    if params.amplitude < 0 or params.std <= 0 or not 0 <= params.mean < 1440:
        raise ScenarioError("--params needs A >= 0, 0 <= mu < 1440 and sigma > 0")
    return params


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='tcsim', description='Tradable credit scheme simulator')
    parser.add_argument('command', choices=MODES, help='Run mode')
    parser.add_argument('runs', nargs='*', help='Run directories to compare (compare mode)')
    parser.add_argument('--scenario', help='Scenario JSON file (defaults apply when omitted)')
    parser.add_argument('--out', default='runs/latest', help='Output directory (default: runs/latest)')
    parser.add_argument('--seed', type=int, help='Override the scenario seed')
    parser.add_argument('--days', type=int, help='Override the number of simulated days')
    parser.add_argument('--toll-file', help='Toll profile CSV (toll mode)')
    parser.add_argument('--params', help='Gaussian toll A,mu,sigma; mu in minutes or HH:MM (toll mode)')
    parser.add_argument('--threshold', type=float, help='Profit threshold for selling, $')
    parser.add_argument('--iterations', type=int, help='BO iterations after the initial design')
    parser.add_argument('--replications', type=int, default=1,
                        help='Independent runs with seeds seed, seed+1, ... (default: 1)')
    parser.add_argument('--emit-transactions', action='store_true', help='Write transactions.csv')
    parser.add_argument('--debug', action='store_true', help='Log at DEBUG level')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    return parser


@dataclass(frozen=True)
class RunCommand:
    """A validated run request."""

    mode: str
    config: ScenarioConfig
    out: Path
    toll_params: Optional[TollParams] = None
    toll_file: Optional[Path] = None
    replications: int = 1
    emit_transactions: bool = False
    debug: bool = False
    quiet: bool = False

    def toll(self) -> TollProfile:
        if self.toll_file is not None:
            return TollProfile.from_csv(self.toll_file)
        return toll_profile(self.toll_params)


def command_from_args(args: argparse.Namespace) -> RunCommand:
    """Validates arguments and loads the scenario.

    Raises:
      ScenarioError: inconsistent arguments or invalid scenario.
    """
    if args.replications < 1:
        raise ScenarioError("--replications must be >= 1")
    toll_params = parse_toll_params(args.params) if args.params else None
    toll_file = Path(args.toll_file) if args.toll_file else None
    if args.command == 'toll' and (toll_params is None) == (toll_file is None):
        raise ScenarioError("toll mode needs exactly one of --params and --toll-file")
    config = load_scenario(Path(args.scenario)) if args.scenario else ScenarioConfig()
    config = config.with_overrides(seed=args.seed, days=args.days, threshold=args.threshold,
                                   iterations=args.iterations)
    return RunCommand(mode=args.command, config=config, out=Path(args.out), toll_params=toll_params,
                      toll_file=toll_file, replications=args.replications,
                      emit_transactions=args.emit_transactions, debug=args.debug or config.debug)


def _prepare_network(scenario: Scenario, out: Path) -> RoadNetwork:
    network = RoadNetwork(scenario.network)
    cached = load_choice_sets(network, out / CHOICE_CACHE)
    if cached:
        network.preload(cached)
        logger.info(f"Loaded {len(cached)} cached choice sets")
    return network


def _progress(quiet: bool, label: str):
    def report(day: DayResult) -> None:
        if not quiet:
            console.print(f"[cyan]{label} day {day.day:>2}[/] price [yellow]{day.price:.5f}[/] "
                          f"inconsistency [yellow]{day.inconsistency:.4f}[/] "
                          f"bought {day.metrics.bought} sold {day.metrics.sold}")
    return report


def _run_summary(command: RunCommand, result: ExperimentResult,
                 tariff: Optional[TollParams]) -> Dict[str, Any]:
    config = command.config
    summary = {
        'mode': command.mode,
        'seed': config.seed,
        'days': len(result.days),
        'population': config.population_size,
        'profit_threshold': config.tcs.profit_threshold,
        'tariff': tariff.to_dict() if tariff else None,
        'stable': result.stable,
        'stability_ratio': result.stability_ratio if np.isfinite(result.stability_ratio) else None,
        'final_price': result.market.state.price,
        'regulator': {**asdict(result.market.regulator), 'net_revenue': result.market.regulator.net_revenue},
    }
    summary['window'] = window_summary(result.metrics, config.bo.averaging_window)
    return summary


def write_run(out: Path, command: RunCommand, scenario: Scenario, result: ExperimentResult,
              toll: TollProfile, tariff: Optional[TollParams] = None) -> Dict[str, Any]:
    """Writes the files of one experiment into `out` and returns its summary."""
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([d.metrics.row() for d in result.days]).to_csv(out / 'metrics.csv', index=False)

    trips = [{'day': d.day, **r.to_dict()} for d in result.days for r in d.records]
    pd.DataFrame(trips).to_csv(out / 'trips.csv', index=False)
    if command.emit_transactions:
        rows = [t.to_dict() for d in result.days for t in d.transactions]
        pd.DataFrame(rows, columns=['day', 'time', 'kind', 'buyer', 'seller', 'amount', 'price', 'fee']) \
            .to_csv(out / 'transactions.csv', index=False)

    toll.to_csv(out / 'toll_profile.csv')
    result.table.to_frame().to_csv(out / 'link_times.csv', index=False)
    segment_ids = [s.id for s in scenario.network.segments]
    queues = [{'day': d.day, 'segment': s, 'peak_queue_m': float(q)}
              for d in result.days for s, q in zip(segment_ids, d.peak_queues)]
    pd.DataFrame(queues, columns=['day', 'segment', 'peak_queue_m']).to_csv(out / 'queue_lengths.csv', index=False)
    save_population(scenario.population, out / 'population.json')
    save_network(scenario.network, out / 'network.csv')
    save_scenario(command.config, out / 'scenario.json')

    summary = _run_summary(command, result, tariff)
    with open(out / 'summary.json', 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


def _write_info(out: Path, command: RunCommand, started: datetime) -> None:
    info = {
        'version': __version__,
        'mode': command.mode,
        'started': started.isoformat(timespec='seconds'),
        'finished': datetime.now().isoformat(timespec='seconds'),
    }
    with open(out / 'run_info.json', 'w') as f:
        json.dump(info, f, indent=2)


def execute(command: RunCommand) -> Dict[str, Any]:
    """Runs one base, toll or bo command and writes its outputs."""
    started = datetime.now()
    out = command.out
    out.mkdir(parents=True, exist_ok=True)
    configure_logging(out / 'run_log.txt', command.debug)
    logger.info(f"Running {command.mode} with seed {command.config.seed}")

    scenario = build_scenario(command.config)
    network = _prepare_network(scenario, out)
    zero = TollProfile.zeros()

    if command.mode == 'base':
        result = run_experiment(scenario, zero, network, keep_transactions=command.emit_transactions,
                                on_day=_progress(command.quiet, 'base'))
        summary = write_run(out, command, scenario, result, zero)
    else:
        base = run_experiment(scenario, zero, network, keep_transactions=command.emit_transactions,
                              on_day=_progress(command.quiet, 'base'))
        write_run(out / 'base', command, scenario, base, zero)
        reference = base.reference(command.config.bo.averaging_window, scenario.population, command.config)

        if command.mode == 'toll':
            toll = command.toll()
            result = run_experiment(scenario, toll, network, reference,
                                    keep_transactions=command.emit_transactions,
                                    on_day=_progress(command.quiet, 'toll'))
            summary = write_run(out, command, scenario, result, toll, command.toll_params)
        else:
            summary = _optimize(command, scenario, network, reference)

    save_choice_sets(network, out / CHOICE_CACHE)
    _write_info(out, command, started)
    return summary


def _optimize(command: RunCommand, scenario: Scenario, network: RoadNetwork,
              reference: np.ndarray) -> Dict[str, Any]:
    config = command.config
    best: Dict[str, Any] = {}

    def keep_best(params: TollParams, result: ExperimentResult) -> None:
        score = float(np.mean([d.metrics.welfare_per_capita for d in result.days[-config.bo.averaging_window:]]))
        if not best or score > best['score']:
            best.update(score=score, params=params, result=result)

    def report(record) -> None:
        if not command.quiet:
            console.print(f"[cyan]BO {record.iteration:>2} ({record.phase})[/] "
                          f"A={record.params.amplitude:.5f} mu={record.params.mean:.1f} "
                          f"sigma={record.params.std:.1f} score [yellow]{record.score:.4f}[/] "
                          f"best [green]{record.incumbent:.4f}[/]")

    evaluator = SimulationEvaluator(scenario, network, reference, on_result=keep_best)
    outcome = bo_loop(evaluator, config.bo, substream(config.seed, 'bo'), on_record=report)
    outcome.save(command.out / 'bo_history.csv')

    # Loop evaluations keep no transaction logs.
    result = best['result']
    if command.emit_transactions:
        result = run_experiment(scenario, toll_profile(outcome.best), network, reference,
                                keep_transactions=True)
    summary = write_run(command.out, command, scenario, result, toll_profile(outcome.best), outcome.best)
    summary['bo'] = {'best_score': outcome.best_score, 'evaluations': len(outcome.history)}
    with open(command.out / 'summary.json', 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


def _replicate(command: RunCommand) -> Dict[str, Any]:
    return execute(command)


def _numeric_leaves(summary: Dict[str, Any], prefix: str = '') -> Dict[str, float]:
    leaves = {}
    for key, value in summary.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            leaves.update(_numeric_leaves(value, f"{name}."))
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            leaves[name] = float(value)
    return leaves


def replicate(command: RunCommand) -> Dict[str, Any]:
    """Runs independent replications in parallel and summarizes them."""
    commands = [
        RunCommand(mode=command.mode, config=command.config.with_overrides(seed=command.config.seed + i),
                   out=command.out / f"rep{i + 1}", toll_params=command.toll_params,
                   toll_file=command.toll_file, emit_transactions=command.emit_transactions,
                   debug=command.debug, quiet=True)
        for i in range(command.replications)
    ]
    console.print(f"[cyan]Running {len(commands)} replications...[/]")
    with ProcessPoolExecutor(max_workers=len(commands)) as pool:
        summaries = list(pool.map(_replicate, commands))

    leaves = [_numeric_leaves({'window': s['window'], 'final_price': s['final_price']}) for s in summaries]
    keys = sorted(set.intersection(*(set(l) for l in leaves)))
    aggregate = {key: {'mean': float(np.mean([l[key] for l in leaves])),
                       'std': float(np.std([l[key] for l in leaves], ddof=1)) if len(leaves) > 1 else 0.0}
                 for key in keys}
    summary = {'mode': command.mode, 'replications': len(commands),
               'seeds': [c.config.seed for c in commands], 'metrics': aggregate}
    command.out.mkdir(parents=True, exist_ok=True)
    with open(command.out / 'summary.json', 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)

    table = Table(title='Replications (mean ± std)')
    table.add_column('Metric', style='cyan')
    table.add_column('Value', justify='right')
    for key in ('window.welfare_per_capita', 'window.sells', 'window.buys', 'window.traded_credits',
                'window.buyback', 'window.price', 'window.peak_tti'):
        if key in aggregate:
            table.add_row(key.split('.', 1)[1], f"{aggregate[key]['mean']:.4f} ± {aggregate[key]['std']:.4f}")
    console.print(table)
    return summary


_COMPARE_ROWS = (
    ('Profit threshold ($)', lambda s: s['profit_threshold']),
    ('Sell transactions / day', lambda s: s['window']['sells']),
    ('Buy transactions / day', lambda s: s['window']['buys']),
    ('Traded credits / day', lambda s: s['window']['traded_credits']),
    ('Travelers with buyback / day', lambda s: s['window']['buyback']),
    ('Welfare gain ($/capita)', lambda s: s['window']['welfare_per_capita']),
    ('Credit price ($)', lambda s: s['window']['price']),
    ('Peak TTI', lambda s: s['window']['peak_tti']),
    ('Tariff (mu, sigma, A)', lambda s: _tariff(s['tariff'])),
)


def _tariff(tariff: Optional[Dict[str, float]]) -> str:
    if not tariff:
        return '-'
    hours, minutes = divmod(int(round(tariff['mean'])), 60)
    return f"({hours}:{minutes:02d}, {tariff['std']:.0f}, {tariff['amplitude']:.4f})"


def _format(value: Any) -> str:
    if value is None:
        return '-'
    if isinstance(value, float):
        return f"{value:.4f}" if abs(value) < 1000 else f"{value:,.0f}"
    return str(value)


def compare(runs: Sequence[str], out: Optional[Path] = None) -> Dict[str, Any]:
    """Prints a side-by-side summary of completed run directories.

    Raises:
      ScenarioError: fewer than two directories or a missing summary.
    """
    if len(runs) < 2:
        raise ScenarioError("compare needs at least two run directories")
    summaries = {}
    for run in runs:
        path = Path(run) / 'summary.json'
        if not path.exists():
            raise ScenarioError(f"{path} not found; is {run} a completed run?")
        with open(path, 'r') as f:
            summaries[run] = json.load(f)
        if 'window' not in summaries[run]:
            raise ScenarioError(f"{path} is a replication summary; compare single runs")

    table = Table(title='Run comparison')
    table.add_column('', style='cyan')
    for run in runs:
        table.add_column(Path(run).name, justify='right')
    rows = {}
    for label, getter in _COMPARE_ROWS:
        values = [getter(summaries[run]) for run in runs]
        rows[label] = values
        table.add_row(label, *(_format(v) for v in values))
    console.print(table)

    comparison = {'runs': list(runs), 'rows': rows}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / 'comparison.json', 'w') as f:
            json.dump(comparison, f, indent=2)
    return comparison


def main(argv: Optional[List[str]] = None) -> int:
    """Runs the command line; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == 'compare':
            compare(args.runs, Path(args.out) if args.out != parser.get_default('out') else None)
            return 0
        if args.runs:
            raise ScenarioError(f"unexpected arguments: {' '.join(args.runs)}")
        command = command_from_args(args)
        console.print(Panel.fit(f"[bold cyan]tcsim {__version__}[/] - {command.mode} run, "
                                f"seed {command.config.seed}, {command.config.population_size} travelers"))
        if command.replications > 1:
            replicate(command)
        else:
            summary = execute(command)
            window = summary['window']
            welfare = window.get('welfare_per_capita')
            console.print(f"[bold green]Done.[/] Results in [yellow]{command.out}[/]"
                          + (f", welfare gain [green]${welfare:.4f}[/]/capita" if welfare is not None else ''))
        return 0
    except (TcsimError, OSError, ValueError) as e:
        console.print(f"[bold red]Error:[/] {e}", soft_wrap=True)
        return 1

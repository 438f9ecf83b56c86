#!/usr/bin/env python3
"""
Storm restoration experiment harness

Command-line pipeline: generate hazard scenarios, simulate single episodes
with a full trace, train the recurrent dispatcher, evaluate dispatchers over
scenario batches, and aggregate results into median [IQR] reports.
"""

import argparse
import hashlib
import json
import logging
import sys
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from baselines import make_dispatcher
from env import EnvConfig, EpisodeMetrics, RestorationEnv, replay_ens, run_episode
from errors import ConfigurationError, RestorationError
from feeder import FeederModel, RoadGraph, load_feeder, load_roads
from hazard import (
    HazardScenario,
    ScenarioConfig,
    generate_scenario,
    load_scenario,
    load_scenario_config,
    save_scenario,
)
from policy import PolicyDispatcher, RecurrentDispatchPolicy, SlateConfig, load_checkpoint
from results_store import push_results
from settings import configure_logging, max_workers
from trainer import fan_out, load_training_setup, train

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.yaml"
MANIFEST_FORMAT_VERSION = 1
PERCENTILE_METHOD = "linear"
DISPATCHERS = ("drl", "greedy_value", "travel_aware", "oracle")
REPORT_METRICS = (
    ("ens_mwh", "ENS (MWh)", 1),
    ("critical_t95_min", "Crit. t95 (min)", 0),
    ("travel_km", "Travel (km)", 0),
    ("decision_ms_median", "Decision (ms)", 1),
    ("replans", "Replans", 0),
)
AUDIT_RTOL = 1e-9


# ---------------------------------------------------------------------------
# Run configuration and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """One evaluation or simulation run"""
    scenario_config: Optional[str] = None
    scenario_dir: Optional[str] = None
    feeder: Optional[str] = None
    dispatcher: str = "greedy_value"
    checkpoint: Optional[str] = None
    n_crews: Optional[int] = None
    seeds: Tuple[int, ...] = ()
    out_dir: str = "results"
    horizon_h: Optional[float] = None
    oracle_fallback: Optional[str] = None
    workers: Optional[int] = None
    train_config: Optional[str] = None

    def validate(self, feeder: Optional[FeederModel] = None) -> None:
        if self.dispatcher not in DISPATCHERS:
            raise ConfigurationError(f"unknown dispatcher '{self.dispatcher}'; choose from {', '.join(DISPATCHERS)}")
        if self.dispatcher == "drl" and not self.checkpoint:
            raise ConfigurationError("the drl dispatcher needs --checkpoint")
        if not self.scenario_config and not self.scenario_dir:
            raise ConfigurationError("either a scenario config or a scenario directory is required")
        if self.horizon_h is not None and self.horizon_h <= 0:
            raise ConfigurationError("horizon must be positive")
        if feeder is not None and self.n_crews is not None and feeder.supported_crew_counts \
                and self.n_crews not in feeder.supported_crew_counts:
            raise ConfigurationError(
                f"{self.n_crews} crews not supported on {feeder.name}; "
                f"choose from {', '.join(str(k) for k in feeder.supported_crew_counts)}"
            )

    def crews_for(self, feeder: FeederModel) -> int:
        if self.n_crews is not None:
            return self.n_crews
        return min(feeder.supported_crew_counts) if feeder.supported_crew_counts else 3

    @property
    def method(self) -> str:
        return self.dispatcher


@dataclass
class MetricsReport:
    """Per-method median and [25th, 75th] percentiles"""
    methods: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    percentile_method: str = PERCENTILE_METHOD

    def to_dict(self) -> Dict[str, Any]:
        return {
            'percentile_method': self.percentile_method,
            'methods': self.methods,
        }

    def render_table(self) -> str:
        """Human table, one row per method, cells as 'median [p25–p75]'"""
        header = ["Method", "Scenarios"] + [label for _, label, _ in REPORT_METRICS] + ["Violations"]
        lines = [" | ".join(header)]
        for method, summary in self.methods.items():
            cells = [method, str(summary['scenarios'])]
            for key, _, digits in REPORT_METRICS:
                stats = summary[key]
                cells.append(format_median_iqr(stats['median'], stats['p25'], stats['p75'], digits))
            cells.append(str(summary['violations']))
            lines.append(" | ".join(cells))
        lines.append(f"Values: median [25th–75th pct], {self.percentile_method} interpolation")
        return "\n".join(lines)


def median_iqr(values: Sequence[float]) -> Dict[str, float]:
    array = np.asarray(values, dtype=float)
    p25, median, p75 = np.percentile(array, [25, 50, 75], method=PERCENTILE_METHOD)
    return {'median': float(median), 'p25': float(p25), 'p75': float(p75)}


def format_median_iqr(median: float, p25: float, p75: float, digits: int = 0) -> str:
    """'28 [22–37]'"""
    return f"{median:.{digits}f} [{p25:.{digits}f}–{p75:.{digits}f}]"


def aggregate(rows) -> MetricsReport:
    """Median and IQR per method over per-episode rows"""
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    report = MetricsReport()
    if frame.empty:
        return report
    if 'method' not in frame.columns:
        frame = frame.assign(method="unnamed")
    for method, group in frame.groupby('method', sort=True):
        summary: Dict[str, Any] = {'scenarios': int(len(group))}
        for key, _, _ in REPORT_METRICS:
            summary[key] = median_iqr(group[key].astype(float))
        summary['violations'] = int(group['violations'].sum()) if 'violations' in group else 0
        report.methods[str(method)] = summary
    return report


def config_hash(path) -> str:
    with open(path, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def scenario_file(seed: int) -> str:
    return f"scenario_{seed:06d}.yaml"


def _read_manifest(directory: Path) -> Dict[str, Any]:
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise ConfigurationError(f"no {MANIFEST_NAME} in scenario directory {directory}")
    with open(path, 'r') as f:
        manifest = yaml.safe_load(f) or {}
    if manifest.get('format_version') != MANIFEST_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported manifest format_version {manifest.get('format_version')!r}")
    return manifest


def _checkpoint_env_config(path: str, payload: Mapping[str, Any], feeder: FeederModel) -> EnvConfig:
    """Dynamics and reward the checkpoint was trained under"""
    extra = payload.get('extra', {})
    trained_on = extra.get('feeder')
    if trained_on is not None and trained_on != feeder.name:
        raise ConfigurationError(f"checkpoint {path} was trained on {trained_on}, not {feeder.name}")
    if extra.get('env_config') is None:
        logger.warning(f"⚠️  Checkpoint {path} does not record its env config; evaluating under defaults")
        return EnvConfig()
    return EnvConfig.from_saved(extra['env_config'])


@dataclass
class Workspace:
    """Everything a run needs: scenario source, network models and env config"""
    run: RunConfig
    scenario_config: ScenarioConfig
    feeder: FeederModel
    roads: RoadGraph
    env_config: EnvConfig
    scenario_dir: Optional[Path] = None
    checkpoint: Optional[Tuple[RecurrentDispatchPolicy, SlateConfig, Dict[str, Any]]] = None

    @classmethod
    def build(cls, run: RunConfig) -> "Workspace":
        scenario_dir = Path(run.scenario_dir) if run.scenario_dir else None
        config_path = run.scenario_config
        if scenario_dir is not None and not config_path:
            manifest = _read_manifest(scenario_dir)
            config_path = manifest['config']
            if not Path(config_path).exists():
                raise ConfigurationError(f"scenario config {config_path} named in the manifest does not exist")
            if config_hash(config_path) != manifest['config_sha256']:
                logger.warning(f"⚠️  {config_path} changed since the scenarios in {scenario_dir} were generated")
        scenario_config = load_scenario_config(config_path)
        if run.feeder:
            scenario_config = replace(scenario_config, feeder=run.feeder)

        feeder = load_feeder(scenario_config.feeder_path())
        roads = load_roads(scenario_config.roads_path(), feeder)
        run.validate(feeder)
        priors = {name: prior.median_h for name, prior in scenario_config.repair_priors.items()}

        checkpoint = None
        if run.dispatcher == "drl":
            checkpoint = load_checkpoint(run.checkpoint)
            base = _checkpoint_env_config(run.checkpoint, checkpoint[2], feeder)
        elif run.train_config:
            base = load_training_setup(run.train_config).env_config
        else:
            base = EnvConfig(prior_medians=priors)
        if base.prior_medians and dict(base.prior_medians) != priors:
            raise ConfigurationError(
                f"repair priors {dict(sorted(base.prior_medians.items()))} of the trained setup differ from "
                f"the scenario config's {dict(sorted(priors.items()))}"
            )
        env_config = replace(
            base,
            n_crews=run.crews_for(feeder),
            horizon_h=run.horizon_h if run.horizon_h is not None else base.horizon_h,
            prior_medians=priors,
            record_trace=True,
        )
        env_config.validate()
        return cls(run, scenario_config, feeder, roads, env_config, scenario_dir, checkpoint)

    def scenario(self, seed: int) -> HazardScenario:
        if self.scenario_dir is not None:
            scenario = load_scenario(self.scenario_dir / scenario_file(seed))
            if scenario.feeder_name != self.feeder.name:
                raise ConfigurationError(f"scenario {seed} was drawn for {scenario.feeder_name}, not {self.feeder.name}")
            return scenario
        return generate_scenario(self.scenario_config, seed, self.feeder, self.roads)

    def seeds(self) -> List[int]:
        if self.run.seeds or self.scenario_dir is None:
            return list(self.run.seeds)
        return [int(s) for s in _read_manifest(self.scenario_dir).get('seeds', [])]

    def make_env(self) -> RestorationEnv:
        return RestorationEnv(self.feeder, self.roads, self.env_config)

    def check_held_out(self, seeds: Sequence[int]) -> None:
        """Refuse to score a checkpoint on scenarios it was trained on"""
        if self.checkpoint is None:
            return
        interval = self.checkpoint[2].get('extra', {}).get('train_seeds')
        if interval is None:
            logger.warning(f"⚠️  Checkpoint {self.run.checkpoint} does not record its training seeds; held-out check skipped")
            return
        lo, hi = int(interval[0]), int(interval[1])
        seen = [s for s in seeds if lo <= s < hi]
        if seen:
            raise ConfigurationError(
                f"{len(seen)} evaluation seed(s) (first {seen[0]}) fall inside the training seeds [{lo}, {hi}) "
                f"of {self.run.checkpoint}"
            )

    def dispatcher_factory(self) -> Callable[[int], Any]:
        """Fresh dispatcher per episode; checkpoints are loaded once"""
        run = self.run
        if run.dispatcher != "drl":
            return lambda seed: make_dispatcher(run.dispatcher, fallback=run.oracle_fallback)
        policy, slate, _ = self.checkpoint
        if self.env_config.n_crews > slate.max_crews:
            raise ConfigurationError(
                f"checkpoint {run.checkpoint} holds {slate.max_crews} crews; run asks for {self.env_config.n_crews}"
            )
        policy.eval()
        return lambda seed: PolicyDispatcher(policy, slate, mode="greedy", seed=seed)


def _episode_row(method: str, metrics: EpisodeMetrics, env: RestorationEnv) -> Dict[str, Any]:
    row = {'method': method}
    row.update({k: v.item() if isinstance(v, np.generic) else v for k, v in metrics.as_row().items()})
    row['ens_replay_mwh'] = float(replay_ens(env.trace)) if env.config.record_trace else float('nan')
    if env.config.record_trace and not np.isclose(row['ens_replay_mwh'], row['ens_mwh'], rtol=AUDIT_RTOL, atol=0.0):
        logger.warning(f"⚠️  Seed {metrics.seed}: ENS {row['ens_mwh']:.9f} MWh differs from trace replay {row['ens_replay_mwh']:.9f}")
    return row


def evaluate(run: RunConfig) -> Tuple[pd.DataFrame, MetricsReport]:
    """Run every scenario to completion; rows ordered by seed"""
    workspace = Workspace.build(run)
    seeds = workspace.seeds()
    workspace.check_held_out(seeds)
    make = workspace.dispatcher_factory()
    logger.info(f"🚀 Evaluating {run.method} on {len(seeds)} scenarios ({workspace.feeder.name}, {workspace.env_config.n_crews} crews)")

    def one(seed: int) -> Dict[str, Any]:
        env = workspace.make_env()
        metrics = run_episode(env, workspace.scenario(seed), make(seed))
        return _episode_row(run.method, metrics, env)

    rows = fan_out(one, seeds, run.workers if run.workers is not None else max_workers(), label="episode")
    frame = pd.DataFrame(rows, columns=None if rows else ['method', 'seed'])
    return frame, aggregate(frame)


def write_report(report: MetricsReport, out_dir: Path) -> Path:
    path = out_dir / "report.yaml"
    with open(path, 'w') as f:
        yaml.safe_dump(report.to_dict(), f, sort_keys=False, allow_unicode=True)
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_scenarios(args) -> int:
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise ConfigurationError(f"output directory {out_dir} is not empty; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)

    config = load_scenario_config(args.config)
    if args.preset == "shifted" and config.preset != "shifted":
        config = config.shifted()
    feeder = load_feeder(config.feeder_path())
    roads = load_roads(config.roads_path(), feeder)
    seeds = list(range(args.seed, args.seed + args.count))
    logger.info(f"📦 Generating {len(seeds)} {config.preset} scenarios for {feeder.name} into {out_dir}")

    def one(seed: int) -> str:
        scenario = generate_scenario(config, seed, feeder, roads)
        save_scenario(scenario, out_dir / scenario_file(seed))
        return scenario_file(seed)

    files = fan_out(one, seeds, max_workers(), label="scenario")
    manifest = {
        'format_version': MANIFEST_FORMAT_VERSION,
        'config': str(Path(args.config).resolve()),
        'config_sha256': config_hash(args.config),
        'feeder': feeder.name,
        'preset': config.preset,
        'seeds': seeds,
        'files': files,
    }
    with open(out_dir / MANIFEST_NAME, 'w') as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    logger.info(f"✅ Wrote {len(files)} scenarios and {MANIFEST_NAME}")
    return 0


def _run_config(args, seeds: Sequence[int]) -> RunConfig:
    return RunConfig(
        scenario_config=getattr(args, 'config', None),
        scenario_dir=getattr(args, 'scenarios', None),
        feeder=args.feeder,
        dispatcher=args.dispatcher,
        checkpoint=args.checkpoint,
        n_crews=args.crews,
        seeds=tuple(seeds),
        out_dir=args.out,
        horizon_h=args.horizon,
        oracle_fallback=getattr(args, 'fallback', None),
        workers=getattr(args, 'workers', None),
        train_config=getattr(args, 'train_config', None),
    )


def cmd_simulate(args) -> int:
    run = _run_config(args, [args.seed])
    workspace = Workspace.build(run)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    env = workspace.make_env()
    dispatcher = workspace.dispatcher_factory()(args.seed)
    metrics = run_episode(env, workspace.scenario(args.seed), dispatcher)
    row = _episode_row(run.method, metrics, env)

    trace_path = out_dir / f"trace_{args.seed:06d}.jsonl"
    with open(trace_path, 'w') as f:
        for entry in env.trace:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    with open(out_dir / f"metrics_{args.seed:06d}.yaml", 'w') as f:
        yaml.safe_dump({**row, 'critical_restore_min': dict(metrics.critical_restore_min)}, f, sort_keys=False)

    logger.info(
        f"✅ Seed {args.seed}: ENS {metrics.ens_mwh:.3f} MWh, travel {metrics.travel_km:.1f} km, "
        f"{metrics.replans} replans, trace {trace_path}"
    )
    return 0


def cmd_train(args) -> int:
    setup = load_training_setup(args.config)
    if args.crews is not None:
        setup = replace(setup, env_config=replace(setup.env_config, n_crews=args.crews))
    if args.seed is not None:
        setup = replace(setup, ppo=replace(setup.ppo, seed=args.seed))
    result = train(setup, args.out, resume=args.resume)
    logger.info(f"✅ Training finished; best eval reward {result.best_eval_reward:.3f}, log {result.log_path}")
    return 0


def cmd_evaluate(args) -> int:
    seeds = list(range(args.seed, args.seed + args.count)) if args.count is not None else []
    run = _run_config(args, seeds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    frame, report = evaluate(run)
    episodes_path = out_dir / f"episodes_{run.method}.csv"
    frame.to_csv(episodes_path, index=False)
    write_report(report, out_dir)
    print(report.render_table())
    logger.info(f"✅ Wrote {len(frame)} episode rows to {episodes_path}")

    if args.store:
        run_id = args.run_id or f"{run.method}-{datetime.now().strftime('%Y%m%d-%H%M%S')}-{uuid.uuid4().hex[:8]}"
        outcome = push_results(run_id, frame.to_dict(orient='records'), report.to_dict())
        if outcome['success']:
            logger.info(f"✅ {outcome['message']} (run {run_id})")
        else:
            logger.warning(f"⚠️  {outcome['message']}")
    return 0


def cmd_report(args) -> int:
    frames = [pd.read_csv(path) for path in args.inputs]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    report = aggregate(frame)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = write_report(report, out_dir)
    print(report.render_table())
    logger.info(f"✅ Aggregated {len(frame)} rows from {len(args.inputs)} file(s) into {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harness", description="Storm restoration dispatch experiments")
    parser.add_argument('--log-level', default=None, help='Override LOG_LEVEL')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen-scenarios', help='Sample hazard scenarios into a directory')
    gen.add_argument('--config', required=True, help='Scenario config YAML')
    gen.add_argument('--count', type=int, required=True)
    gen.add_argument('--seed', type=int, default=0, help='First scenario seed')
    gen.add_argument('--preset', choices=('base', 'shifted'), default='base')
    gen.add_argument('--out', required=True)
    gen.add_argument('--force', action='store_true', help='Write into a non-empty directory')
    gen.set_defaults(handler=cmd_gen_scenarios)

    def run_flags(p, seed_help: str) -> None:
        source = p.add_mutually_exclusive_group(required=True)
        source.add_argument('--config', help='Scenario config YAML (scenarios drawn on the fly)')
        source.add_argument('--scenarios', help='Directory written by gen-scenarios')
        p.add_argument('--feeder', help='Feeder file overriding the scenario config')
        p.add_argument('--crews', type=int, help='Crew count (from the feeder\'s supported set)')
        p.add_argument('--dispatcher', choices=DISPATCHERS, default='greedy_value')
        p.add_argument('--checkpoint', help='Policy checkpoint for the drl dispatcher')
        p.add_argument('--fallback', choices=('greedy_value', 'travel_aware'),
                       help='Heuristic the oracle falls back to above its size caps')
        p.add_argument('--horizon', type=float, help='Episode horizon in hours')
        p.add_argument('--train-config', help='Training config whose env and reward sections the run uses')
        p.add_argument('--seed', type=int, default=0, help=seed_help)
        p.add_argument('--out', default='results')

    simulate = sub.add_parser('simulate', help='Run one episode and write its trace')
    run_flags(simulate, 'Scenario seed')
    simulate.set_defaults(handler=cmd_simulate)

    evaluate_parser = sub.add_parser('evaluate', help='Evaluate a dispatcher over a scenario batch')
    run_flags(evaluate_parser, 'First scenario seed')
    evaluate_parser.add_argument('--count', type=int, help='Number of seeds (default: all in --scenarios)')
    evaluate_parser.add_argument('--workers', type=int, help='Override MAX_WORKERS')
    evaluate_parser.add_argument('--store', action='store_true', help='Push rows and report to the results store')
    evaluate_parser.add_argument('--run-id', help='Run id used in the results store')
    evaluate_parser.set_defaults(handler=cmd_evaluate)

    train_parser = sub.add_parser('train', help='Train the recurrent dispatcher with PPO')
    train_parser.add_argument('--config', required=True, help='Training config YAML')
    train_parser.add_argument('--crews', type=int)
    train_parser.add_argument('--seed', type=int, help='Update-order seed')
    train_parser.add_argument('--resume', help='Checkpoint to resume from')
    train_parser.add_argument('--out', default='runs')
    train_parser.set_defaults(handler=cmd_train)

    report = sub.add_parser('report', help='Aggregate per-episode CSVs into a report')
    report.add_argument('inputs', nargs='+', help='episodes_*.csv files')
    report.add_argument('--out', default='results')
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging(args.log_level)

    try:
        return args.handler(args)
    except KeyboardInterrupt:
        logger.warning("⚠️  Interrupted by user")
        return 1
    except (RestorationError, OSError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line entry point: data generation, verification, training,
evaluation, monitoring, plotting and attention inspection.

Usage:
    python src/cli_app.py [--config FILE] [--format json|table] <subcommand> [options]
"""

import argparse
import csv
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import Config
from errors import PastelError
from eval_harness import (compare_reports, evaluate, export_attention, export_plots, initial_states,
                          perturbation_study, render_comparison_table, render_perturbation_table)
from oracle_planner import generate_dataset, read_dataset, verify_dataset
from pastel_model import ROLLOUT_MODES, check_compatible, load_checkpoint, rollout
from planar_env import STATE_DIM
from run_manifest import RunManifest
from stl_core import Formula, horizon, load_spec_file, robustness, satisfies
from trainer import train

logger = logging.getLogger(__name__)

EXIT_MISSING_FILE = 3


def _specs_from_args(paths: Optional[Sequence[str]], config: Config) -> Dict[str, Formula]:
    """spec_id is the file stem for --spec files, the config key otherwise"""
    if not paths:
        return config.load_specs()
    return {os.path.splitext(os.path.basename(p))[0]: load_spec_file(p) for p in paths}


def _emit(args, payload: dict, table: str) -> None:
    if args.format == 'json':
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(table)


def _manifest(args, argv: Sequence[str], config: Config) -> RunManifest:
    return RunManifest(subcommand=args.command, argv=list(argv), config=config.to_dict())


# subcommands

def cmd_gen_data(args, config: Config, argv) -> int:
    env = config.load_environment()
    specs = config.load_specs()
    manifest = _manifest(args, argv, config)
    manifest.seeds['dataset'] = config.dataset_seed
    manifest.inputs.update(config.spec_files)
    summary = generate_dataset(specs, config.per_spec_count, env, config.oracle, config.dataset_seed,
                               config.dataset_path, jobs=config.jobs, h_max=config.model['h_max'])
    manifest.add_output(config.dataset_path)
    manifest.write(os.path.dirname(os.path.abspath(config.dataset_path)))
    lines = [f"{'spec':<10} {'generated':>9} {'requested':>9} {'success':>8}"]
    for spec_id, stats in summary['per_spec'].items():
        lines.append(f"{spec_id:<10} {stats['generated']:>9d} {stats['requested']:>9d} {stats['success_rate']:>8.2f}")
    _emit(args, summary, '\n'.join(lines))
    return 0


def cmd_dataset_verify(args, config: Config, argv) -> int:
    env = config.load_environment()
    report = verify_dataset(config.dataset_path, env, args.margin)
    payload = {'dataset': config.dataset_path, 'n_records': report.n_records, 'ok': report.ok,
               'failures': [{'record': line, 'reason': reason} for line, reason in report.failures]}
    table = f"{config.dataset_path}: {report.n_records} records, {len(report.failures)} failures"
    for line, reason in report.failures[:20]:
        table += f"\n  record {line}: {reason}"
    _emit(args, payload, table)
    report.raise_for_failures()
    return 0


def cmd_train(args, config: Config, argv) -> int:
    env = config.load_environment()
    manifest = _manifest(args, argv, config)
    manifest.seeds['train'] = config.train.seed
    manifest.inputs['dataset'] = config.train.dataset_path
    result = train(config.train, config.model_config(env), env)
    manifest.add_output(result.checkpoint_path)
    manifest.add_output(result.metrics_path)
    manifest.write(config.train.out_dir)
    last = {row['split']: row for row in result.history[-2:]}
    payload = {'checkpoint': result.checkpoint_path, 'fingerprint': result.model.fingerprint(),
               'metrics': result.metrics_path, 'final': last}
    table = '\n'.join([f"checkpoint: {result.checkpoint_path}", f"fingerprint: {payload['fingerprint']}"]
                      + [f"{split} L_total={row['L_total']:.5f}" for split, row in last.items()])
    _emit(args, payload, table)
    return 0


def _load_for(path: str, env, specs: Dict[str, Formula]):
    model = load_checkpoint(path)
    check_compatible(model, env, max(horizon(f) for f in specs.values()))
    return model


def cmd_eval(args, config: Config, argv) -> int:
    env = config.load_environment()
    specs = _specs_from_args(args.spec, config)
    ec = config.eval
    manifest = _manifest(args, argv, config)
    manifest.seeds['eval'] = ec.seed
    manifest.inputs['checkpoint'] = args.checkpoint

    model = _load_for(args.checkpoint, env, specs)
    report = evaluate(model, specs, ec.n_samples, ec.seed, env, ec.mode)
    report_path = os.path.join(ec.out_dir, 'report.json')
    report.write(report_path)
    manifest.add_output(report_path)
    payload = report.to_dict()
    table = report.render_table()

    if args.baseline_checkpoint:
        manifest.inputs['baseline_checkpoint'] = args.baseline_checkpoint
        baseline = evaluate(_load_for(args.baseline_checkpoint, env, specs), specs, ec.n_samples, ec.seed, env,
                            ec.mode)
        baseline_path = os.path.join(ec.out_dir, 'baseline_report.json')
        baseline.write(baseline_path)
        manifest.add_output(baseline_path)
        rows = compare_reports(report.percentages(), baseline.percentages())
        payload = {'report': payload, 'baseline': baseline.to_dict(), 'comparison': [r.to_dict() for r in rows]}
        table = '\n\n'.join([table, 'baseline:', baseline.render_table(), render_comparison_table(rows)])

    manifest.write(ec.out_dir)
    _emit(args, payload, table)
    return 0


def cmd_perturb(args, config: Config, argv) -> int:
    env = config.load_environment()
    f = load_spec_file(args.spec)
    ec = config.eval
    perturbations = args.perturbation or list(ec.perturbations)
    manifest = _manifest(args, argv, config)
    manifest.seeds['eval'] = ec.seed
    manifest.inputs.update({'checkpoint': args.checkpoint, 'spec': args.spec})

    model = load_checkpoint(args.checkpoint)
    check_compatible(model, env, horizon(f))
    rows = perturbation_study(model, f, perturbations, ec.n_samples, ec.seed, env, ec.mode)
    payload = {'spec': args.spec, 'checkpoint_fingerprint': model.fingerprint(), 'ablation': model.cfg.ablation,
               'seed': ec.seed, 'n_samples': ec.n_samples, 'mode': ec.mode, 'rows': [r.to_dict() for r in rows]}
    os.makedirs(ec.out_dir, exist_ok=True)
    out_path = os.path.join(ec.out_dir, 'perturbation.json')
    with open(out_path, 'w', encoding='utf-8') as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write('\n')
    manifest.add_output(out_path)
    manifest.write(ec.out_dir)
    _emit(args, payload, render_perturbation_table(rows))
    return 0


def read_trajectory_file(path: str) -> List[np.ndarray]:
    """
    State sequences from a CSV (px, py, vx, vy columns, optional trajectory
    column) or JSONL file (one object with a 'states' list per line)
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"trajectory file not found: {path}")
    if path.endswith('.csv'):
        with open(path, 'r', newline='', encoding='utf-8') as f:
            rows = list(csv.DictReader(f))
        groups: Dict[str, List[List[float]]] = {}
        for row in rows:
            groups.setdefault(row.get('trajectory', '0'), []).append(
                [float(row[k]) for k in ('px', 'py', 'vx', 'vy')])
        return [np.asarray(states, dtype=np.float64) for states in groups.values()]
    signals = []
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if line.strip():
                signals.append(np.asarray(json.loads(line)['states'], dtype=np.float64).reshape(-1, STATE_DIM))
    return signals


def cmd_monitor(args, config: Config, argv) -> int:
    env = config.load_environment()
    f = load_spec_file(args.spec)
    results = []
    for signal in read_trajectory_file(args.traj):
        results.append({'satisfied': satisfies(f, signal, args.t, env), 'rho': robustness(f, signal, args.t, env)})
    table = '\n'.join(f"{'SAT' if r['satisfied'] else 'UNSAT'} rho={r['rho']!r}" for r in results)
    _emit(args, {'spec': args.spec, 't': args.t, 'results': results}, table)
    return 0


def cmd_plot(args, config: Config, argv) -> int:
    env = config.load_environment()
    out_dir = args.out_dir
    manifest = _manifest(args, argv, config)
    if args.checkpoint:
        specs = _specs_from_args(args.spec, config)
        model = _load_for(args.checkpoint, env, specs)
        manifest.inputs['checkpoint'] = args.checkpoint
        manifest.seeds['eval'] = config.eval.seed
        starts = initial_states(args.n, config.eval.seed, env)
        trajectories = [rollout(model, f, x0, env, config.eval.mode, spec_id).trajectory
                        for spec_id, f in specs.items() for x0 in starts]
    else:
        manifest.inputs['dataset'] = config.dataset_path
        trajectories = [r.trajectory for r in read_dataset(config.dataset_path)[:args.n]]
    paths = export_plots(trajectories, env, out_dir)
    for path in paths:
        manifest.add_output(path)
    if paths:
        manifest.write(out_dir)
    _emit(args, {'written': paths}, f"wrote {len(paths)} files to {out_dir}")
    return 0


def cmd_inspect_attn(args, config: Config, argv) -> int:
    env = config.load_environment()
    f = load_spec_file(args.spec)
    model = load_checkpoint(args.checkpoint)
    check_compatible(model, env, horizon(f))
    manifest = _manifest(args, argv, config)
    manifest.inputs.update({'checkpoint': args.checkpoint, 'spec': args.spec})
    manifest.seeds['eval'] = config.eval.seed
    x0 = initial_states(1, config.eval.seed, env)[0]
    trajectory = rollout(model, f, x0, env, config.eval.mode).trajectory
    paths, masses = export_attention(model, f, trajectory, args.out_dir)
    for path in paths:
        manifest.add_output(path)
    manifest.write(args.out_dir)
    table = '\n'.join([f"wrote {len(paths)} attention matrices to {args.out_dir}"]
                      + [f"layer {i}: spec attention mass {m:.4f}" for i, m in enumerate(masses)])
    _emit(args, {'written': paths, 'spec_attention_mass': masses}, table)
    return 0


# parser

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
    parser.add_argument('--config', default=default(None), help='JSON run configuration')
    parser.add_argument('--format', choices=('json', 'table'), default=default('table'), help='report format')
    parser.add_argument('--jobs', type=int, default=default(None), help='worker process cap')
    parser.add_argument('--log-level', default=default('INFO'),
                        choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'), help='stderr log level')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='pastel', description='STL-conditioned trajectory transformer toolkit')
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', parents=[common], help='generate a verified oracle dataset')
    p.add_argument('--seed', type=int, dest='dataset.seed')
    p.add_argument('--count', type=int, dest='dataset.per_spec_count', help='trajectories per specification')
    p.add_argument('--out', dest='dataset.path', help='dataset JSONL path')
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser('dataset-verify', parents=[common], help='independently audit a dataset')
    p.add_argument('--dataset', dest='dataset.path')
    p.add_argument('--margin', type=float, default=0.0, help='required robustness margin')
    p.set_defaults(handler=cmd_dataset_verify)

    p = sub.add_parser('train', parents=[common], help='train PASTEL (or the PACT ablation)')
    p.add_argument('--dataset', dest='train.dataset_path')
    p.add_argument('--out-dir', dest='train.out_dir')
    p.add_argument('--epochs', type=int, dest='train.epochs')
    p.add_argument('--batch-size', type=int, dest='train.batch_size')
    p.add_argument('--lr', type=float, dest='train.lr')
    p.add_argument('--seed', type=int, dest='train.seed')
    p.add_argument('--dtype', choices=('float32', 'float64'), dest='train.dtype')
    p.add_argument('--ablation', action='store_true', default=None, dest='train.ablation',
                   help='null the specification input (PACT)')
    p.set_defaults(handler=cmd_train)

    for name, handler, help_text in (('eval', cmd_eval, 'satisfaction-rate benchmark'),
                                     ('perturb', cmd_perturb, 'specification perturbation study')):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument('--checkpoint', required=True)
        if name == 'eval':
            p.add_argument('--spec', action='append', help='spec file (repeatable); default: config spec_files')
            p.add_argument('--baseline-checkpoint', help='second checkpoint to compare against')
        else:
            p.add_argument('--spec', required=True)
            p.add_argument('--perturbation', action='append',
                           help="identity, swap:A:B, shift:k or formula text (repeatable)")
        p.add_argument('--n', type=int, dest='eval.n_samples')
        p.add_argument('--seed', type=int, dest='eval.seed')
        p.add_argument('--mode', choices=ROLLOUT_MODES, dest='eval.mode')
        p.add_argument('--out-dir', dest='eval.out_dir')
        p.set_defaults(handler=handler)

    p = sub.add_parser('monitor', parents=[common], help='check a trajectory file against a specification')
    p.add_argument('--spec', required=True)
    p.add_argument('--traj', required=True, help='CSV or JSONL trajectory file')
    p.add_argument('--t', type=int, default=0, help='evaluation time step')
    p.set_defaults(handler=cmd_monitor)

    p = sub.add_parser('plot', parents=[common], help='SVG plots of model rollouts or dataset records')
    p.add_argument('--checkpoint', help='plot rollouts of this checkpoint (default: dataset records)')
    p.add_argument('--spec', action='append')
    p.add_argument('--dataset', dest='dataset.path')
    p.add_argument('--n', type=int, default=5)
    p.add_argument('--seed', type=int, dest='eval.seed')
    p.add_argument('--out-dir', default='runs/plots')
    p.set_defaults(handler=cmd_plot)

    p = sub.add_parser('inspect-attn', parents=[common], help='export attention matrices for one rollout')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--spec', required=True)
    p.add_argument('--seed', type=int, dest='eval.seed')
    p.add_argument('--out-dir', default='runs/attention')
    p.set_defaults(handler=cmd_inspect_attn)
    return parser


def _overrides(args) -> Dict[str, object]:
    values = {key: value for key, value in vars(args).items() if '.' in key}
    values['jobs'] = args.jobs
    return values


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, otherwise the exit code of the error category; a single
        'error: <category>: <message>' line goes to stderr.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        config = Config(args.config, _overrides(args))
        logger.debug(f"Resolved configuration: {config.to_dict()}")
        return args.handler(args, config, argv)
    except PastelError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: missing-file: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except Exception as e:
        logger.exception(f"{args.command} failed with an unexpected error")
        print(f"error: internal: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())

#!/usr/bin/env python3
"""
PASTEL vs PACT benchmark

Trains both variants on one dataset for several seeds, evaluates each
checkpoint in dynamics mode and checks that the specification-conditioned
model beats the ablation by a clear margin on the harder specifications.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

# Add src directory to Python path
script_dir = os.path.dirname(os.path.abspath(__file__))
src_dir = os.path.join(os.path.dirname(script_dir), 'src')
sys.path.insert(0, src_dir)

from config import Config
from eval_harness import evaluate
from oracle_planner import generate_dataset, read_dataset
from trainer import train

logger = logging.getLogger('benchmark')

VARIANTS = ('PASTEL', 'PACT')


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument('--config', default=None, help='JSON run configuration')
    parser.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2], help='training seeds')
    parser.add_argument('--n', type=int, default=100, help='rollouts per specification')
    parser.add_argument('--epochs', type=int, default=None)
    parser.add_argument('--out-dir', default='runs/benchmark')
    parser.add_argument('--margin', type=float, default=10.0, help='required lead in percentage points')
    parser.add_argument('--specs', nargs='+', default=['phi2', 'phi3'], help='specifications the check applies to')
    parser.add_argument('--log-level', default='INFO')
    return parser.parse_args(argv)


def ensure_dataset(config, env, specs):
    if os.path.exists(config.train.dataset_path):
        logger.info(f"Using existing dataset {config.train.dataset_path}")
    else:
        logger.info(f"Generating dataset {config.train.dataset_path}")
        generate_dataset(specs, config.per_spec_count, env, config.oracle, config.dataset_seed,
                         config.train.dataset_path, jobs=config.jobs, h_max=config.model['h_max'])
    return read_dataset(config.train.dataset_path)


def run_seed(seed, config, env, specs, records, args):
    """Satisfaction percentages per variant for one training seed"""
    results = {}
    for variant in VARIANTS:
        ablation = variant == 'PACT'
        overrides = {'seed': seed, 'ablation': ablation,
                     'out_dir': os.path.join(args.out_dir, f"seed{seed}", variant.lower())}
        if args.epochs is not None:
            overrides['epochs'] = args.epochs
        train_cfg = replace(config.train, **overrides)
        logger.info(f"seed {seed}: training {variant}")
        result = train(train_cfg, config.model_config(env), env, records)
        report = evaluate(result.model, specs, args.n, config.eval.seed, env, mode='dynamics')
        report.write(os.path.join(train_cfg.out_dir, 'report.json'))
        results[variant] = report.percentages()
    return results


def render_table(per_seed, spec_ids):
    header = f"{'seed':<6}" + ''.join(f" {f'{v} {s}':>14}" for s in spec_ids for v in VARIANTS)
    lines = [header, '-' * len(header)]
    for seed, results in per_seed.items():
        lines.append(f"{seed:<6}" + ''.join(f" {results[v][s]:>14.1f}" for s in spec_ids for v in VARIANTS))
    return '\n'.join(lines)


def directional_check(per_seed, spec_ids, margin):
    """spec_id -> (PASTEL mean, PACT mean, passed)"""
    outcome = {}
    for spec_id in spec_ids:
        pastel = float(np.mean([r['PASTEL'][spec_id] for r in per_seed.values()]))
        pact = float(np.mean([r['PACT'][spec_id] for r in per_seed.values()]))
        outcome[spec_id] = (pastel, pact, pastel >= pact + margin)
    return outcome


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s', stream=sys.stderr)

    config = Config(args.config)
    env = config.load_environment()
    specs = config.load_specs()
    missing = [s for s in args.specs if s not in specs]
    if missing:
        logger.error(f"specifications not in the configuration: {', '.join(missing)}")
        return 2

    records = ensure_dataset(config, env, specs)
    per_seed = {seed: run_seed(seed, config, env, specs, records, args) for seed in args.seeds}
    spec_ids = list(specs)

    print("📊 Satisfaction (%) per seed")
    print(render_table(per_seed, spec_ids))

    outcome = directional_check(per_seed, args.specs, args.margin)
    print(f"\nMean over {len(args.seeds)} seeds, n={args.n}, dynamics mode:")
    for spec_id, (pastel, pact, passed) in outcome.items():
        mark = '✅' if passed else '❌'
        print(f"   {mark} {spec_id}: PASTEL {pastel:.1f}% vs PACT {pact:.1f}% (lead {pastel - pact:+.1f})")

    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, 'benchmark.json'), 'w', encoding='utf-8') as f:
        json.dump({'seeds': args.seeds, 'n_samples': args.n, 'margin': args.margin,
                   'per_seed': {str(k): v for k, v in per_seed.items()},
                   'check': {k: {'pastel': p, 'pact': q, 'passed': ok} for k, (p, q, ok) in outcome.items()}},
                  f, indent=2, sort_keys=True)

    return 0 if all(passed for _, _, passed in outcome.values()) else 1


if __name__ == "__main__":
    sys.exit(main())

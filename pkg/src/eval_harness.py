"""
Evaluation protocol: satisfaction rates from seeded initial states, actuation
audit, specification perturbation study, attention export and plots.
"""

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402
import numpy as np  # noqa: E402

import diff_engine as de  # noqa: E402
from errors import ConfigError, HorizonError, PastelError, SchemaVersionError  # noqa: E402
from oracle_planner import DatasetRecord  # noqa: E402
from pastel_model import (ROLLOUT_MODES, PastelModel, RolloutResult, TrajectoryBatch,  # noqa: E402
                          make_batch, rollout, sequence_labels)
from planar_env import EnvironmentSpec, State, Trajectory, sample_initial_state  # noqa: E402
from stl_core import (Formula, horizon, parse, parse_tokens, region_names, render_canonical, robustness,  # noqa: E402
                      satisfies, shift_intervals, swap_regions)

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 100
    seed: int = 1
    mode: str = 'dynamics'
    out_dir: str = 'runs/eval'
    perturbations: Tuple[str, ...] = ('identity', 'swap:R1:R2', 'shift:2')

    def __post_init__(self):
        object.__setattr__(self, 'perturbations', tuple(self.perturbations))
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.mode not in ROLLOUT_MODES:
            raise ConfigError(f"mode must be one of {ROLLOUT_MODES}, got {self.mode!r}")


def initial_states(n_samples: int, seed: int, env: EnvironmentSpec) -> List[State]:
    """The same seed always yields the same start states, in order"""
    rng = np.random.default_rng(seed)
    return [sample_initial_state(rng, env) for _ in range(n_samples)]


@dataclass
class ActuationAudit:
    violations: int
    n_actions: int
    max_abs_action: float

    def to_dict(self) -> dict:
        return {'violations': self.violations, 'n_actions': self.n_actions, 'max_abs_action': self.max_abs_action}


def actuation_audit(trajectories: Sequence[Union[Trajectory, RolloutResult, np.ndarray]],
                    env: EnvironmentSpec) -> ActuationAudit:
    """
    Count actions with any component beyond a_max.

    Rollout results are audited on their raw head outputs, so in dynamics
    mode this reports what the model asked for before clamping.
    """
    violations = 0
    n_actions = 0
    max_abs = 0.0
    for item in trajectories:
        if isinstance(item, RolloutResult):
            actions = item.raw_actions
        elif isinstance(item, Trajectory):
            actions = item.actions
        else:
            actions = np.asarray(item, dtype=np.float64).reshape(-1, 2)
        if actions.size == 0:
            continue
        magnitude = np.abs(actions)
        violations += int(np.sum(np.any(magnitude > env.a_max, axis=1)))
        n_actions += actions.shape[0]
        max_abs = max(max_abs, float(magnitude.max()))
    return ActuationAudit(violations=violations, n_actions=n_actions, max_abs_action=max_abs)


@dataclass
class SpecEvaluation:
    spec_id: str
    formula_text: str
    satisfied: List[bool]
    robustness: List[float]
    actuation: ActuationAudit
    trajectories: List[Trajectory] = field(default_factory=list, repr=False)

    @property
    def n_samples(self) -> int:
        return len(self.satisfied)

    @property
    def percentage(self) -> float:
        return 100.0 * sum(self.satisfied) / self.n_samples

    def robustness_summary(self) -> Dict[str, float]:
        values = np.asarray(self.robustness)
        return {'min': float(values.min()), 'median': float(np.median(values)), 'max': float(values.max())}

    def to_dict(self) -> dict:
        return {
            'spec_id': self.spec_id,
            'formula': self.formula_text,
            'n_samples': self.n_samples,
            'satisfaction_percentage': self.percentage,
            'robustness': self.robustness_summary(),
            'actuation': self.actuation.to_dict(),
            'per_rollout': [{'satisfied': bool(s), 'robustness': float(r)}
                            for s, r in zip(self.satisfied, self.robustness)],
        }


@dataclass
class EvalReport:
    checkpoint_fingerprint: str
    mode: str
    seed: int
    n_samples: int
    specs: List[SpecEvaluation]
    ablation: bool = False

    def to_dict(self) -> dict:
        return {
            'format_version': REPORT_FORMAT_VERSION,
            'checkpoint_fingerprint': self.checkpoint_fingerprint,
            'ablation': self.ablation,
            'mode': self.mode,
            'seed': self.seed,
            'n_samples': self.n_samples,
            'specs': [s.to_dict() for s in self.specs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def percentages(self) -> Dict[str, float]:
        return {s.spec_id: s.percentage for s in self.specs}

    def render_table(self) -> str:
        header = f"{'spec':<10} {'satisfied %':>11} {'rho min':>9} {'rho med':>9} {'rho max':>9} {'act viol':>8}"
        lines = [header, '-' * len(header)]
        for s in self.specs:
            r = s.robustness_summary()
            lines.append(f"{s.spec_id:<10} {s.percentage:>11.1f} {r['min']:>9.3f} {r['median']:>9.3f} "
                         f"{r['max']:>9.3f} {s.actuation.violations:>8d}")
        return '\n'.join(lines)

    def write(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        tmp_path = f"{path}.tmp"
        with open(tmp_path, 'w', encoding='utf-8') as f:
            f.write(self.to_json() + '\n')
        os.replace(tmp_path, path)


def load_report_percentages(path: str) -> Tuple[bool, Dict[str, float]]:
    """(ablation flag, spec_id -> percentage) from a written report"""
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    if data.get('format_version') != REPORT_FORMAT_VERSION:
        raise SchemaVersionError('eval report', data.get('format_version'), REPORT_FORMAT_VERSION)
    return data['ablation'], {s['spec_id']: s['satisfaction_percentage'] for s in data['specs']}


def _rollouts(model: PastelModel, conditioning: Formula, n_steps: int, starts: Sequence[State],
              env: EnvironmentSpec, mode: str, spec_id: str) -> List[RolloutResult]:
    if n_steps > model.cfg.h_max:
        raise HorizonError(f"horizon {n_steps} exceeds checkpoint capacity H_max {model.cfg.h_max}")
    return [rollout(model, conditioning, x0, env, mode, spec_id, n_steps=n_steps) for x0 in starts]


def _score(spec_id: str, f: Formula, results: Sequence[RolloutResult], env: EnvironmentSpec) -> SpecEvaluation:
    return SpecEvaluation(spec_id=spec_id, formula_text=render_canonical(f),
                          satisfied=[satisfies(f, r.trajectory.states, 0, env) for r in results],
                          robustness=[robustness(f, r.trajectory.states, 0, env) for r in results],
                          actuation=actuation_audit(results, env),
                          trajectories=[r.trajectory for r in results])


def evaluate_spec(model: PastelModel, spec_id: str, f: Formula, n_samples: int, seed: int,
                  env: EnvironmentSpec, mode: str = 'dynamics', condition_on: Optional[Formula] = None,
                  starts: Optional[Sequence[State]] = None) -> SpecEvaluation:
    """
    Roll out from n_samples seeded start states and monitor each trajectory against f.

    condition_on selects a different formula for the model's specification
    input (perturbation study); rollouts then cover both horizons.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    conditioning = f if condition_on is None else condition_on
    if starts is None:
        starts = initial_states(n_samples, seed, env)
    results = _rollouts(model, conditioning, max(horizon(f), horizon(conditioning)), starts, env, mode, spec_id)
    evaluation = _score(spec_id, f, results, env)
    logger.info(f"{spec_id}: {evaluation.percentage:.1f}% satisfied over {n_samples} rollouts ({mode})")
    return evaluation


def satisfaction_rate(model: PastelModel, f: Formula, n_samples: int, seed: int, env: EnvironmentSpec,
                      mode: str = 'dynamics') -> float:
    """Percentage of seeded rollouts that satisfy f at t=0"""
    return evaluate_spec(model, '', f, n_samples, seed, env, mode).percentage


def evaluate(model: PastelModel, specs: Mapping[str, Formula], n_samples: int, seed: int,
             env: EnvironmentSpec, mode: str = 'dynamics') -> EvalReport:
    """Every specification is evaluated from the same seeded start states"""
    starts = initial_states(n_samples, seed, env)
    evaluations = [evaluate_spec(model, spec_id, f, n_samples, seed, env, mode, starts=starts)
                   for spec_id, f in specs.items()]
    return EvalReport(checkpoint_fingerprint=model.fingerprint(), mode=mode, seed=seed, n_samples=n_samples,
                      specs=evaluations, ablation=model.cfg.ablation)


def replay_satisfaction(records: Sequence[DatasetRecord], env: EnvironmentSpec) -> Dict[str, float]:
    """Monitor-only satisfaction of stored trajectories, per spec_id"""
    counts: Dict[str, List[bool]] = {}
    for record in records:
        f = parse_tokens(record.tokens)
        counts.setdefault(record.spec_id, []).append(satisfies(f, record.states, 0, env))
    return {spec_id: 100.0 * sum(flags) / len(flags) for spec_id, flags in counts.items()}


# perturbation study

def apply_perturbation(f: Formula, perturbation: str) -> Formula:
    """
    'identity', 'swap:A:B' (exchange two regions), 'shift:k' (move every
    interval by k steps) or the text of a replacement formula
    """
    if perturbation == 'identity':
        return f
    if perturbation.startswith('swap:'):
        parts = perturbation.split(':')
        if len(parts) != 3:
            raise ConfigError(f"swap perturbation must look like swap:A:B, got {perturbation!r}")
        return swap_regions(f, parts[1], parts[2])
    if perturbation.startswith('shift:'):
        try:
            delta = int(perturbation.split(':', 1)[1])
        except ValueError:
            raise ConfigError(f"shift perturbation must look like shift:k, got {perturbation!r}") from None
        return shift_intervals(f, delta)
    return parse(perturbation)


@dataclass
class PerturbationRow:
    label: str
    formula_text: Optional[str]
    rate_perturbed: Optional[float]
    rate_original: Optional[float]
    rate_unperturbed: Optional[float] = None
    spec_mass: Optional[List[float]] = None
    skipped: Optional[str] = None

    @property
    def delta(self) -> Optional[float]:
        """Change in satisfaction of the original formula caused by the edited conditioning"""
        if self.rate_original is None or self.rate_unperturbed is None:
            return None
        return self.rate_original - self.rate_unperturbed

    @property
    def spec_mass_mean(self) -> Optional[float]:
        return None if not self.spec_mass else float(np.mean(self.spec_mass))

    def to_dict(self) -> dict:
        return {'perturbation': self.label, 'formula': self.formula_text, 'rate_perturbed': self.rate_perturbed,
                'rate_original': self.rate_original, 'rate_unperturbed': self.rate_unperturbed,
                'delta': self.delta, 'spec_mass': self.spec_mass, 'spec_mass_mean': self.spec_mass_mean,
                'skipped': self.skipped}


def _spec_mass(model: PastelModel, f: Formula, results: Sequence[RolloutResult]) -> List[float]:
    """Per-layer SPEC-column attention mass of a forward pass over the rollouts, conditioned on f"""
    batch = make_batch([r.trajectory for r in results])
    with de.no_grad():
        output = model.forward(batch, model.tokenize_spec(f), training=False)
    return attention_spec_mass(output.attention)


def perturbation_study(model: PastelModel, f: Formula, perturbations: Sequence[str], n_samples: int, seed: int,
                       env: EnvironmentSpec, mode: str = 'dynamics') -> List[PerturbationRow]:
    """
    Condition rollouts on each perturbed formula and score them against both
    the perturbed and the original formula.

    Every row shares the start states of an unperturbed run conditioned on f;
    delta compares satisfaction of f against that run, and spec_mass is the
    attention STATE/ACTION queries put on SPEC columns under the edited
    conditioning.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    starts = initial_states(n_samples, seed, env)
    unperturbed = _score('unperturbed', f, _rollouts(model, f, horizon(f), starts, env, mode, ''), env).percentage
    rows = []
    for label in perturbations:
        try:
            perturbed = apply_perturbation(f, label)
            for name in region_names(perturbed):
                env.region(name)
            results = _rollouts(model, perturbed, max(horizon(f), horizon(perturbed)), starts, env, mode, label)
            on_perturbed = _score(label, perturbed, results, env)
            on_original = _score(label, f, results, env)
            mass = _spec_mass(model, perturbed, results)
        except PastelError as e:
            logger.warning(f"perturbation {label!r} skipped: {e}")
            rows.append(PerturbationRow(label, None, None, None, skipped=str(e)))
            continue
        rows.append(PerturbationRow(label, render_canonical(perturbed), on_perturbed.percentage,
                                    on_original.percentage, unperturbed, mass))
        logger.info(f"{label}: {on_perturbed.percentage:.1f}% perturbed, {on_original.percentage:.1f}% original")
    return rows


def render_perturbation_table(rows: Sequence[PerturbationRow]) -> str:
    header = (f"{'perturbation':<16} {'sat(perturbed) %':>16} {'sat(original) %':>15} {'delta':>7} "
              f"{'spec mass':>9}  formula")
    lines = [header, '-' * len(header)]
    for row in rows:
        if row.skipped:
            lines.append(f"{row.label:<16} {'skipped':>16} {'':>15} {'':>7} {'':>9}  {row.skipped}")
        else:
            lines.append(f"{row.label:<16} {row.rate_perturbed:>16.1f} {row.rate_original:>15.1f} "
                         f"{row.delta:>+7.1f} {row.spec_mass_mean:>9.3f}  {row.formula_text}")
    return '\n'.join(lines)


# comparison

@dataclass
class ComparisonRow:
    spec_id: str
    baseline: float
    candidate: float

    @property
    def delta(self) -> float:
        return self.candidate - self.baseline

    @property
    def relative(self) -> Optional[float]:
        """(new - old) / old, undefined when the baseline is 0"""
        return None if self.baseline == 0 else (self.candidate - self.baseline) / self.baseline

    def to_dict(self) -> dict:
        return {'spec_id': self.spec_id, 'baseline': self.baseline, 'candidate': self.candidate,
                'delta': self.delta, 'relative': self.relative}


def compare_reports(candidate: Mapping[str, float], baseline: Mapping[str, float]) -> List[ComparisonRow]:
    """Rows for the specifications both reports cover, in candidate order"""
    return [ComparisonRow(spec_id, baseline[spec_id], rate) for spec_id, rate in candidate.items()
            if spec_id in baseline]


def render_comparison_table(rows: Sequence[ComparisonRow]) -> str:
    header = f"{'spec':<10} {'baseline %':>10} {'candidate %':>11} {'delta':>7} {'relative':>9}"
    lines = [header, '-' * len(header)]
    for row in rows:
        relative = 'n/a' if row.relative is None else f"{100.0 * row.relative:.1f}%"
        lines.append(f"{row.spec_id:<10} {row.baseline:>10.1f} {row.candidate:>11.1f} {row.delta:>7.1f} {relative:>9}")
    return '\n'.join(lines)


# attention

def _attention_output(model: PastelModel, f: Formula, trajectory: Trajectory):
    batch = TrajectoryBatch(states=trajectory.states[None], actions=trajectory.actions[None])
    with de.no_grad():
        spec = model.tokenize_spec(f)
        return model.forward(batch, spec, training=False), spec


def attention_spec_mass(attention: Sequence[np.ndarray]) -> List[float]:
    """
    Per layer: mean attention weight that STATE and ACTION queries put on
    SPEC columns (summed over those columns), averaged over batch and heads.
    """
    masses = []
    for weights in attention:
        length = weights.shape[-1]
        spec_columns = np.arange(0, length, 3)
        query_rows = np.asarray([i for i in range(length) if i % 3 != 0])
        mass = weights[..., query_rows, :][..., spec_columns].sum(axis=-1)
        masses.append(float(mass.mean()))
    return masses


def _write_matrix(path: str, matrix: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str]) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['query\\key'] + list(col_labels))
        for label, row in zip(row_labels, matrix):
            writer.writerow([label] + [repr(float(v)) for v in row])


def export_attention(model: PastelModel, f: Formula, trajectory: Trajectory, out_dir: str) -> Tuple[List[str], List[float]]:
    """
    One CSV per (layer, head) of causal self-attention plus one per head of
    cross-attention; rows and columns carry position labels.

    Returns:
        (written paths, per-layer attention mass on SPEC columns)
    """
    os.makedirs(out_dir, exist_ok=True)
    output, spec = _attention_output(model, f, trajectory)
    labels = sequence_labels(trajectory.horizon)
    paths = []
    for layer, weights in enumerate(output.attention):
        for head in range(weights.shape[1]):
            path = os.path.join(out_dir, f"attn_layer{layer}_head{head}.csv")
            _write_matrix(path, weights[0, head], labels, labels)
            paths.append(path)
    if output.cross_attention is not None:
        spec_labels = [f"{i}:{tok}" for i, tok in enumerate(spec.tokens)]
        for head in range(output.cross_attention.shape[1]):
            path = os.path.join(out_dir, f"cross_head{head}.csv")
            _write_matrix(path, output.cross_attention[0, head], spec_labels, labels)
            paths.append(path)
    masses = attention_spec_mass(output.attention)
    logger.info(f"Wrote {len(paths)} attention matrices to {out_dir}")
    return paths, masses


# plots

def _configure_matplotlib() -> None:
    plt.rcParams['svg.hashsalt'] = 'pastel'
    plt.rcParams['svg.fonttype'] = 'none'
    plt.rcParams['path.simplify'] = False


def plot_trajectory(trajectory: Trajectory, env: EnvironmentSpec, path: str, title: str = '') -> None:
    _configure_matplotlib()
    fig, ax = plt.subplots(figsize=(5, 5))
    try:
        ws = env.workspace
        ax.add_patch(Rectangle((ws.xlo, ws.ylo), ws.xhi - ws.xlo, ws.yhi - ws.ylo, fill=False,
                               edgecolor='black', linewidth=1.5))
        for region in env.regions:
            r = region.rect
            if region.role == 'obstacle':
                patch = Rectangle((r.xlo, r.ylo), r.xhi - r.xlo, r.yhi - r.ylo, facecolor='none',
                                  edgecolor='firebrick', hatch='//', linewidth=1.0)
            else:
                patch = Rectangle((r.xlo, r.ylo), r.xhi - r.xlo, r.yhi - r.ylo, facecolor='tab:green',
                                  alpha=0.25, edgecolor='tab:green')
            ax.add_patch(patch)
            cx, cy = r.center
            ax.text(cx, cy, region.name, ha='center', va='center', fontsize=9)
        xs, ys = trajectory.states[:, 0], trajectory.states[:, 1]
        ax.plot(xs, ys, '-', color='tab:blue', linewidth=1.5)
        ax.plot(xs[0], ys[0], 'o', color='tab:blue', label='start')
        ax.plot(xs[-1], ys[-1], 's', color='tab:orange', label='end')
        margin = 0.05 * max(ws.xhi - ws.xlo, ws.yhi - ws.ylo)
        ax.set_xlim(ws.xlo - margin, ws.xhi + margin)
        ax.set_ylim(ws.ylo - margin, ws.yhi + margin)
        ax.set_aspect('equal')
        ax.set_xlabel('px [m]')
        ax.set_ylabel('py [m]')
        if title:
            ax.set_title(title)
        ax.legend(loc='upper left', fontsize=8)
        fig.savefig(path, format='svg', metadata={'Date': None})
    finally:
        plt.close(fig)


def export_plots(trajectories: Sequence[Trajectory], env: EnvironmentSpec, out_dir: str) -> List[str]:
    """
    One SVG per trajectory plus trajectories.csv with the raw values.

    Writes nothing for an empty list.
    """
    if not trajectories:
        return []
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, trajectory in enumerate(trajectories):
        path = os.path.join(out_dir, f"trajectory_{i:04d}.svg")
        title = f"{trajectory.spec_id} #{i}" if trajectory.spec_id else f"#{i}"
        plot_trajectory(trajectory, env, path, title)
        paths.append(path)
    csv_path = os.path.join(out_dir, 'trajectories.csv')
    with open(csv_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['trajectory', 'spec_id', 't', 'px', 'py', 'vx', 'vy', 'ax', 'ay'])
        for i, trajectory in enumerate(trajectories):
            for t, state in enumerate(trajectory.states):
                action = trajectory.actions[t] if t < trajectory.horizon else (float('nan'), float('nan'))
                writer.writerow([i, trajectory.spec_id, t] + [repr(float(v)) for v in state]
                                + [repr(float(v)) for v in action])
    paths.append(csv_path)
    logger.info(f"Wrote {len(trajectories)} plots to {out_dir}")
    return paths

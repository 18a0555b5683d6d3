"""
Dataset oracle: smoothed-robustness gradient ascent over bounded actions,
followed by exact verification with the boolean monitor.

Only trajectories the exact monitor accepts (robustness above the acceptance
margin) ever leave this module, and load-time audits re-check every record.
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import diff_engine as de
from errors import (ConfigError, DatasetGenerationError, DatasetVerificationError, HorizonError,
                    PastelError)
from planar_env import (ACTION_DIM, STATE_DIM, EnvironmentSpec, State, Trajectory, sample_initial_state,
                        simulate, step)
from stl_core import (Formula, horizon, linearize, parse_tokens, robustness, satisfies,
                      smooth_robustness_tensor, validate_regions)

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class OracleConfig:
    """Search settings; stage i of the continuation runs at beta_schedule[i] with step_sizes[i]"""

    beta_schedule: Tuple[float, ...] = (2.0, 10.0, 50.0)
    step_sizes: Tuple[float, ...] = (0.1, 0.05, 0.02)
    max_iterations: int = 150
    restarts: int = 4
    action_weight: float = 1e-3
    acceptance_margin: float = 0.05
    init_scale: float = 0.5
    check_every: int = 25
    resample_budget: int = 3
    success_floor: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, 'beta_schedule', tuple(float(b) for b in self.beta_schedule))
        object.__setattr__(self, 'step_sizes', tuple(float(s) for s in self.step_sizes))
        if not self.beta_schedule or not self.step_sizes:
            raise ConfigError("oracle beta_schedule and step_sizes must be non-empty")
        if len(self.beta_schedule) != len(self.step_sizes):
            raise ConfigError(f"oracle needs one step size per beta stage, got {len(self.step_sizes)} "
                              f"for {len(self.beta_schedule)}")
        if any(b <= 0 for b in self.beta_schedule):
            raise ConfigError("oracle beta values must be > 0")
        if self.restarts < 1:
            raise ConfigError(f"oracle restarts must be >= 1, got {self.restarts}")
        if self.acceptance_margin < 0:
            raise ConfigError(f"oracle acceptance_margin must be >= 0, got {self.acceptance_margin}")
        if self.max_iterations < 1 or self.check_every < 1 or self.resample_budget < 1:
            raise ConfigError("oracle max_iterations, check_every and resample_budget must be >= 1")
        if not 0.0 <= self.success_floor <= 1.0:
            raise ConfigError(f"oracle success_floor must lie in [0, 1], got {self.success_floor}")


@dataclass(frozen=True)
class PlanFailure:
    """No verified trajectory after all restarts"""

    best_robustness: float
    restarts: int

    def __bool__(self) -> bool:
        return False

    def __str__(self) -> str:
        return f"no verified trajectory after {self.restarts} restarts (best robustness {self.best_robustness:.4f})"


def _differentiable_states(x0: State, u: de.Tensor, env: EnvironmentSpec) -> Tuple[de.Tensor, de.Tensor]:
    """Roll the double integrator forward on the tape; actions are a_max * tanh(u)"""
    actions = de.scale(de.tanh(u), env.a_max)
    dt = env.dt
    position = de.constant(np.asarray([[x0[0], x0[1]]]))
    velocity = de.constant(np.asarray([[x0[2], x0[3]]]))
    rows = [de.constant(np.asarray([tuple(x0)]))]
    for t in range(u.shape[0]):
        a = de.slice_axis(actions, 0, t, t + 1)
        position = de.add(de.add(position, de.scale(velocity, dt)), de.scale(a, 0.5 * dt * dt))
        velocity = de.clip(de.add(velocity, de.scale(a, dt)), -env.v_max, env.v_max)
        rows.append(de.concat([position, velocity], axis=1))
    return de.concat(rows, axis=0), actions


def _objective(f: Formula, x0: State, u: de.Tensor, env: EnvironmentSpec, beta: float,
               action_weight: float) -> de.Tensor:
    states, actions = _differentiable_states(x0, u, env)
    rho = smooth_robustness_tensor(f, states, env, beta)
    effort = de.scale(de.sum(de.mul(actions, actions)), action_weight)
    return de.sub(rho, effort)


def _realize(f: Formula, x0: State, u: np.ndarray, env: EnvironmentSpec) -> Tuple[np.ndarray, np.ndarray, float, bool]:
    actions = env.a_max * np.tanh(u)
    states = simulate(x0, actions, env)
    return states, actions, robustness(f, states, 0, env), satisfies(f, states, 0, env)


def plan(f: Formula, x0: State, env: EnvironmentSpec, cfg: OracleConfig, seed: int,
         spec_id: str = '') -> Union[Trajectory, PlanFailure]:
    """
    Search for actions whose trajectory satisfies f from x0.

    Restart 0 starts from zero actions, later restarts from seeded Gaussian
    noise. Every check_every iterations the current actions are rolled out
    with the exact dynamics and checked with the exact monitor.

    Returns:
        A verified Trajectory, or a PlanFailure carrying the best exact
        robustness seen
    """
    n_steps = horizon(f)
    if n_steps < 1:
        raise HorizonError(f"formula horizon must be >= 1 to plan, got {n_steps}")
    validate_regions(f, env)
    rng = np.random.default_rng(seed)
    best = -np.inf

    for restart in range(cfg.restarts):
        if restart == 0:
            u0 = np.zeros((n_steps, ACTION_DIM))
        else:
            u0 = rng.normal(0.0, cfg.init_scale, size=(n_steps, ACTION_DIM))
        u = de.parameter(u0.astype(de.get_default_dtype()), name='u')
        optimizer = de.AdamW([u], lr=cfg.step_sizes[0])

        states, actions, rho, ok = _realize(f, x0, u.data, env)
        best = max(best, rho)
        if ok and rho > cfg.acceptance_margin:
            return Trajectory(states, actions, spec_id, rho)

        for beta, lr in zip(cfg.beta_schedule, cfg.step_sizes):
            for iteration in range(1, cfg.max_iterations + 1):
                optimizer.zero_grad()
                loss = de.scale(_objective(f, x0, u, env, beta, cfg.action_weight), -1.0)
                loss.backward()
                optimizer.step(lr)
                if iteration % cfg.check_every and iteration != cfg.max_iterations:
                    continue
                states, actions, rho, ok = _realize(f, x0, u.data, env)
                best = max(best, rho)
                if ok and rho > cfg.acceptance_margin:
                    logger.debug(f"plan: verified at restart {restart}, beta {beta}, iteration {iteration} "
                                 f"(robustness {rho:.4f})")
                    return Trajectory(states, actions, spec_id, rho)
        logger.debug(f"plan: restart {restart} ended with best robustness {best:.4f}")

    return PlanFailure(best_robustness=float(best), restarts=cfg.restarts)


# dataset records

def derive_seed(seed: int, spec_id: str, index: int, attempt: int = 0) -> int:
    """Per-record seed from the run seed; independent of worker scheduling"""
    digest = hashlib.sha256(f"{seed}:{spec_id}:{index}:{attempt}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') & ((1 << 63) - 1)


@dataclass
class DatasetRecord:
    spec_id: str
    tokens: List[str]
    states: np.ndarray
    actions: np.ndarray
    rho: float
    seed: int

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory(self.states, self.actions, self.spec_id, self.rho)

    def to_dict(self) -> dict:
        return {
            'spec_id': self.spec_id,
            'tokens': list(self.tokens),
            'states': np.asarray(self.states, dtype=np.float64).tolist(),
            'actions': np.asarray(self.actions, dtype=np.float64).tolist(),
            'rho': float(self.rho),
            'seed': int(self.seed),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'DatasetRecord':
        return cls(spec_id=str(data['spec_id']), tokens=[str(t) for t in data['tokens']],
                   states=np.asarray(data['states'], dtype=np.float64),
                   actions=np.asarray(data['actions'], dtype=np.float64),
                   rho=float(data['rho']), seed=int(data['seed']))


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)
    os.replace(tmp_path, path)


def write_dataset(path: str, records: Iterable[DatasetRecord]) -> int:
    """JSON-Lines, one record per line, written atomically; returns the record count"""
    lines = [json.dumps(r.to_dict()) for r in records]
    _atomic_write_text(path, ''.join(line + '\n' for line in lines))
    return len(lines)


def read_dataset(path: str) -> List[DatasetRecord]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(DatasetRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise DatasetVerificationError(f"{path}:{line_no}: malformed record ({e})") from e
    return records


@dataclass
class VerificationReport:
    n_records: int
    failures: List[Tuple[int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def raise_for_failures(self) -> None:
        if self.failures:
            line, reason = self.failures[0]
            raise DatasetVerificationError(
                f"{len(self.failures)} of {self.n_records} records failed verification "
                f"(first: record {line}: {reason})", self.failures)


def _audit_record(record: DatasetRecord, env: EnvironmentSpec, margin: float) -> Optional[str]:
    try:
        f = parse_tokens(record.tokens)
    except PastelError as e:
        return f"tokens do not parse ({e})"
    n_steps = horizon(f)
    if record.actions.shape != (n_steps, ACTION_DIM) or record.states.shape != (n_steps + 1, STATE_DIM):
        return (f"shape mismatch: states {record.states.shape}, actions {record.actions.shape} "
                f"for horizon {n_steps}")
    if not (np.all(np.isfinite(record.states)) and np.all(np.isfinite(record.actions))):
        return "non-finite values"
    if np.any(np.abs(record.actions) > env.a_max):
        return f"action exceeds a_max ({np.max(np.abs(record.actions)):.6f} > {env.a_max})"
    for t in range(n_steps):
        if tuple(record.states[t + 1]) != step(record.states[t], record.actions[t], env):
            return f"dynamics inconsistent at step {t}"
    try:
        rho = robustness(f, record.states, 0, env)
        ok = satisfies(f, record.states, 0, env)
    except PastelError as e:
        return f"monitor failed ({e})"
    if not ok:
        return "trajectory does not satisfy its specification"
    if not rho > margin:
        return f"robustness {rho:.6f} not above margin {margin}"
    if abs(rho - record.rho) > 1e-9:
        return f"stored robustness {record.rho} differs from recomputed {rho}"
    return None


def verify_records(records: Sequence[DatasetRecord], env: EnvironmentSpec,
                   acceptance_margin: float = 0.0) -> VerificationReport:
    """Independent audit: re-parse, re-simulate and re-monitor every record"""
    report = VerificationReport(n_records=len(records))
    for line_no, record in enumerate(records, start=1):
        reason = _audit_record(record, env, acceptance_margin)
        if reason is not None:
            report.failures.append((line_no, reason))
            logger.error(f"record {line_no} ({record.spec_id}): {reason}")
    logger.info(f"Verified {len(records)} records, {len(report.failures)} failures")
    return report


def verify_dataset(path: str, env: EnvironmentSpec, acceptance_margin: float = 0.0) -> VerificationReport:
    return verify_records(read_dataset(path), env, acceptance_margin)


# generation

@dataclass(frozen=True)
class _Task:
    spec_id: str
    formula: Formula
    index: int
    seed: int
    env: EnvironmentSpec
    cfg: OracleConfig
    h_max: int


def _run_task(task: _Task) -> Tuple[_Task, Optional[DatasetRecord], float, int]:
    best = -np.inf
    for attempt in range(task.cfg.resample_budget):
        record_seed = derive_seed(task.seed, task.spec_id, task.index, attempt)
        x0 = sample_initial_state(record_seed, task.env)
        result = plan(task.formula, x0, task.env, task.cfg, record_seed, task.spec_id)
        if isinstance(result, Trajectory):
            record = DatasetRecord(spec_id=task.spec_id,
                                   tokens=linearize(task.formula, h_max=task.h_max),
                                   states=result.states, actions=result.actions,
                                   rho=result.robustness_at_generation, seed=record_seed)
            return task, record, result.robustness_at_generation, attempt + 1
        best = max(best, result.best_robustness)
        logger.warning(f"{task.spec_id}[{task.index}] attempt {attempt}: {result}; resampling")
    return task, None, float(best), task.cfg.resample_budget


def summarize_records(records: Sequence[DatasetRecord], requested: Mapping[str, int],
                      attempts: Mapping[str, int]) -> dict:
    per_spec = {}
    for spec_id, count in requested.items():
        rhos = np.asarray([r.rho for r in records if r.spec_id == spec_id], dtype=np.float64)
        per_spec[spec_id] = {
            'requested': count,
            'generated': int(rhos.size),
            'success_rate': float(rhos.size / count) if count else 0.0,
            'attempts': int(attempts.get(spec_id, 0)),
            'robustness': {
                'min': float(rhos.min()) if rhos.size else None,
                'median': float(np.median(rhos)) if rhos.size else None,
                'max': float(rhos.max()) if rhos.size else None,
                'mean': float(rhos.mean()) if rhos.size else None,
            },
        }
    return {'format_version': DATASET_FORMAT_VERSION, 'per_spec': per_spec}


def summary_path(dataset_path: str) -> str:
    root, _ = os.path.splitext(dataset_path)
    return f"{root}.summary.json"


def generate_dataset(specs: Mapping[str, Formula], per_spec_count: int, env: EnvironmentSpec,
                     cfg: OracleConfig, seed: int, out_path: str, jobs: int = 1,
                     h_max: int = 32) -> dict:
    """
    Plan per_spec_count verified trajectories for every specification.

    Records are written in (spec, index) order whatever the worker count, so
    the same seed always yields a byte-identical file.

    Returns:
        The summary report (also written next to the dataset)

    Raises:
        DatasetGenerationError: a specification's success rate is below cfg.success_floor
    """
    if per_spec_count < 1:
        raise ConfigError(f"per_spec_count must be >= 1, got {per_spec_count}")
    for spec_id, f in specs.items():
        validate_regions(f, env)
        linearize(f, h_max=h_max)

    tasks = [_Task(spec_id, f, index, seed, env, cfg, h_max)
             for spec_id, f in specs.items() for index in range(per_spec_count)]
    logger.info(f"Generating {len(tasks)} trajectories for {len(specs)} specifications with {jobs} worker(s)")

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_run_task(task) for task in tasks]

    records = [record for _, record, _, _ in results if record is not None]
    attempts: Dict[str, int] = {}
    for task, _, _, used in results:
        attempts[task.spec_id] = attempts.get(task.spec_id, 0) + used
    summary = summarize_records(records, {spec_id: per_spec_count for spec_id in specs}, attempts)
    summary['seed'] = int(seed)

    for spec_id, stats in summary['per_spec'].items():
        logger.info(f"{spec_id}: {stats['generated']}/{stats['requested']} generated "
                    f"(success rate {stats['success_rate']:.2f})")
    below = {s: v['success_rate'] for s, v in summary['per_spec'].items() if v['success_rate'] < cfg.success_floor}
    if below:
        details = ', '.join(f"{s}={rate:.2f}" for s, rate in below.items())
        raise DatasetGenerationError(f"success rate below floor {cfg.success_floor}: {details}")

    write_dataset(out_path, records)
    _atomic_write_text(summary_path(out_path), json.dumps(summary, indent=2, sort_keys=True) + '\n')
    logger.info(f"Wrote {len(records)} records to {out_path}")
    return summary

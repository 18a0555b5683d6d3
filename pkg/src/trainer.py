"""
Supervised training of the trajectory transformer on a verified dataset.
"""

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import diff_engine as de
from errors import (ConfigError, DatasetVerificationError, EmptySplitError, HorizonError,
                    IncompatibleCheckpointError, TrainingDivergedError)
from oracle_planner import DatasetRecord, read_dataset, verify_records
from pastel_model import (ModelConfig, PastelModel, compute_loss, make_batch, save_checkpoint,
                          tokenwise_spec_loss)
from planar_env import EnvironmentSpec
from stl_core import Formula, horizon, parse_tokens

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ('epoch', 'split', 'L_state', 'L_action', 'L_spec', 'L_total', 'wall_time')
CHECKPOINT_NAME = 'checkpoint.bin'
METRICS_NAME = 'metrics.csv'
SPLIT_AUDIT_NAME = 'split.json'


@dataclass(frozen=True)
class TrainConfig:
    dataset_path: str = 'runs/data/dataset.jsonl'
    out_dir: str = 'runs/train'
    batch_size: int = 32
    epochs: int = 50
    lr: float = 3e-4
    warmup_fraction: float = 0.05
    min_lr_ratio: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 10
    ablation: bool = False
    train_fraction: float = 0.9
    dtype: str = 'float32'

    def __post_init__(self):
        object.__setattr__(self, 'betas', tuple(float(b) for b in self.betas))
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.batch_size < 1 or self.epochs < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size, epochs and checkpoint_every must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.dtype not in ('float32', 'float64'):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


def trajectory_hash(record: DatasetRecord) -> str:
    digest = hashlib.sha256(record.spec_id.encode('utf-8'))
    digest.update(np.ascontiguousarray(record.states, dtype='<f8').tobytes())
    digest.update(np.ascontiguousarray(record.actions, dtype='<f8').tobytes())
    return digest.hexdigest()


@dataclass
class SplitAudit:
    train_hashes: List[str]
    val_hashes: List[str]

    @property
    def overlap(self) -> List[str]:
        return sorted(set(self.train_hashes) & set(self.val_hashes))

    def to_dict(self) -> dict:
        return {'train': self.train_hashes, 'val': self.val_hashes, 'overlap': self.overlap}


def split_records(records: Sequence[DatasetRecord], train_fraction: float,
                  seed: int) -> Tuple[List[DatasetRecord], List[DatasetRecord], SplitAudit]:
    """
    Split by whole trajectories, per specification, with a seeded permutation.

    Raises:
        DatasetVerificationError: the same trajectory ended up on both sides
    """
    rng = np.random.default_rng(seed)
    by_spec: Dict[str, List[DatasetRecord]] = {}
    for record in records:
        by_spec.setdefault(record.spec_id, []).append(record)
    train, val = [], []
    for spec_id in sorted(by_spec):
        group = by_spec[spec_id]
        order = rng.permutation(len(group))
        n_train = int(round(train_fraction * len(group)))
        if len(group) > 1:
            n_train = min(max(n_train, 1), len(group) - 1)
        else:
            n_train = len(group)
        train.extend(group[i] for i in order[:n_train])
        val.extend(group[i] for i in order[n_train:])
    audit = SplitAudit([trajectory_hash(r) for r in train], [trajectory_hash(r) for r in val])
    if audit.overlap:
        raise DatasetVerificationError(f"{len(audit.overlap)} trajectories appear in both train and validation splits")
    return train, val, audit


def make_batches(records: Sequence[DatasetRecord], batch_size: int,
                 rng: Optional[np.random.Generator] = None) -> List[Tuple[str, List[DatasetRecord]]]:
    """Spec-bucketed batches; shuffled within and across buckets when rng is given"""
    by_spec: Dict[str, List[DatasetRecord]] = {}
    for record in records:
        by_spec.setdefault(record.spec_id, []).append(record)
    batches = []
    for spec_id in sorted(by_spec):
        group = by_spec[spec_id]
        if rng is not None:
            group = [group[i] for i in rng.permutation(len(group))]
        for start in range(0, len(group), batch_size):
            batches.append((spec_id, group[start:start + batch_size]))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def learning_rate(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to min_lr_ratio * lr"""
    warmup = max(1, int(round(cfg.warmup_fraction * total_steps)))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    progress = min(1.0, (step - warmup) / max(1, total_steps - warmup))
    return cfg.lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def spec_formulas(records: Sequence[DatasetRecord]) -> Dict[str, Formula]:
    """spec_id -> formula, re-parsed from the stored canonical tokens"""
    formulas: Dict[str, Formula] = {}
    tokens_by_spec: Dict[str, List[str]] = {}
    for record in records:
        known = tokens_by_spec.setdefault(record.spec_id, list(record.tokens))
        if known != list(record.tokens):
            raise DatasetVerificationError(f"spec_id {record.spec_id!r} carries different token streams")
    for spec_id, tokens in tokens_by_spec.items():
        formulas[spec_id] = parse_tokens(tokens)
    return formulas


def check_dataset_compatible(model: PastelModel, records: Sequence[DatasetRecord]) -> None:
    vocabulary = model.vocabulary
    for spec_id, f in spec_formulas(records).items():
        tokens = next(r.tokens for r in records if r.spec_id == spec_id)
        unknown = sorted({tok for tok in tokens if tok not in vocabulary})
        if unknown:
            raise IncompatibleCheckpointError(f"spec {spec_id!r} uses tokens outside the model vocabulary: {unknown}")
        if horizon(f) > model.cfg.h_max:
            raise HorizonError(f"spec {spec_id!r} horizon {horizon(f)} exceeds H_max {model.cfg.h_max}")


def evaluate_losses(model: PastelModel, records: Sequence[DatasetRecord], batch_size: int = 32) -> Dict[str, float]:
    """
    Loss components over a split without touching parameters.

    Each batch is reduced exactly as in training, then batch values are
    averaged with trajectory-count weights.

    Raises:
        EmptySplitError: records is empty
        IncompatibleCheckpointError: the model cannot encode the split's specifications
    """
    if not records:
        raise EmptySplitError("cannot evaluate losses on an empty split")
    check_dataset_compatible(model, records)
    formulas = spec_formulas(records)
    totals = {'L_state': 0.0, 'L_action': 0.0, 'L_spec': 0.0, 'L_spec_tokenwise': 0.0}
    count = 0
    with de.no_grad():
        for spec_id, group in make_batches(records, batch_size):
            spec = model.tokenize_spec(formulas[spec_id])
            batch = make_batch([r.trajectory for r in group])
            output = model.forward(batch, spec, training=False)
            loss = compute_loss(output, batch, spec)
            weight = batch.size
            totals['L_state'] += weight * loss.l_state
            totals['L_action'] += weight * loss.l_action
            totals['L_spec'] += weight * loss.l_spec
            totals['L_spec_tokenwise'] += weight * tokenwise_spec_loss(output, spec)
            count += weight
    metrics = {key: value / count for key, value in totals.items()}
    metrics['L_total'] = metrics['L_state'] + metrics['L_action'] + metrics['L_spec']
    metrics['n_trajectories'] = float(count)
    return metrics


@dataclass
class TrainResult:
    model: PastelModel
    checkpoint_path: str
    metrics_path: str
    history: List[Dict[str, float]] = field(default_factory=list)
    audit: Optional[SplitAudit] = None


class MetricsWriter:
    """Append-only CSV of per-epoch loss components"""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            csv.writer(f).writerow(METRICS_COLUMNS)

    def append(self, epoch: int, split: str, metrics: Mapping[str, float], wall_time: float) -> dict:
        row = {'epoch': epoch, 'split': split, 'L_state': metrics['L_state'], 'L_action': metrics['L_action'],
               'L_spec': metrics['L_spec'], 'L_total': metrics['L_total'], 'wall_time': wall_time}
        with open(self.path, 'a', newline='', encoding='utf-8') as f:
            csv.writer(f).writerow([row['epoch'], row['split']]
                                   + [repr(float(row[c])) for c in METRICS_COLUMNS[2:]])
        return row


def read_metrics(path: str) -> List[Dict[str, str]]:
    with open(path, 'r', newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))


def train(cfg: TrainConfig, model_cfg: ModelConfig, env: EnvironmentSpec,
          records: Optional[Sequence[DatasetRecord]] = None) -> TrainResult:
    """
    Train from scratch and write checkpoint, metrics and split audit to cfg.out_dir.

    Args:
        cfg: optimization settings
        model_cfg: architecture; its ablation flag is overridden by cfg.ablation
        env: world the dataset was generated in (used for the load-time audit)
        records: pre-loaded records (read from cfg.dataset_path when None)

    Raises:
        DatasetVerificationError: dataset fails the audit
        TrainingDivergedError: non-finite loss (the last saved checkpoint is kept)
    """
    with de.default_dtype(cfg.dtype):
        return _train(cfg, model_cfg, env, records)


def _train(cfg: TrainConfig, model_cfg: ModelConfig, env: EnvironmentSpec,
           records: Optional[Sequence[DatasetRecord]]) -> TrainResult:
    if records is None:
        records = read_dataset(cfg.dataset_path)
    verify_records(records, env).raise_for_failures()
    train_records, val_records, audit = split_records(records, cfg.train_fraction, cfg.seed)
    logger.info(f"Split {len(records)} trajectories into {len(train_records)} train / {len(val_records)} validation")

    model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), 'ablation': cfg.ablation, 'seed': cfg.seed})
    model = PastelModel(model_cfg)
    check_dataset_compatible(model, records)
    formulas = spec_formulas(records)

    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, SPLIT_AUDIT_NAME), 'w', encoding='utf-8') as f:
        json.dump(audit.to_dict(), f, indent=2)
    checkpoint_path = os.path.join(cfg.out_dir, CHECKPOINT_NAME)
    writer = MetricsWriter(os.path.join(cfg.out_dir, METRICS_NAME))

    optimizer = de.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps,
                         weight_decay=cfg.weight_decay, decay_filter=lambda p: p.name.endswith('.weight'))
    data_rng = np.random.default_rng([cfg.seed, 0])
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    steps_per_epoch = len(make_batches(train_records, cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    history: List[Dict[str, float]] = []

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        for spec_id, group in make_batches(train_records, cfg.batch_size, data_rng):
            optimizer.zero_grad()
            spec = model.tokenize_spec(formulas[spec_id])
            batch = make_batch([r.trajectory for r in group])
            output = model.forward(batch, spec, training=True, rng=dropout_rng)
            loss = compute_loss(output, batch, spec)
            if not math.isfinite(loss.l_total):
                kept = checkpoint_path if os.path.exists(checkpoint_path) else 'none'
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}; last good checkpoint: {kept}")
            loss.total.backward()
            optimizer.step(learning_rate(step, total_steps, cfg))
            step += 1

        train_metrics = evaluate_losses(model, train_records, cfg.batch_size)
        wall_time = time.perf_counter() - started
        history.append(writer.append(epoch, 'train', train_metrics, wall_time))
        message = f"epoch {epoch}/{cfg.epochs}: train L_total={train_metrics['L_total']:.5f}"
        if val_records:
            val_metrics = evaluate_losses(model, val_records, cfg.batch_size)
            history.append(writer.append(epoch, 'val', val_metrics, wall_time))
            message += f", val L_total={val_metrics['L_total']:.5f}"
        logger.info(message)

        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            save_checkpoint(model, checkpoint_path, extra={'epoch': epoch, 'train_config': asdict(cfg)})

    return TrainResult(model=model, checkpoint_path=checkpoint_path, metrics_path=writer.path,
                       history=history, audit=audit)

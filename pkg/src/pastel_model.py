"""
Specification-conditioned causal trajectory transformer.

Each timestep contributes a (SPEC, STATE, ACTION) triplet to a 3N-long
sequence. SPEC is the pooled specification embedding repeated at every
timestep; a causal decoder runs over the sequence, the action head reads the
STATE positions and the state head reads the ACTION positions. A final
cross-attention layer lets the projected specification tokens query the
decoder outputs; its pooled result feeds the specification relevance loss.

With ``ablation=True`` the model is the spec-free baseline: a learned null
token replaces the SPEC positions and there is no cross-attention.
"""

import hashlib
import io
import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import diff_engine as de
from errors import (ConfigError, HorizonError, IncompatibleCheckpointError, RolloutError,
                    SchemaVersionError, ShapeError)
from planar_env import ACTION_DIM, STATE_DIM, EnvironmentSpec, State, Trajectory, clamp_action, step
from stl_core import DEFAULT_H_MAX, Formula, Vocabulary, horizon, linearize

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'PSTL'
CHECKPOINT_FORMAT_VERSION = 1
ROLLOUT_MODES = ('dynamics', 'open-loop')
COSINE_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 3
    d_tok: int = 32
    ff_mult: int = 4
    h_max: int = DEFAULT_H_MAX
    dropout: float = 0.1
    ablation: bool = False
    regions: Tuple[str, ...] = ('O1', 'R1', 'R2', 'R3')
    state_center: Tuple[float, ...] = (5.0, 5.0, 0.0, 0.0)
    state_scale: Tuple[float, ...] = (5.0, 5.0, 2.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'regions', tuple(sorted(self.regions)))
        object.__setattr__(self, 'state_center', tuple(float(v) for v in self.state_center))
        object.__setattr__(self, 'state_scale', tuple(float(v) for v in self.state_scale))
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model ({self.d_model}) must be a positive multiple of n_heads ({self.n_heads})")
        if self.n_layers < 1 or self.d_tok < 1 or self.ff_mult < 1 or self.h_max < 1:
            raise ConfigError("n_layers, d_tok, ff_mult and h_max must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if len(self.state_center) != STATE_DIM or len(self.state_scale) != STATE_DIM:
            raise ConfigError("state_center and state_scale need one value per state dimension")
        if any(s <= 0 for s in self.state_scale):
            raise ConfigError("state_scale values must be > 0")

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.regions, self.h_max)

    @classmethod
    def for_environment(cls, env: EnvironmentSpec, **overrides) -> 'ModelConfig':
        """Region names and state normalization taken from the world"""
        ws = env.workspace
        cx, cy = ws.center
        derived = dict(regions=env.region_names,
                       state_center=(cx, cy, 0.0, 0.0),
                       state_scale=(0.5 * (ws.xhi - ws.xlo), 0.5 * (ws.yhi - ws.ylo), env.v_max, env.v_max))
        derived.update(overrides)
        return cls(**derived)

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ('regions', 'state_center', 'state_scale'):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ModelConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode('utf-8')).hexdigest()


class ParameterStore:
    """Ordered, named parameters with seeded initialization"""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: 'OrderedDict[str, de.Tensor]' = OrderedDict()

    def add(self, name: str, shape: Tuple[int, ...], init: str = 'lecun', std: float = 0.02) -> de.Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if init == 'lecun':
            value = self.rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        elif init == 'normal':
            value = self.rng.normal(0.0, std, size=shape)
        elif init == 'zeros':
            value = np.zeros(shape)
        elif init == 'ones':
            value = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        tensor = de.parameter(value, name=name)
        self.params[name] = tensor
        return tensor


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.weight = store.add(f"{name}.weight", (d_in, d_out), 'lecun')
        self.bias = store.add(f"{name}.bias", (d_out,), 'zeros') if bias else None

    def __call__(self, x: de.Tensor) -> de.Tensor:
        out = de.matmul(x, self.weight)
        if self.bias is not None:
            out = de.add(out, de.expand(self.bias, out.shape))
        return out


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, d: int):
        self.gamma = store.add(f"{name}.gamma", (d,), 'ones')
        self.beta = store.add(f"{name}.beta", (d,), 'zeros')

    def __call__(self, x: de.Tensor) -> de.Tensor:
        return de.layer_norm(x, self.gamma, self.beta)


class MLP:
    """Linear -> gelu -> Linear"""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(store, f"{name}.fc1", d_in, d_hidden)
        self.fc2 = Linear(store, f"{name}.fc2", d_hidden, d_out)

    def __call__(self, x: de.Tensor) -> de.Tensor:
        return self.fc2(de.gelu(self.fc1(x)))


class MultiHeadAttention:
    """Scaled dot-product attention over (B, L, d) inputs; the key projection has no bias"""

    def __init__(self, store: ParameterStore, name: str, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.query = Linear(store, f"{name}.query", d_model, d_model)
        self.key = Linear(store, f"{name}.key", d_model, d_model, bias=False)
        self.value = Linear(store, f"{name}.value", d_model, d_model)
        self.out = Linear(store, f"{name}.out", d_model, d_model)

    def _heads(self, x: de.Tensor) -> de.Tensor:
        b, length, _ = x.shape
        return de.transpose(de.reshape(x, (b, length, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, queries: de.Tensor, keys_values: de.Tensor,
                 mask: Optional[np.ndarray] = None) -> Tuple[de.Tensor, de.Tensor]:
        b, lq, d = queries.shape
        q = self._heads(self.query(queries))
        k = self._heads(self.key(keys_values))
        v = self._heads(self.value(keys_values))
        scores = de.scale(de.matmul(q, de.transpose(k)), 1.0 / np.sqrt(self.d_head))
        weights = de.softmax(scores, axis=-1, mask=mask)
        context = de.reshape(de.transpose(de.matmul(weights, v), (0, 2, 1, 3)), (b, lq, d))
        return self.out(context), weights


class DecoderBlock:
    """Pre-norm causal self-attention block"""

    def __init__(self, store: ParameterStore, name: str, cfg: ModelConfig):
        self.ln1 = LayerNorm(store, f"{name}.ln1", cfg.d_model)
        self.attn = MultiHeadAttention(store, f"{name}.attn", cfg.d_model, cfg.n_heads)
        self.ln2 = LayerNorm(store, f"{name}.ln2", cfg.d_model)
        self.mlp = MLP(store, f"{name}.mlp", cfg.d_model, cfg.ff_mult * cfg.d_model, cfg.d_model)
        self.dropout = cfg.dropout

    def __call__(self, x: de.Tensor, mask: np.ndarray, training: bool,
                 rng: Optional[np.random.Generator]) -> Tuple[de.Tensor, de.Tensor]:
        h = self.ln1(x)
        attended, weights = self.attn(h, h, mask)
        x = de.add(x, de.dropout(attended, self.dropout, rng, training))
        x = de.add(x, de.dropout(self.mlp(self.ln2(x)), self.dropout, rng, training))
        return x, weights


@dataclass
class SpecEncoding:
    """Linearized specification and its embeddings"""

    tokens: List[str]
    ids: np.ndarray
    embeddings: de.Tensor   # (L, d_model)
    pooled: de.Tensor       # (d_model,), mean of the rows

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass
class TrajectoryBatch:
    """Trajectories of one specification, hence one horizon"""

    states: np.ndarray      # (B, N+1, 4)
    actions: np.ndarray     # (B, N, 2)
    spec_id: str = ''

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def size(self) -> int:
        return self.actions.shape[0]


def make_batch(trajectories: Sequence[Trajectory]) -> TrajectoryBatch:
    if not trajectories:
        raise ShapeError("cannot batch zero trajectories")
    horizons = {t.horizon for t in trajectories}
    if len(horizons) != 1:
        raise HorizonError(f"horizon mismatch within batch: {sorted(horizons)}")
    spec_ids = {t.spec_id for t in trajectories}
    return TrajectoryBatch(states=np.stack([t.states for t in trajectories]),
                           actions=np.stack([t.actions for t in trajectories]),
                           spec_id=trajectories[0].spec_id if len(spec_ids) == 1 else '')


@dataclass
class ModelOutput:
    actions: de.Tensor                    # (B, N, 2) from STATE positions
    next_states: de.Tensor                # (B, N, 4) from ACTION positions
    hidden: de.Tensor                     # (B, 3N, d) decoder outputs
    attention: List[np.ndarray]           # per layer (B, H, 3N, 3N)
    cross: Optional[de.Tensor] = None     # (B, L, d)
    pooled_cross: Optional[de.Tensor] = None  # (B, d)
    cross_attention: Optional[np.ndarray] = None  # (B, H, L, 3N)


@dataclass
class LossBreakdown:
    total: de.Tensor
    l_state: float
    l_action: float
    l_spec: float

    @property
    def l_total(self) -> float:
        return self.total.item()

    def as_dict(self) -> Dict[str, float]:
        return {'L_state': self.l_state, 'L_action': self.l_action, 'L_spec': self.l_spec,
                'L_total': self.l_total}


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def sequence_labels(n_steps: int) -> List[str]:
    return [f"{kind}_{t}" for t in range(n_steps) for kind in ('SPEC', 'STATE', 'ACTION')]


class PastelModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.vocabulary = cfg.vocabulary
        store = ParameterStore(cfg.seed)
        d = cfg.d_model
        self.token_embedding = store.add('spec.token_embedding', (len(self.vocabulary), cfg.d_tok), 'normal', 1.0)
        self.spec_projection = MLP(store, 'spec.projection', cfg.d_tok, d, d)
        self.null_token = store.add('spec.null_token', (d,), 'normal', 1.0)
        self.state_encoder = MLP(store, 'encoder.state', STATE_DIM, d, d)
        self.action_encoder = MLP(store, 'encoder.action', ACTION_DIM, d, d)
        self.position_embedding = store.add('encoder.position', (3 * cfg.h_max, d), 'normal', 0.02)
        self.blocks = [DecoderBlock(store, f"block{i}", cfg) for i in range(cfg.n_layers)]
        self.ln_final = LayerNorm(store, 'ln_final', d)
        if not cfg.ablation:
            self.cross_attn = MultiHeadAttention(store, 'cross.attn', d, cfg.n_heads)
            self.ln_cross = LayerNorm(store, 'cross.ln', d)
        self.action_head = Linear(store, 'head.action', d, ACTION_DIM)
        self.state_head = Linear(store, 'head.state', d, STATE_DIM)
        self.params = store.params
        self._center = np.asarray(cfg.state_center)
        self._scale = np.asarray(cfg.state_scale)

    def parameters(self) -> List[de.Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> List[Tuple[str, de.Tensor]]:
        return list(self.params.items())

    def state_arrays(self) -> 'OrderedDict[str, np.ndarray]':
        return OrderedDict((name, p.data) for name, p in self.params.items())

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise IncompatibleCheckpointError(f"parameter mismatch (missing {missing}, unexpected {extra})")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise IncompatibleCheckpointError(
                    f"parameter {name} has shape {arrays[name].shape}, expected {p.shape}")
            p.data = np.asarray(arrays[name]).astype(de.get_default_dtype())

    def fingerprint(self) -> str:
        """SHA-256 over the config and every parameter's bytes"""
        digest = hashlib.sha256(self.cfg.fingerprint().encode('ascii'))
        for name, p in self.params.items():
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(p.data, dtype='<f8').tobytes())
        return digest.hexdigest()

    def tokenize_spec(self, f: Formula) -> SpecEncoding:
        n_steps = horizon(f)
        if n_steps > self.cfg.h_max:
            raise HorizonError(f"formula horizon {n_steps} exceeds H_max {self.cfg.h_max}")
        tokens = linearize(f, 'in_order', 'symbol', h_max=self.cfg.h_max)
        ids = self.vocabulary.encode(tokens)
        embeddings = self.spec_projection(de.gather(self.token_embedding, ids))
        return SpecEncoding(tokens=tokens, ids=ids, embeddings=embeddings, pooled=de.mean(embeddings, axis=0))

    def _normalize(self, states: np.ndarray) -> np.ndarray:
        return (states - self._center) / self._scale

    def forward(self, batch: TrajectoryBatch, spec: SpecEncoding, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> ModelOutput:
        b, n_steps = batch.actions.shape[0], batch.actions.shape[1]
        if batch.states.shape != (b, n_steps + 1, STATE_DIM) and batch.states.shape != (b, n_steps, STATE_DIM):
            raise ShapeError(f"states {batch.states.shape} do not match actions {batch.actions.shape}")
        if n_steps < 1 or n_steps > self.cfg.h_max:
            raise HorizonError(f"batch horizon {n_steps} outside [1, {self.cfg.h_max}]")
        d = self.cfg.d_model
        current = batch.states[:, :n_steps]

        state_tokens = self.state_encoder(de.constant(self._normalize(current)))
        action_tokens = self.action_encoder(de.constant(batch.actions))
        spec_row = self.null_token if self.cfg.ablation else spec.pooled
        spec_tokens = de.expand(de.reshape(spec_row, (1, 1, 1, d)), (b, n_steps, 1, d))
        triplets = de.concat([spec_tokens,
                              de.reshape(state_tokens, (b, n_steps, 1, d)),
                              de.reshape(action_tokens, (b, n_steps, 1, d))], axis=2)
        length = 3 * n_steps
        x = de.reshape(triplets, (b, length, d))
        positions = de.gather(self.position_embedding, np.arange(length))
        x = de.add(x, de.expand(positions, (b, length, d)))
        x = de.dropout(x, self.cfg.dropout, rng, training)

        mask = causal_mask(length)
        attention = []
        for block in self.blocks:
            x, weights = block(x, mask, training, rng)
            attention.append(weights.data.copy())
        hidden = self.ln_final(x)

        at_state = de.slice_axis(hidden, 1, 1, None, 3)
        at_action = de.slice_axis(hidden, 1, 2, None, 3)
        actions = self.action_head(at_state)
        delta = de.mul(self.state_head(at_action), de.constant(np.broadcast_to(self._scale, (b, n_steps, STATE_DIM))))
        next_states = de.add(de.constant(current), delta)

        output = ModelOutput(actions=actions, next_states=next_states, hidden=hidden, attention=attention)
        if not self.cfg.ablation:
            queries = de.expand(de.reshape(spec.embeddings, (1, spec.length, d)), (b, spec.length, d))
            attended, cross_weights = self.cross_attn(queries, hidden)
            output.cross = self.ln_cross(attended)
            output.pooled_cross = de.mean(output.cross, axis=1)
            output.cross_attention = cross_weights.data.copy()
        return output


# losses

def regression_loss(pred: de.Tensor, target: de.Tensor) -> de.Tensor:
    """MSE + MAE over every element"""
    diff = de.sub(pred, target)
    return de.add(de.mean(de.mul(diff, diff)), de.mean(de.absolute(diff)))


def cosine_rows(a: de.Tensor, b: de.Tensor, eps: float = COSINE_EPS) -> de.Tensor:
    """Row-wise cosine similarity along the last axis; the norm product is clipped at eps"""
    dot = de.sum(de.mul(a, b), axis=-1)
    norms = de.mul(de.sqrt(de.sum(de.mul(a, a), axis=-1)), de.sqrt(de.sum(de.mul(b, b), axis=-1)))
    if np.any(norms.data < eps):
        logger.warning("zero-norm vector in cosine similarity; epsilon guard applied")
    return de.div(dot, de.clip(norms, lo=eps))


def spec_relevance_loss(pooled_spec: de.Tensor, pooled_cross: de.Tensor) -> de.Tensor:
    """1 - mean over the batch of cos(T_emb, C)"""
    b, d = pooled_cross.shape
    spec_rows = de.expand(de.reshape(pooled_spec, (1, d)), (b, d))
    return de.sub(de.constant(1.0), de.mean(cosine_rows(spec_rows, pooled_cross)))


def compute_loss(output: ModelOutput, batch: TrajectoryBatch, spec: SpecEncoding) -> LossBreakdown:
    """L_total = L_state + L_action + L_spec (unweighted); L_spec is 0 without cross-attention"""
    n_steps = batch.horizon
    if output.actions.shape != batch.actions.shape or batch.states.shape[1] != n_steps + 1:
        raise ShapeError(f"targets {batch.states.shape}/{batch.actions.shape} do not match "
                         f"predictions {output.next_states.shape}/{output.actions.shape}")
    l_state = regression_loss(output.next_states, de.constant(batch.states[:, 1:]))
    l_action = regression_loss(output.actions, de.constant(batch.actions))
    total = de.add(l_state, l_action)
    l_spec_value = 0.0
    if output.pooled_cross is not None:
        l_spec = spec_relevance_loss(spec.pooled, output.pooled_cross)
        total = de.add(total, l_spec)
        l_spec_value = l_spec.item()
    return LossBreakdown(total=total, l_state=l_state.item(), l_action=l_action.item(), l_spec=l_spec_value)


def tokenwise_spec_loss(output: ModelOutput, spec: SpecEncoding) -> float:
    """1 - cos per spec token row against its cross-attention row, averaged over batch and tokens"""
    if output.cross is None:
        return 0.0
    cross = output.cross.data
    rows = np.broadcast_to(spec.embeddings.data, cross.shape)
    dot = np.sum(rows * cross, axis=-1)
    norms = np.maximum(np.linalg.norm(rows, axis=-1) * np.linalg.norm(cross, axis=-1), COSINE_EPS)
    return float(1.0 - np.mean(dot / norms))


# rollout

@dataclass
class RolloutResult:
    trajectory: Trajectory
    raw_actions: np.ndarray   # head outputs before clamping
    mode: str


def rollout(model: PastelModel, f: Formula, x0: State, env: EnvironmentSpec, mode: str = 'dynamics',
            spec_id: str = '', n_steps: Optional[int] = None) -> RolloutResult:
    """
    Autoregressive generation of n_steps (default horizon(f)) steps from x0.

    In 'dynamics' mode the next state is step(x_t, a_t) with the clamped
    predicted action; in 'open-loop' mode it is the state head's prediction.
    """
    if mode not in ROLLOUT_MODES:
        raise ValueError(f"mode must be one of {ROLLOUT_MODES}, got {mode!r}")
    if n_steps is None:
        n_steps = horizon(f)
    if n_steps < 1:
        raise HorizonError(f"rollout needs at least one step, got {n_steps}")
    if n_steps > model.cfg.h_max:
        raise HorizonError(f"formula horizon {n_steps} exceeds model capacity H_max {model.cfg.h_max}")
    states = np.zeros((n_steps + 1, STATE_DIM))
    states[0] = tuple(x0)
    raw = np.zeros((n_steps, ACTION_DIM))
    taken = np.zeros((n_steps, ACTION_DIM))
    with de.no_grad():
        spec = model.tokenize_spec(f)
        for t in range(n_steps):
            prefix = TrajectoryBatch(states=states[None, :t + 1].copy(), actions=taken[None, :t + 1].copy())
            predicted = model.forward(prefix, spec).actions.data[0, t]
            if not np.all(np.isfinite(predicted)):
                raise RolloutError(t)
            raw[t] = predicted
            if mode == 'dynamics':
                taken[t] = clamp_action(predicted, env)
                states[t + 1] = step(states[t], taken[t], env)
            else:
                taken[t] = predicted
                prefix.actions[0, t] = predicted
                next_state = model.forward(prefix, spec).next_states.data[0, t]
                if not np.all(np.isfinite(next_state)):
                    raise RolloutError(t)
                states[t + 1] = next_state
    return RolloutResult(trajectory=Trajectory(states, taken, spec_id), raw_actions=raw, mode=mode)


# checkpoints

def save_checkpoint(model: PastelModel, path: str, extra: Optional[dict] = None) -> str:
    """Header JSON + tensor blocks, written atomically; returns the parameter fingerprint"""
    fingerprint = model.fingerprint()
    header = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'config': model.cfg.to_dict(),
        'vocabulary': model.vocabulary.to_dict(),
        'config_fingerprint': model.cfg.fingerprint(),
        'fingerprint': fingerprint,
        'extra': extra or {},
    }
    encoded = json.dumps(header, sort_keys=True).encode('utf-8')
    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack('<I', len(encoded)))
    buffer.write(encoded)
    de.write_tensor_blocks(buffer, model.state_arrays())
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as f:
        f.write(buffer.getvalue())
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint {path} (fingerprint {fingerprint[:12]})")
    return fingerprint


def read_checkpoint_header(path: str) -> dict:
    with open(path, 'rb') as f:
        return _read_header(f, path)


def _read_header(f, path: str) -> dict:
    if f.read(4) != CHECKPOINT_MAGIC:
        raise IncompatibleCheckpointError(f"{path} is not a checkpoint file")
    prefix = f.read(4)
    if len(prefix) != 4:
        raise IncompatibleCheckpointError(f"{path}: truncated checkpoint header")
    (length,) = struct.unpack('<I', prefix)
    encoded = f.read(length)
    if len(encoded) != length:
        raise IncompatibleCheckpointError(f"{path}: truncated checkpoint header ({len(encoded)} of {length} bytes)")
    try:
        header = json.loads(encoded.decode('utf-8'))
    except ValueError as e:
        raise IncompatibleCheckpointError(f"{path}: unreadable checkpoint header: {e}") from None
    if not isinstance(header, dict):
        raise IncompatibleCheckpointError(f"{path}: checkpoint header is not an object")
    if header.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise SchemaVersionError('checkpoint', header.get('format_version'), CHECKPOINT_FORMAT_VERSION)
    return header


def load_checkpoint(path: str) -> PastelModel:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, 'rb') as f:
        header = _read_header(f, path)
        arrays = de.read_tensor_blocks(f)
    cfg = ModelConfig.from_dict(header['config'])
    if Vocabulary.from_dict(header['vocabulary']) != cfg.vocabulary:
        raise IncompatibleCheckpointError(f"{path}: stored vocabulary does not match its config")
    model = PastelModel(cfg)
    model.load_arrays(arrays)
    if model.fingerprint() != header['fingerprint'] and de.get_default_dtype() == np.float64:
        raise IncompatibleCheckpointError(f"{path}: parameter fingerprint mismatch")
    logger.info(f"Loaded checkpoint {path} (fingerprint {header['fingerprint'][:12]})")
    return model


def check_compatible(model: PastelModel, env: EnvironmentSpec, n_steps: int) -> None:
    """Raise unless the model's vocabulary covers env's regions and its capacity covers n_steps"""
    missing = sorted(set(env.region_names) - set(model.vocabulary.regions))
    if missing:
        raise IncompatibleCheckpointError(f"checkpoint vocabulary lacks regions {missing}")
    if n_steps > model.cfg.h_max:
        raise HorizonError(f"horizon {n_steps} exceeds checkpoint capacity H_max {model.cfg.h_max}")

import json
import logging
import os
import struct
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))
import diff_engine as de  # noqa: E402
from errors import (ConfigError, HorizonError, IncompatibleCheckpointError, SchemaVersionError,  # noqa: E402
                    ShapeError)
from pastel_model import (CHECKPOINT_MAGIC, ModelConfig, ModelOutput, PastelModel, SpecEncoding,  # noqa: E402
                          TrajectoryBatch, causal_mask, check_compatible, compute_loss, cosine_rows,
                          load_checkpoint, make_batch, read_checkpoint_header, regression_loss, rollout,
                          save_checkpoint, sequence_labels, spec_relevance_loss, tokenwise_spec_loss)
from planar_env import EnvironmentSpec, Rect, Region, State, Trajectory, default_environment  # noqa: E402
from stl_core import parse  # noqa: E402

pytestmark = pytest.mark.unit

SPEC = parse('F[0,5](R1)')


def random_batch(rng, b=2, n=5):
    states = np.column_stack([rng.uniform(0, 10, b * (n + 1)), rng.uniform(0, 10, b * (n + 1)),
                              rng.uniform(-2, 2, b * (n + 1)), rng.uniform(-2, 2, b * (n + 1))])
    return TrajectoryBatch(states=states.reshape(b, n + 1, 4), actions=rng.uniform(-1, 1, (b, n, 2)))


class TestModelConfig:
    """Architecture settings"""

    def test_for_environment(self, env):
        cfg = ModelConfig.for_environment(env)
        assert cfg.regions == ('O1', 'R1', 'R2', 'R3')
        assert cfg.state_center == (5.0, 5.0, 0.0, 0.0)
        assert cfg.state_scale == (5.0, 5.0, 2.0, 2.0)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=3)

    def test_invalid_dropout(self):
        with pytest.raises(ConfigError):
            ModelConfig(dropout=1.0)

    def test_dict_round_trip(self, tiny_model_config):
        assert ModelConfig.from_dict(tiny_model_config.to_dict()) == tiny_model_config

    def test_unknown_key(self, tiny_model_config):
        data = tiny_model_config.to_dict()
        data['depth'] = 3
        with pytest.raises(ConfigError):
            ModelConfig.from_dict(data)


class TestForward:
    """Sequence layout, shapes and causality"""

    def test_shapes(self, tiny_model, rng):
        batch = random_batch(rng)
        spec = tiny_model.tokenize_spec(SPEC)
        out = tiny_model.forward(batch, spec)
        assert out.actions.shape == (2, 5, 2)
        assert out.next_states.shape == (2, 5, 4)
        assert out.hidden.shape == (2, 15, 8)
        assert len(out.attention) == 1
        assert out.attention[0].shape == (2, 2, 15, 15)
        assert out.cross.shape == (2, spec.length, 8)
        assert out.pooled_cross.shape == (2, 8)
        assert out.cross_attention.shape == (2, 2, spec.length, 15)

    def test_attention_is_causal(self, tiny_model, rng):
        out = tiny_model.forward(random_batch(rng), tiny_model.tokenize_spec(SPEC))
        weights = out.attention[0]
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(weights[..., ~causal_mask(15)] == 0.0)

    def test_future_action_does_not_leak(self, tiny_model, rng):
        batch = random_batch(rng)
        spec = tiny_model.tokenize_spec(SPEC)
        before = tiny_model.forward(batch, spec)
        batch.actions[:, 3] += 0.7
        after = tiny_model.forward(batch, spec)
        np.testing.assert_allclose(after.actions.data[:, :4], before.actions.data[:, :4], atol=1e-12)
        np.testing.assert_allclose(after.next_states.data[:, :3], before.next_states.data[:, :3], atol=1e-12)
        assert not np.allclose(after.next_states.data[:, 3], before.next_states.data[:, 3])

    def test_future_state_does_not_leak(self, tiny_model, rng):
        batch = random_batch(rng)
        spec = tiny_model.tokenize_spec(SPEC)
        before = tiny_model.forward(batch, spec)
        batch.states[:, 4] += 1.0
        after = tiny_model.forward(batch, spec)
        np.testing.assert_allclose(after.actions.data[:, :4], before.actions.data[:, :4], atol=1e-12)
        assert not np.allclose(after.actions.data[:, 4], before.actions.data[:, 4])

    def test_specification_conditions_output(self, tiny_model, rng):
        batch = random_batch(rng)
        a = tiny_model.forward(batch, tiny_model.tokenize_spec(SPEC))
        b = tiny_model.forward(batch, tiny_model.tokenize_spec(parse('F[0,5](R2)')))
        assert not np.allclose(a.actions.data, b.actions.data)

    def test_cross_attention_rows_sum_to_one(self, tiny_model, rng):
        spec = tiny_model.tokenize_spec(parse('F[0,4](R1 & F[0,3](!O1))'))
        out = tiny_model.forward(random_batch(rng, b=3, n=6), spec)
        assert out.cross_attention.shape == (3, 2, spec.length, 18)
        assert np.all(out.cross_attention >= 0.0)
        np.testing.assert_allclose(out.cross_attention.sum(axis=-1), 1.0, atol=1e-6)

    def test_horizon_above_capacity(self, tiny_model, rng):
        with pytest.raises(HorizonError):
            tiny_model.tokenize_spec(parse('F[0,40](R1)'))
        with pytest.raises(HorizonError):
            tiny_model.forward(random_batch(rng, b=1, n=33), tiny_model.tokenize_spec(SPEC))

    def test_mismatched_shapes(self, tiny_model, rng):
        batch = random_batch(rng)
        batch.states = batch.states[:, :3]
        with pytest.raises(ShapeError):
            tiny_model.forward(batch, tiny_model.tokenize_spec(SPEC))

    def test_sequence_labels(self):
        assert sequence_labels(2) == ['SPEC_0', 'STATE_0', 'ACTION_0', 'SPEC_1', 'STATE_1', 'ACTION_1']


class TestAblation:
    """Spec-free baseline"""

    def test_no_cross_attention(self, tiny_model_config, rng):
        model = PastelModel(ModelConfig.from_dict(dict(tiny_model_config.to_dict(), ablation=True)))
        assert not any(name.startswith('cross.') for name in model.params)
        batch = random_batch(rng)
        spec = model.tokenize_spec(SPEC)
        out = model.forward(batch, spec)
        assert out.cross is None and out.cross_attention is None
        loss = compute_loss(out, batch, spec)
        assert loss.l_spec == 0.0
        assert tokenwise_spec_loss(out, spec) == 0.0

    def test_output_ignores_specification(self, tiny_model_config, rng):
        model = PastelModel(ModelConfig.from_dict(dict(tiny_model_config.to_dict(), ablation=True)))
        batch = random_batch(rng)
        a = model.forward(batch, model.tokenize_spec(SPEC))
        b = model.forward(batch, model.tokenize_spec(parse('G[0,5](!O1)')))
        np.testing.assert_array_equal(a.actions.data, b.actions.data)

    def test_backbone_matches_conditioned_model_given_null_spec(self, tiny_model_config, rng):
        baseline = PastelModel(ModelConfig.from_dict(dict(tiny_model_config.to_dict(), ablation=True)))
        conditioned = PastelModel(ModelConfig.from_dict(dict(tiny_model_config.to_dict(), seed=5)))
        for name, p in baseline.params.items():
            conditioned.params[name].data = p.data.copy()
        spec = conditioned.tokenize_spec(SPEC)
        null_spec = SpecEncoding(tokens=spec.tokens, ids=spec.ids, embeddings=spec.embeddings,
                                 pooled=baseline.null_token)
        batch = random_batch(rng, n=4)
        a = baseline.forward(batch, baseline.tokenize_spec(SPEC))
        b = conditioned.forward(batch, null_spec)
        np.testing.assert_array_equal(a.hidden.data, b.hidden.data)
        np.testing.assert_array_equal(a.actions.data, b.actions.data)
        np.testing.assert_array_equal(a.next_states.data, b.next_states.data)
        for wa, wb in zip(a.attention, b.attention):
            np.testing.assert_array_equal(wa, wb)
        assert b.cross is not None



class TestLosses:
    """Hand-computed loss values and gradients"""

    def _targets(self, rng):
        batch = random_batch(rng, b=2, n=3)
        pooled = rng.normal(size=8)
        spec = SpecEncoding(tokens=['R1'], ids=np.array([0]), embeddings=de.constant(pooled[None, :]),
                            pooled=de.constant(pooled))
        return batch, spec, pooled

    def test_perfect_prediction(self, rng):
        batch, spec, pooled = self._targets(rng)
        out = ModelOutput(actions=de.constant(batch.actions), next_states=de.constant(batch.states[:, 1:]),
                          hidden=de.constant(np.zeros((2, 9, 8))), attention=[],
                          pooled_cross=de.constant(np.stack([pooled, 3.0 * pooled])))
        loss = compute_loss(out, batch, spec)
        assert loss.l_state == 0.0 and loss.l_action == 0.0
        assert loss.l_total == pytest.approx(0.0, abs=1e-12)

    def test_offsets_and_opposite_spec(self, rng):
        batch, spec, pooled = self._targets(rng)
        out = ModelOutput(actions=de.constant(batch.actions), next_states=de.constant(batch.states[:, 1:] + 2.0),
                          hidden=de.constant(np.zeros((2, 9, 8))), attention=[],
                          pooled_cross=de.constant(np.stack([-pooled, -pooled])))
        loss = compute_loss(out, batch, spec)
        assert loss.l_state == pytest.approx(6.0)
        assert loss.l_action == 0.0
        assert loss.l_spec == pytest.approx(2.0)
        assert loss.as_dict()['L_total'] == pytest.approx(8.0)

    def test_regression_loss(self):
        pred = de.constant(np.array([[1.0, -1.0]]))
        assert regression_loss(pred, de.constant(np.zeros((1, 2)))).item() == 2.0

    def test_zero_norm_guard(self, caplog):
        with caplog.at_level(logging.WARNING):
            value = cosine_rows(de.constant(np.zeros((1, 3))), de.constant(np.ones((1, 3))))
        assert value.item() == 0.0
        assert 'epsilon guard' in caplog.text

    def test_spec_relevance_aligned(self):
        v = np.array([1.0, 2.0, -0.5])
        loss = spec_relevance_loss(de.constant(v), de.constant(np.stack([2.0 * v])))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), b=st.integers(1, 4), d=st.integers(1, 8),
           zero_rows=st.integers(0, 2))
    def test_spec_relevance_bounded(self, seed, b, d, zero_rows):
        rng = np.random.default_rng(seed)
        pooled = rng.normal(size=d) * rng.uniform(1e-3, 1e3)
        cross = rng.normal(size=(b, d)) * rng.uniform(1e-3, 1e3, size=(b, 1))
        cross[:min(zero_rows, b)] = 0.0
        value = spec_relevance_loss(de.constant(pooled), de.constant(cross)).item()
        assert -1e-12 <= value <= 2.0 + 1e-12


    def test_target_shape_mismatch(self, tiny_model, rng):
        batch = random_batch(rng)
        spec = tiny_model.tokenize_spec(SPEC)
        out = tiny_model.forward(batch, spec)
        with pytest.raises(ShapeError):
            compute_loss(out, TrajectoryBatch(batch.states, batch.actions[:, :4]), spec)

    def test_full_loss_gradient(self, tiny_model, rng):
        batch = random_batch(rng, b=2, n=3)
        names = ['block0.attn.key.weight', 'block0.mlp.fc1.bias', 'spec.projection.fc1.weight',
                 'cross.attn.value.weight', 'encoder.state.fc2.bias', 'head.action.bias']
        params = [tiny_model.params[name] for name in names]

        def loss_fn(*_):
            spec = tiny_model.tokenize_spec(SPEC)
            return compute_loss(tiny_model.forward(batch, spec), batch, spec).total

        assert de.grad_check(loss_fn, params) < 1e-4


class TestBatching:
    def test_make_batch(self, env):
        traj = Trajectory(np.zeros((4, 4)), np.zeros((3, 2)), 'phi3')
        batch = make_batch([traj, traj])
        assert batch.states.shape == (2, 4, 4)
        assert batch.spec_id == 'phi3'

    def test_mixed_horizons(self):
        with pytest.raises(HorizonError):
            make_batch([Trajectory(np.zeros((4, 4)), np.zeros((3, 2))),
                        Trajectory(np.zeros((5, 4)), np.zeros((4, 2)))])

    def test_empty(self):
        with pytest.raises(ShapeError):
            make_batch([])


class TestRollout:
    """Autoregressive generation"""

    def test_dynamics_mode(self, tiny_model, env):
        result = rollout(tiny_model, SPEC, State(2.0, 2.0, 0.0, 0.0), env, spec_id='reach')
        traj = result.trajectory
        assert traj.states.shape == (6, 4)
        assert traj.actions.shape == (5, 2)
        assert result.raw_actions.shape == (5, 2)
        assert traj.spec_id == 'reach'
        assert traj.is_dynamics_consistent(env)
        assert traj.max_abs_action() <= env.a_max

    def test_matches_full_sequence_forward(self, tiny_model, env):
        result = rollout(tiny_model, SPEC, State(2.0, 2.0, 0.0, 0.0), env)
        traj = result.trajectory
        batch = TrajectoryBatch(states=traj.states[None], actions=traj.actions[None])
        out = tiny_model.forward(batch, tiny_model.tokenize_spec(SPEC))
        np.testing.assert_allclose(out.actions.data[0], result.raw_actions, atol=1e-10)

    def test_open_loop_mode(self, tiny_model, env):
        result = rollout(tiny_model, SPEC, State(2.0, 2.0, 0.0, 0.0), env, mode='open-loop')
        assert result.mode == 'open-loop'
        np.testing.assert_array_equal(result.trajectory.actions, result.raw_actions)
        assert np.all(np.isfinite(result.trajectory.states))

    def test_deterministic(self, tiny_model, env):
        a = rollout(tiny_model, SPEC, State(2.0, 2.0, 0.0, 0.0), env)
        b = rollout(tiny_model, SPEC, State(2.0, 2.0, 0.0, 0.0), env)
        np.testing.assert_array_equal(a.trajectory.states, b.trajectory.states)

    def test_explicit_length(self, tiny_model, env):
        result = rollout(tiny_model, SPEC, State(2.0, 2.0, 0.0, 0.0), env, n_steps=8)
        assert result.trajectory.horizon == 8

    def test_bad_mode_and_lengths(self, tiny_model, env):
        x0 = State(2.0, 2.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            rollout(tiny_model, SPEC, x0, env, mode='teleport')
        with pytest.raises(HorizonError):
            rollout(tiny_model, SPEC, x0, env, n_steps=0)
        with pytest.raises(HorizonError):
            rollout(tiny_model, parse('F[0,40](R1)'), x0, env)


class TestCheckpoint:
    """Binary checkpoint persistence"""

    def test_round_trip(self, tiny_model, rng, tmp_path):
        path = str(tmp_path / 'ckpt' / 'model.ckpt')
        fingerprint = save_checkpoint(tiny_model, path, extra={'epoch': 3})
        loaded = load_checkpoint(path)
        assert loaded.fingerprint() == fingerprint
        assert loaded.cfg == tiny_model.cfg
        assert read_checkpoint_header(path)['extra'] == {'epoch': 3}
        batch = random_batch(rng)
        np.testing.assert_array_equal(loaded.forward(batch, loaded.tokenize_spec(SPEC)).actions.data,
                                      tiny_model.forward(batch, tiny_model.tokenize_spec(SPEC)).actions.data)

    def test_fingerprint_tracks_parameters(self, tiny_model):
        before = tiny_model.fingerprint()
        tiny_model.params['head.action.bias'].data[0] += 1e-3
        assert tiny_model.fingerprint() != before

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(str(tmp_path / 'absent.ckpt'))

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / 'junk.ckpt'
        path.write_bytes(b'not a checkpoint at all')
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(str(path))

    @pytest.mark.parametrize('payload', [
        b'\x01',
        struct.pack('<I', 500) + b'{"format_version": 1',
        struct.pack('<I', 9) + b'not json!',
        struct.pack('<I', 2) + b'[]',
    ], ids=['short-length', 'short-header', 'bad-json', 'not-an-object'])
    def test_truncated_or_corrupt_header(self, tmp_path, payload):
        path = tmp_path / 'broken.ckpt'
        path.write_bytes(CHECKPOINT_MAGIC + payload)
        with pytest.raises(IncompatibleCheckpointError):
            read_checkpoint_header(str(path))
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(str(path))

    def test_future_format_version(self, tmp_path):
        encoded = json.dumps({'format_version': 2}).encode('utf-8')
        path = tmp_path / 'future.ckpt'
        path.write_bytes(CHECKPOINT_MAGIC + struct.pack('<I', len(encoded)) + encoded)
        with pytest.raises(SchemaVersionError):
            read_checkpoint_header(str(path))

    def test_parameters_do_not_match_fingerprint(self, tiny_model, tiny_model_config, tmp_path):
        path = str(tmp_path / 'model.ckpt')
        save_checkpoint(tiny_model, path)
        header = read_checkpoint_header(path)
        other = PastelModel(ModelConfig.from_dict(dict(tiny_model_config.to_dict(), seed=1)))
        encoded = json.dumps(header, sort_keys=True).encode('utf-8')
        with open(path, 'wb') as f:
            f.write(CHECKPOINT_MAGIC + struct.pack('<I', len(encoded)) + encoded)
            de.write_tensor_blocks(f, other.state_arrays())
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)

    def test_missing_parameter(self, tiny_model):
        arrays = dict(tiny_model.state_arrays())
        arrays.pop('head.state.bias')
        with pytest.raises(IncompatibleCheckpointError):
            tiny_model.load_arrays(arrays)

    def test_check_compatible(self, tiny_model):
        env = default_environment()
        check_compatible(tiny_model, env, 30)
        with pytest.raises(HorizonError):
            check_compatible(tiny_model, env, 33)
        wider = EnvironmentSpec(env.workspace, env.regions + (Region('R4', Rect(1, 2, 8, 9)),))
        with pytest.raises(IncompatibleCheckpointError):
            check_compatible(tiny_model, wider, 10)

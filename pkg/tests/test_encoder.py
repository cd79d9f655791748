import numpy as np
import pytest

from trackrep.corpus import Track
from trackrep.encoder import (
    EncoderConfig,
    EncoderState,
    load_checkpoint,
    save_checkpoint,
    state_hash,
)
from trackrep.numkit import ParamTensor


def small_state(**overrides) -> EncoderState:
    cfg = dict(audio_dim=3, text_dim=3, hidden=(4,), embed_dim=3, queue_capacity=4)
    cfg.update(overrides)
    return EncoderState(EncoderConfig(**cfg), ["s0", "s1", "s2"], seed=7)


class TestEncode:
    def test_outputs_are_unit_norm(self):
        state = small_state()
        track = Track("s0", np.array([0.3, -1.0, 2.0]), np.array([1.0, 1.0, 0.5]))
        a, t = state.encode(track)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-9)
        assert np.linalg.norm(t) == pytest.approx(1.0, abs=1e-9)

    def test_identical_features_identical_outputs(self):
        state = small_state()
        t1 = Track("s0", np.ones(3), np.ones(3))
        t2 = Track("s1", np.ones(3), np.ones(3))
        a1, x1 = state.encode(t1)
        a2, x2 = state.encode(t2)
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(x1, x2)

    def test_identity_initialized_linear_layer_maps_basis_to_itself(self):
        state = small_state(hidden=())  # single linear layer per branch
        for mlp in (state.audio_mlp, state.text_mlp):
            mlp.params[0].value[...] = np.eye(3)
            mlp.params[1].value[...] = 0.0
        e1 = np.array([1.0, 0.0, 0.0])
        a, t = state.encode(Track("s0", e1, e1))
        np.testing.assert_allclose(a, e1, atol=1e-12)
        np.testing.assert_allclose(t, e1, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        state = small_state()
        with pytest.raises(ValueError):
            state.encode_batch(np.ones((1, 5)), np.ones((1, 3)))


class TestMomentum:
    def test_direct_substitution(self):
        state = small_state(momentum=0.995)
        state.momentum_audio[0][...] = 1.0
        state.audio_mlp.params[0].value[...] = 0.0
        state.momentum_update()
        np.testing.assert_allclose(state.momentum_audio[0], 0.995)

    def test_fixed_point(self):
        state = small_state()
        before = [b.copy() for b in state.momentum_audio]
        state.momentum_update()  # momentum copy equals trainable at init
        for b0, b1 in zip(before, state.momentum_audio):
            np.testing.assert_allclose(b0, b1, atol=1e-15)

    def test_geometric_decay_closed_form(self):
        state = small_state(momentum=0.995)
        state.momentum_audio[0][...] = 1.0
        state.audio_mlp.params[0].value[...] = 0.0
        for _ in range(5):
            state.momentum_update()
        np.testing.assert_allclose(state.momentum_audio[0], 0.995**5, rtol=1e-12)

    def test_distance_to_trainable_decreases_monotonically(self):
        state = small_state()
        state.audio_mlp.params[0].value += 0.5  # displace trainable weights
        dists = []
        for _ in range(4):
            state.momentum_update()
            dists.append(
                np.linalg.norm(
                    state.momentum_audio[0] - state.audio_mlp.params[0].value
                )
            )
        assert all(d1 < d0 for d0, d1 in zip(dists, dists[1:]))


class TestQueue:
    def test_fifo_eviction(self):
        state = small_state(queue_capacity=2)
        x, y, z = (np.full(3, v) / np.linalg.norm(np.full(3, v)) for v in (1.0, 2.0, 3.0))
        for v in (x, y, z):
            state.queue_push(v[None, :], v[None, :])
        qa, _ = state.queue_negatives()
        assert qa.shape == (2, 3)
        np.testing.assert_allclose(qa[0], y)
        np.testing.assert_allclose(qa[1], z)

    def test_empty_queue_returns_empty(self):
        qa, qt = small_state().queue_negatives()
        assert qa.shape == (0, 3) and qt.shape == (0, 3)

    def test_two_batches_preserve_order(self):
        state = small_state(queue_capacity=4)
        batch1 = np.tile(np.array([1.0, 0.0, 0.0]), (2, 1))
        batch2 = np.tile(np.array([0.0, 1.0, 0.0]), (2, 1))
        state.queue_push(batch1, batch1)
        state.queue_push(batch2, batch2)
        qa, qt = state.queue_negatives()
        assert qa.shape == (4, 3)
        np.testing.assert_array_equal(qa[:2], batch1)
        np.testing.assert_array_equal(qa[2:], batch2)
        np.testing.assert_array_equal(qa, qt)

    def test_count_larger_than_queue_returns_all(self):
        state = small_state()
        v = np.array([[1.0, 0.0, 0.0]])
        state.queue_push(v, v)
        qa, _ = state.queue_negatives(count=10)
        assert qa.shape == (1, 3)

    def test_count_truncation_keeps_most_recent(self):
        state = small_state(queue_capacity=4)
        for i in range(3):
            v = np.zeros((1, 3))
            v[0, i] = 1.0
            state.queue_push(v, v)
        qa, _ = state.queue_negatives(count=2)
        np.testing.assert_array_equal(qa[-1], [0.0, 0.0, 1.0])
        assert qa.shape == (2, 3)


class TestTables:
    def test_read_your_write(self):
        state = small_state()
        a = np.array([1.0, 0.0, 0.0])
        t = np.array([0.0, 1.0, 0.0])
        state.table_update("s1", a, t)
        ta, tt, warm = state.table_lookup(["s1"])
        np.testing.assert_array_equal(ta[0], a)
        np.testing.assert_array_equal(tt[0], t)
        assert warm[0]

    def test_cold_row_is_zero_and_flagged(self):
        ta, tt, warm = small_state().table_lookup(["s2"])
        np.testing.assert_array_equal(ta[0], 0.0)
        np.testing.assert_array_equal(tt[0], 0.0)
        assert not warm[0]

    def test_last_write_wins(self):
        state = small_state()
        state.table_update("s0", np.ones(3), np.ones(3))
        state.table_update("s0", np.full(3, 2.0), np.full(3, 3.0))
        ta, tt, _ = state.table_lookup(["s0"])
        np.testing.assert_array_equal(ta[0], 2.0)
        np.testing.assert_array_equal(tt[0], 3.0)

    def test_unknown_id_rejected(self):
        state = small_state()
        with pytest.raises(KeyError):
            state.table_lookup(["stranger"])
        with pytest.raises(KeyError):
            state.table_update("stranger", np.ones(3), np.ones(3))

    def test_lookup_rows_are_copies(self):
        state = small_state()
        state.table_update("s0", np.ones(3), np.ones(3))
        ta, _, _ = state.table_lookup(["s0"])
        ta[0, 0] = 99.0
        assert state.table_audio[0, 0] == 1.0


class TestCheckpoint:
    def test_round_trip_bit_identical_embeddings(self, tmp_path):
        state = small_state()
        state.queue_push(np.eye(3)[:2], np.eye(3)[:2])
        state.table_update("s0", np.ones(3), np.zeros(3))
        extras = {"fusion_audio": [ParamTensor(np.arange(9.0).reshape(3, 3))]}
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, state, extras)
        loaded, loaded_extras = load_checkpoint(path)

        feats = np.array([[0.1, -0.5, 1.0]])
        c1 = state.encode_batch(feats, feats)
        c2 = loaded.encode_batch(feats, feats)
        np.testing.assert_array_equal(c1.audio, c2.audio)
        np.testing.assert_array_equal(c1.text, c2.text)
        assert state_hash(state, extras) == state_hash(loaded, loaded_extras)

        qa1, qt1 = state.queue_negatives()
        qa2, qt2 = loaded.queue_negatives()
        np.testing.assert_array_equal(qa1, qa2)
        np.testing.assert_array_equal(qt1, qt2)
        np.testing.assert_array_equal(state.table_audio, loaded.table_audio)
        np.testing.assert_array_equal(state.table_warm, loaded.table_warm)
        np.testing.assert_array_equal(
            extras["fusion_audio"][0].value, loaded_extras["fusion_audio"][0].value
        )

    def test_hash_changes_with_parameters(self, tmp_path):
        state = small_state()
        h0 = state_hash(state)
        state.audio_mlp.params[0].value[0, 0] += 1e-9
        assert state_hash(state) != h0


class TestConfigValidation:
    def test_momentum_bounds(self):
        with pytest.raises(ValueError):
            EncoderConfig(audio_dim=2, text_dim=2, momentum=1.0)

    def test_positive_dims(self):
        with pytest.raises(ValueError):
            EncoderConfig(audio_dim=2, text_dim=2, embed_dim=0)

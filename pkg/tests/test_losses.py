import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trackrep.encoder import EncoderConfig, EncoderState
from trackrep.losses import (
    ContrastBatch,
    FusionParams,
    contrast,
    fuse_backward,
    fuse_playlist,
    mean_fuse,
    one_hot_targets,
    relation_targets,
    stage_objective,
    track_playlist_loss,
    track_track_loss,
    within_track_loss,
)
from trackrep.numkit import finite_diff_check, normalize_rows

LN_1P_EXP_NEG1 = math.log(1.0 + math.exp(-1.0))  # 0.31326...


def unit_rows(rng, n, d):
    rows, _ = normalize_rows(rng.standard_normal((n, d)))
    return rows


def diag_batch(a, t, queue_a=None, queue_t=None):
    q = 0 if queue_a is None else queue_a.shape[0]
    d = a.shape[1]
    empty = np.zeros((0, d))
    targets = one_hot_targets(a.shape[0], q)
    return ContrastBatch(
        anchors_a=a,
        anchors_t=t,
        positives_a=a,
        positives_t=t,
        negatives_a=queue_a if queue_a is not None else empty,
        negatives_t=queue_t if queue_t is not None else empty,
        targets_a2t=targets,
        targets_t2a=targets,
    )


class TestContrast:
    def test_orthogonal_pair_hand_value(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss, _ = contrast(diag_batch(a, a.copy()), tau=1.0)
        assert loss == pytest.approx(LN_1P_EXP_NEG1, abs=1e-4)

    def test_uniform_targets_equal_similarities(self):
        # all candidates identical => loss = ln(B + Q) regardless of targets
        b, q, d = 3, 2, 4
        row = np.zeros(d)
        row[0] = 1.0
        anchors = np.tile(row, (b, 1))
        queue = np.tile(row, (q, 1))
        targets = np.full((b, b + q), 1.0 / (b + q))
        batch = ContrastBatch(
            anchors_a=anchors,
            anchors_t=anchors.copy(),
            positives_a=anchors.copy(),
            positives_t=anchors.copy(),
            negatives_a=queue,
            negatives_t=queue.copy(),
            targets_a2t=targets,
            targets_t2a=targets.copy(),
        )
        loss, _ = contrast(batch, tau=0.7)
        assert loss == pytest.approx(math.log(b + q), abs=1e-9)

    def test_empty_batch_rejected(self):
        empty = np.zeros((0, 3))
        with pytest.raises(ValueError):
            contrast(diag_batch(empty, empty.copy()), tau=1.0)

    def test_bad_targets_rejected(self):
        a = unit_rows(np.random.default_rng(0), 2, 3)
        batch = diag_batch(a, a.copy())
        batch.targets_a2t = batch.targets_a2t * 0.5
        with pytest.raises(ValueError):
            contrast(batch, tau=1.0)

    def test_temperature_equivalence(self):
        # contrast(tau=c) equals contrast(tau=1) with logits pre-divided by c;
        # scaling the audio side by 1/c scales every logit once per direction
        rng = np.random.default_rng(5)
        a = unit_rows(rng, 3, 4)
        t = unit_rows(rng, 3, 4)
        c = 3.7
        loss_tau, _ = contrast(diag_batch(a, t), tau=c)
        loss_scaled, _ = contrast(diag_batch(a / c, t), tau=1.0)
        assert loss_tau == pytest.approx(loss_scaled, abs=1e-12)

    @given(st.integers(min_value=1, max_value=4), st.integers(min_value=0, max_value=3))
    @settings(max_examples=20, deadline=None)
    def test_nonnegative_and_finite(self, b, q):
        rng = np.random.default_rng(b * 13 + q)
        batch = diag_batch(
            unit_rows(rng, b, 5),
            unit_rows(rng, b, 5),
            unit_rows(rng, q, 5),
            unit_rows(rng, q, 5),
        )
        loss, _ = contrast(batch, tau=0.3)
        assert np.isfinite(loss) and loss >= 0

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(9)
        a = unit_rows(rng, 4, 6)
        t = unit_rows(rng, 4, 6)
        loss, _ = contrast(diag_batch(a, t), tau=0.5)
        perm = np.array([2, 0, 3, 1])
        # permuting anchors together with candidate rows and targets
        loss_p, _ = contrast(diag_batch(a[perm], t[perm]), tau=0.5)
        assert loss_p == pytest.approx(loss, abs=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        b, q, d = 3, 2, 8
        enc = EncoderState(
            EncoderConfig(audio_dim=d, text_dim=d, hidden=(4,), embed_dim=d,
                          queue_capacity=8),
            [f"s{i}" for i in range(b)],
            seed=1,
        )
        audio_in = rng.standard_normal((b, d))
        text_in = rng.standard_normal((b, d))
        queue_a = unit_rows(rng, q, d)
        queue_t = unit_rows(rng, q, d)
        targets = one_hot_targets(b, q)

        def loss():
            cache = enc.encode_batch(audio_in, text_in)
            batch = ContrastBatch(
                anchors_a=cache.audio,
                anchors_t=cache.text,
                positives_a=cache.audio,
                positives_t=cache.text,
                negatives_a=queue_a,
                negatives_t=queue_t,
                targets_a2t=targets,
                targets_t2a=targets,
            )
            value, g = contrast(batch, tau=0.5)
            enc.backward_batch(
                cache,
                g.d_anchors_a + g.d_positives_a,
                g.d_anchors_t + g.d_positives_t,
            )
            return value

        assert finite_diff_check(loss, enc.params()) < 1e-4


class TestWithinTrackLoss:
    def test_aligned_encoder_small_tau_approaches_zero(self):
        rng = np.random.default_rng(2)
        a = unit_rows(rng, 4, 8)
        empty = np.zeros((0, 8))
        loss, _, _ = within_track_loss(a, a.copy(), empty, empty, tau=0.01)
        assert loss < 1e-6

    def test_single_track_empty_queue_is_zero(self):
        a = unit_rows(np.random.default_rng(3), 1, 4)
        empty = np.zeros((0, 4))
        loss, _, _ = within_track_loss(a, a.copy(), empty, empty, tau=0.07)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_random_encoder_near_log_batch(self):
        # mean over seeds of the loss at tau=1 with random unit embeddings
        rng = np.random.default_rng(4)
        b, d = 4, 64
        empty = np.zeros((0, d))
        losses = []
        for _ in range(100):
            loss, _, _ = within_track_loss(
                unit_rows(rng, b, d), unit_rows(rng, b, d), empty, empty, tau=1.0
            )
            losses.append(loss)
        assert np.mean(losses) == pytest.approx(math.log(b), rel=0.05)

    def test_gradients(self):
        rng = np.random.default_rng(6)
        d = 6
        enc = EncoderState(
            EncoderConfig(audio_dim=d, text_dim=d, hidden=(3,), embed_dim=4,
                          queue_capacity=8),
            ["s0", "s1", "s2"],
            seed=2,
        )
        audio_in = rng.standard_normal((3, d))
        text_in = rng.standard_normal((3, d))
        queue_a = unit_rows(rng, 2, 4)
        queue_t = unit_rows(rng, 2, 4)

        def loss():
            cache = enc.encode_batch(audio_in, text_in)
            value, da, dt = within_track_loss(
                cache.audio, cache.text, queue_a, queue_t, tau=0.2
            )
            enc.backward_batch(cache, da, dt)
            return value

        assert finite_diff_check(loss, enc.params()) < 1e-4


class TestTrackTrackLoss:
    def test_disjoint_pairs_hand_value(self):
        # orthogonal embeddings matching one-hot targets: each directed term
        # is the same two-candidate softmax CE
        a = np.eye(2)
        empty = np.zeros((0, 2))
        loss, *_ = track_track_loss(
            a, a.copy(), a.copy(), a.copy(), np.eye(2), empty, empty, tau=1.0
        )
        assert loss == pytest.approx(LN_1P_EXP_NEG1, abs=1e-4)

    def test_identical_pair_collapses_to_wtc(self):
        rng = np.random.default_rng(7)
        a = unit_rows(rng, 3, 5)
        t = unit_rows(rng, 3, 5)
        empty = np.zeros((0, 5))
        wtc, _, _ = within_track_loss(a, t, empty, empty, tau=0.5)
        ttc, *_ = track_track_loss(
            a, t, a.copy(), t.copy(), np.eye(3), empty, empty, tau=0.5
        )
        assert ttc == pytest.approx(wtc, abs=1e-12)

    def test_non_cooccurring_diagonal_rejected(self):
        a = np.eye(2)
        co = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(ValueError):
            track_track_loss(
                a, a, a, a, co, np.zeros((0, 2)), np.zeros((0, 2)), tau=1.0
            )

    def test_multi_positive_targets(self):
        rel = np.array([[1.0, 1.0], [0.0, 1.0]])
        targets = relation_targets(rel, queue_size=1)
        np.testing.assert_allclose(targets[0], [0.5, 0.5, 0.0])
        np.testing.assert_allclose(targets[1], [0.0, 1.0, 0.0])

    def test_gradients(self):
        rng = np.random.default_rng(8)
        d = 5
        enc = EncoderState(
            EncoderConfig(audio_dim=d, text_dim=d, hidden=(3,), embed_dim=4,
                          queue_capacity=8),
            ["s0", "s1", "s2", "s3"],
            seed=3,
        )
        anchor_in = rng.standard_normal((2, d)), rng.standard_normal((2, d))
        partner_in = rng.standard_normal((2, d)), rng.standard_normal((2, d))
        co = np.array([[1.0, 1.0], [0.0, 1.0]])
        queue = unit_rows(rng, 2, 4), unit_rows(rng, 2, 4)

        def loss():
            cache_a = enc.encode_batch(*anchor_in)
            cache_p = enc.encode_batch(*partner_in)
            value, g_aa, g_at, g_pa, g_pt = track_track_loss(
                cache_a.audio, cache_a.text, cache_p.audio, cache_p.text,
                co, queue[0], queue[1], tau=0.3,
            )
            enc.backward_batch(cache_a, g_aa, g_at)
            enc.backward_batch(cache_p, g_pa, g_pt)
            return value

        assert finite_diff_check(loss, enc.params()) < 1e-4


class TestFusePlaylist:
    def test_single_member_identity_weights(self):
        d = 4
        fusion = FusionParams.create(d, np.random.default_rng(0))
        for p in fusion.params():
            p.value[...] = np.eye(d)
        member = np.zeros((1, d))
        member[0, 1] = 1.0
        out, _ = fuse_playlist(fusion, member)
        np.testing.assert_allclose(out, member[0], atol=1e-12)

    def test_duplicated_rows_match_single_row(self):
        rng = np.random.default_rng(1)
        fusion = FusionParams.create(6, rng)
        row = unit_rows(rng, 1, 6)
        one, _ = fuse_playlist(fusion, row)
        two, _ = fuse_playlist(fusion, np.vstack([row, row]))
        np.testing.assert_allclose(one, two, atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        fusion = FusionParams.create(5, rng)
        members = unit_rows(rng, 4, 5)
        _, cache = fuse_playlist(fusion, members)
        np.testing.assert_allclose(cache.attn.sum(axis=1), 1.0, atol=1e-12)

    def test_empty_member_set_rejected(self):
        fusion = FusionParams.create(3, np.random.default_rng(3))
        with pytest.raises(ValueError):
            fuse_playlist(fusion, np.zeros((0, 3)))
        with pytest.raises(ValueError):
            mean_fuse(np.zeros((0, 3)))

    @given(st.integers(min_value=2, max_value=5))
    @settings(max_examples=15, deadline=None)
    def test_permutation_invariance(self, j):
        rng = np.random.default_rng(j)
        fusion = FusionParams.create(4, rng)
        members = unit_rows(rng, j, 4)
        out, _ = fuse_playlist(fusion, members)
        perm = rng.permutation(j)
        out_p, _ = fuse_playlist(fusion, members[perm])
        np.testing.assert_allclose(out, out_p, atol=1e-9)

    def test_weight_gradients(self):
        rng = np.random.default_rng(4)
        d = 4
        fusion = FusionParams.create(d, rng)
        members = unit_rows(rng, 3, d)
        w = rng.standard_normal(d)

        def loss():
            out, cache = fuse_playlist(fusion, members)
            fuse_backward(fusion, cache, w)
            return float(out @ w)

        assert finite_diff_check(loss, fusion.params()) < 1e-4


class TestTrackPlaylistLoss:
    def _setup(self, rng, b=2, j=3, d=4, feat=5, queue=2):
        enc = EncoderState(
            EncoderConfig(audio_dim=feat, text_dim=feat, hidden=(3,), embed_dim=d,
                          queue_capacity=8),
            [f"s{i}" for i in range(b)],
            seed=4,
        )
        fusion_a = FusionParams.create(d, rng)
        fusion_t = FusionParams.create(d, rng)
        track_in = rng.standard_normal((b, feat)), rng.standard_normal((b, feat))
        members_a = [unit_rows(rng, j, d) for _ in range(b)]
        members_t = [unit_rows(rng, j, d) for _ in range(b)]
        rel = np.ones((b, b))
        queue_a, queue_t = unit_rows(rng, queue, d), unit_rows(rng, queue, d)
        return enc, fusion_a, fusion_t, track_in, members_a, members_t, rel, queue_a, queue_t

    def test_identical_members_identity_fusion_collapses_to_wtc(self):
        rng = np.random.default_rng(5)
        d = 4
        fusion_a = FusionParams.create(d, rng)
        fusion_t = FusionParams.create(d, rng)
        for p in fusion_a.params() + fusion_t.params():
            p.value[...] = np.eye(d)
        a = unit_rows(rng, 2, d)
        t = unit_rows(rng, 2, d)
        empty = np.zeros((0, d))
        # each playlist's members reduce to the anchor's opposite embedding
        loss, _, _ = track_playlist_loss(
            a, t,
            [a[0:1], a[1:2]], [t[0:1], t[1:2]],
            np.eye(2), empty, empty, 0.5, fusion_a, fusion_t,
        )
        wtc, _, _ = within_track_loss(a, t, empty, empty, tau=0.5)
        assert loss == pytest.approx(wtc, abs=1e-12)

    def test_matched_fused_reps_hand_value(self):
        d = 2
        fusion_a = FusionParams.create(d, np.random.default_rng(0))
        fusion_t = FusionParams.create(d, np.random.default_rng(1))
        for p in fusion_a.params() + fusion_t.params():
            p.value[...] = np.eye(d)
        tracks = np.eye(2)
        empty = np.zeros((0, 2))
        loss, _, _ = track_playlist_loss(
            tracks, tracks.copy(),
            [tracks[0:1], tracks[1:2]], [tracks[0:1], tracks[1:2]],
            np.eye(2), empty, empty, 1.0, fusion_a, fusion_t,
        )
        assert loss == pytest.approx(LN_1P_EXP_NEG1, abs=1e-4)

    def test_gradients_encoder_and_fusion_jointly(self):
        rng = np.random.default_rng(6)
        (
            enc, fusion_a, fusion_t, track_in, members_a, members_t, rel,
            queue_a, queue_t,
        ) = self._setup(rng)

        def loss():
            cache = enc.encode_batch(*track_in)
            value, da, dt = track_playlist_loss(
                cache.audio, cache.text, members_a, members_t, rel,
                queue_a, queue_t, 0.4, fusion_a, fusion_t,
            )
            enc.backward_batch(cache, da, dt)
            return value

        params = enc.params() + fusion_a.params() + fusion_t.params()
        assert finite_diff_check(loss, params) < 1e-4

    def test_mean_fusion_variant_has_no_fusion_gradients(self):
        rng = np.random.default_rng(7)
        (
            enc, fusion_a, fusion_t, track_in, members_a, members_t, rel,
            queue_a, queue_t,
        ) = self._setup(rng)
        cache = enc.encode_batch(*track_in)
        loss, _, _ = track_playlist_loss(
            cache.audio, cache.text, members_a, members_t, rel,
            queue_a, queue_t, 0.4, None, None,
        )
        assert np.isfinite(loss)
        for p in fusion_a.params() + fusion_t.params():
            assert np.all(p.grad == 0.0)


class TestStageObjective:
    def test_stage1(self):
        assert stage_objective(1, wtc=0.5) == pytest.approx(0.5)

    def test_stage3_additivity(self):
        assert stage_objective(3, wtc=0.1, ttc=0.2, tpc=0.3) == pytest.approx(0.6)

    def test_missing_component_rejected(self):
        with pytest.raises(ValueError):
            stage_objective(2, wtc=0.5)

    def test_scale(self):
        assert stage_objective(3, wtc=0.3, ttc=0.3, tpc=0.3, scale=1 / 3) == (
            pytest.approx(0.3)
        )

    def test_stage2_gradient_linearity(self):
        # grad of (wtc + ttc) equals elementwise sum of the separate grads
        rng = np.random.default_rng(8)
        d = 5
        enc = EncoderState(
            EncoderConfig(audio_dim=d, text_dim=d, hidden=(3,), embed_dim=4,
                          queue_capacity=8),
            ["s0", "s1"],
            seed=5,
        )
        feats = rng.standard_normal((2, d)), rng.standard_normal((2, d))
        co = np.eye(2)
        empty = np.zeros((0, 4))

        def run(parts):
            for p in enc.params():
                p.zero_grad()
            cache = enc.encode_batch(*feats)
            da = np.zeros_like(cache.audio)
            dt = np.zeros_like(cache.text)
            if "wtc" in parts:
                _, ga, gt = within_track_loss(
                    cache.audio, cache.text, empty, empty, 0.3
                )
                da += ga
                dt += gt
            if "ttc" in parts:
                _, gaa, gat, gpa, gpt = track_track_loss(
                    cache.audio, cache.text, cache.audio, cache.text, co,
                    empty, empty, 0.3,
                )
                da += gaa + gpa
                dt += gat + gpt
            enc.backward_batch(cache, da, dt)
            return [p.grad.copy() for p in enc.params()]

        g_both = run({"wtc", "ttc"})
        g_wtc = run({"wtc"})
        g_ttc = run({"ttc"})
        for gb, gw, gt_ in zip(g_both, g_wtc, g_ttc):
            np.testing.assert_allclose(gb, gw + gt_, atol=1e-10)

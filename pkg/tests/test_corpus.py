import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trackrep.corpus import (
    Corpus,
    CorpusError,
    InteractionGraph,
    Playlist,
    SyntheticConfig,
    Track,
    convert_interaction_log,
    derive_cooccurrence,
    generate_synthetic,
    hash_featurize,
    load_corpus,
    make_caption,
    save_corpus,
)


def tiny_corpus():
    def tr(tid, x):
        return Track(tid, np.array([x, 0.0]), np.array([0.0, x]))

    return Corpus(
        audio_dim=2,
        text_dim=2,
        train_tracks=[tr("a", 1.0), tr("b", 2.0), tr("c", 3.0)],
        test_tracks=[tr("x", 4.0)],
        train_playlists=[Playlist("p1", ("a", "b")), Playlist("p2", ("b", "c"))],
        test_playlists=[Playlist("q1", ("x",))],
    )


class TestInvariants:
    def test_duplicate_track_across_splits_rejected(self):
        t = Track("dup", np.zeros(2), np.zeros(2))
        t2 = Track("dup", np.zeros(2), np.zeros(2))
        with pytest.raises(CorpusError, match="dup"):
            Corpus(audio_dim=2, text_dim=2, train_tracks=[t], test_tracks=[t2])

    def test_playlist_referencing_missing_track_rejected(self):
        with pytest.raises(CorpusError, match="ghost"):
            Corpus(
                audio_dim=2,
                text_dim=2,
                train_tracks=[Track("a", np.zeros(2), np.zeros(2))],
                train_playlists=[Playlist("p", ("a", "ghost"))],
            )

    def test_cross_split_playlist_reference_rejected(self):
        with pytest.raises(CorpusError):
            Corpus(
                audio_dim=2,
                text_dim=2,
                train_tracks=[Track("a", np.zeros(2), np.zeros(2))],
                test_tracks=[Track("x", np.zeros(2), np.zeros(2))],
                test_playlists=[Playlist("q", ("a",))],
            )

    def test_feature_length_mismatch_rejected(self):
        with pytest.raises(CorpusError, match="audio_feat"):
            Corpus(
                audio_dim=3,
                text_dim=2,
                train_tracks=[Track("a", np.zeros(2), np.zeros(2))],
            )

    def test_duplicate_member_within_playlist_rejected(self):
        with pytest.raises(CorpusError):
            Playlist("p", ("a", "a"))


class TestCooccurrence:
    def test_single_playlist_pair(self):
        graph = InteractionGraph(("p1",), ("a", "b"), {"p1": ("a", "b")})
        co = derive_cooccurrence(graph)
        assert co.pairs() == {("a", "b"), ("b", "a")}

    def test_singleton_playlist_has_no_pairs(self):
        graph = InteractionGraph(("p1",), ("a",), {"p1": ("a",)})
        assert derive_cooccurrence(graph).pairs() == set()

    def test_two_playlists_no_transitive_pair(self):
        graph = InteractionGraph(
            ("p1", "p2"), ("a", "b", "c"), {"p1": ("a", "b"), "p2": ("b", "c")}
        )
        co = derive_cooccurrence(graph)
        assert co.cooccurs("a", "b") and co.cooccurs("b", "c")
        assert not co.cooccurs("a", "c")
        assert not co.cooccurs("a", "a")

    def test_unknown_track_rejected(self):
        graph = InteractionGraph(("p1",), ("a",), {"p1": ("a", "zzz")})
        with pytest.raises(CorpusError, match="zzz"):
            derive_cooccurrence(graph)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_matches_brute_force_double_loop(self, seed):
        rng = np.random.default_rng(seed)
        n_tracks = int(rng.integers(2, 30))
        ids = [f"t{i}" for i in range(n_tracks)]
        playlists = {}
        for p in range(int(rng.integers(1, 8))):
            size = int(rng.integers(1, min(6, n_tracks) + 1))
            members = rng.choice(n_tracks, size=size, replace=False)
            playlists[f"p{p}"] = tuple(ids[i] for i in members)
        graph = InteractionGraph(tuple(playlists), tuple(ids), playlists)
        co = derive_cooccurrence(graph)
        expected = set()
        for members in playlists.values():
            for a, b in itertools.permutations(members, 2):
                expected.add((a, b))
        assert co.pairs() == expected
        for a, b in expected:
            assert co.cooccurs(b, a)  # symmetry


class TestCaption:
    def test_paper_template(self):
        meta = {"track_name": "Love", "artist_name": "X", "album_name": "Y"}
        assert make_caption(meta) == "The track Love by X on album Y"

    def test_direct_substitution(self):
        meta = {"track_name": "A", "artist_name": "B", "album_name": "C"}
        assert make_caption(meta) == "The track A by B on album C"

    def test_empty_field_rejected(self):
        with pytest.raises(CorpusError, match="track_name"):
            make_caption({"track_name": "", "artist_name": "B", "album_name": "C"})

    def test_hash_featurize_deterministic_unit(self):
        v1 = hash_featurize("some caption words", 16)
        v2 = hash_featurize("some caption words", 16)
        np.testing.assert_array_equal(v1, v2)
        assert np.linalg.norm(v1) == pytest.approx(1.0)


class TestConvertInteractionLog:
    def test_single_user_train_only(self):
        log = [("u1", f"t{i}", float(i)) for i in range(5)]
        corpus = convert_interaction_log(
            log, min_len=0, max_len=99, splits={"train": 1.0}, seed=0
        )
        assert len(corpus.train_playlists) == 1
        assert len(corpus.train_playlists[0].track_ids) == 5
        assert corpus.test_playlists == []

    def test_step3_deoverlap_by_hand(self):
        # user A (train) listens {x, y}; user B (test) listens {y, z}
        log = [
            ("A", "x", 0.0), ("A", "y", 1.0),
            ("B", "y", 0.0), ("B", "z", 1.0),
        ]
        for seed in range(64):
            corpus = convert_interaction_log(
                log, min_len=0, max_len=99,
                splits={"train": 0.5, "test": 0.5}, seed=seed,
            )
            split_of = {
                p.id.split("-")[1]: p.id.split("-")[0]
                for s in ("train", "val", "test")
                for p in corpus.playlists(s)
            }
            if split_of.get("A") == "train" and split_of.get("B") == "test":
                b = corpus.test_playlists[0]
                assert b.track_ids == ("z",)
                return
        pytest.fail("no seed assigned A to train and B to test")

    def test_min_len_excludes_short_test_playlists(self):
        log = [("B", "x", 0.0), ("B", "y", 1.0)]
        corpus = convert_interaction_log(
            log, min_len=30, max_len=99, splits={"train": 0.0, "test": 1.0}, seed=1
        )
        assert corpus.test_playlists == []

    def test_max_len_truncates_contiguously(self):
        log = [("B", f"t{i}", float(i)) for i in range(20)]
        corpus = convert_interaction_log(
            log, min_len=5, max_len=10, splits={"test": 1.0}, seed=1
        )
        assert len(corpus.test_playlists[0].track_ids) == 10
        assert corpus.test_playlists[0].track_ids == tuple(
            f"t{i}" for i in range(10)
        )

    def test_duplicates_deduplicated(self):
        log = [("u", "a", 0.0), ("u", "a", 1.0), ("u", "b", 2.0)]
        corpus = convert_interaction_log(
            log, min_len=0, max_len=99, splits={"train": 1.0}, seed=0
        )
        assert corpus.train_playlists[0].track_ids == ("a", "b")

    def test_no_track_in_two_splits(self):
        rng = np.random.default_rng(0)
        log = []
        for u in range(20):
            for _ in range(15):
                log.append((f"u{u}", f"t{rng.integers(40)}", float(rng.random())))
        corpus = convert_interaction_log(
            log, min_len=0, max_len=99,
            splits={"train": 0.5, "val": 0.25, "test": 0.25}, seed=3,
        )
        pools = [set(corpus.track_ids(s)) for s in ("train", "val", "test")]
        assert not (pools[0] & pools[1])
        assert not (pools[0] & pools[2])
        assert not (pools[1] & pools[2])

    def test_empty_log_rejected(self):
        with pytest.raises(CorpusError, match="empty"):
            convert_interaction_log([])


class TestGenerateSynthetic:
    def test_zero_noise_full_purity_identical_features(self):
        config = SyntheticConfig(
            n_genres=1, tracks_per_genre=6, val_tracks_per_genre=0,
            test_tracks_per_genre=0, playlists=2, val_playlists=0,
            test_playlists=0, tracks_per_playlist=3, purity=1.0,
            noise_sigma=0.0, seed=1,
        )
        corpus, _ = generate_synthetic(config)
        by_id = {t.id: t for t in corpus.train_tracks}
        for p in corpus.train_playlists:
            first = by_id[p.track_ids[0]].audio_feat
            for tid in p.track_ids[1:]:
                np.testing.assert_array_equal(by_id[tid].audio_feat, first)

    def test_fixed_seed_is_deterministic(self):
        config = SyntheticConfig(seed=11)
        c1, g1 = generate_synthetic(config)
        c2, g2 = generate_synthetic(config)
        assert c1 == c2 and g1 == g2

    def test_cold_start_disjointness(self):
        corpus, _ = generate_synthetic(SyntheticConfig(seed=2))
        train = set(corpus.track_ids("train"))
        val = set(corpus.track_ids("val"))
        test = set(corpus.track_ids("test"))
        assert not (train & test) and not (train & val) and not (val & test)

    def test_infeasible_playlist_size_rejected(self):
        with pytest.raises(CorpusError, match="tracks_per_playlist"):
            generate_synthetic(
                SyntheticConfig(
                    n_genres=2, tracks_per_genre=2, tracks_per_playlist=10
                )
            )

    def test_purity_bounds_enforced(self):
        with pytest.raises(CorpusError):
            SyntheticConfig(purity=0.3)


class TestCorpusIO:
    def test_round_trip_identity(self, tmp_path):
        corpus = tiny_corpus()
        path = tmp_path / "corpus.jsonl"
        save_corpus(corpus, path)
        assert load_corpus(path) == corpus

    def test_round_trip_synthetic(self, tmp_path):
        corpus, _ = generate_synthetic(SyntheticConfig(seed=5))
        path = tmp_path / "corpus.jsonl"
        save_corpus(corpus, path)
        assert load_corpus(path) == corpus

    def test_duplicate_id_across_splits_detected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        lines = [
            '{"record": "header", "version": 1, "audio_dim": 1, "text_dim": 1}',
            '{"record": "track", "split": "train", "id": "a", "audio": [0.0], "text": [0.0]}',
            '{"record": "track", "split": "test", "id": "a", "audio": [0.0], "text": [0.0]}',
        ]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CorpusError, match="'a'"):
            load_corpus(path)

    def test_dangling_playlist_reference_detected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        lines = [
            '{"record": "header", "version": 1, "audio_dim": 1, "text_dim": 1}',
            '{"record": "track", "split": "train", "id": "a", "audio": [0.0], "text": [0.0]}',
            '{"record": "playlist", "split": "train", "id": "p", "tracks": ["a", "nope"]}',
        ]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CorpusError, match="nope"):
            load_corpus(path)

    def test_missing_header_detected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            '{"record": "track", "split": "train", "id": "a", "audio": [0.0], "text": [0.0]}\n'
        )
        with pytest.raises(CorpusError, match="header"):
            load_corpus(path)

    def test_caption_only_track_gets_hashed_text_features(self, tmp_path):
        path = tmp_path / "captions.jsonl"
        lines = [
            '{"record": "header", "version": 1, "audio_dim": 2, "text_dim": 8}',
            '{"record": "track", "split": "train", "id": "a", "audio": [0.0, 1.0],'
            ' "caption": "The track A by B on album C"}',
        ]
        path.write_text("\n".join(lines) + "\n")
        corpus = load_corpus(path)
        track = corpus.train_tracks[0]
        expected = hash_featurize("The track A by B on album C", 8)
        np.testing.assert_array_equal(track.text_feat, expected)

    def test_track_without_text_or_caption_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        lines = [
            '{"record": "header", "version": 1, "audio_dim": 1, "text_dim": 4}',
            '{"record": "track", "split": "train", "id": "a", "audio": [0.0]}',
        ]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CorpusError, match="caption"):
            load_corpus(path)

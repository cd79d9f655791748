"""Data model for tracks, playlists and interaction graphs, plus corpus
construction: synthetic planted-genre generation, interaction-log conversion,
and line-delimited JSON corpus files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

CORPUS_FORMAT_VERSION = 1
CAPTION_TEMPLATE = "The track {track_name} by {artist_name} on album {album_name}"

SPLITS = ("train", "val", "test")


class CorpusError(ValueError):
    """Malformed corpus data: duplicate ids, dangling references, split leaks."""


@dataclass(eq=False)
class Track:
    id: str
    audio_feat: np.ndarray
    text_feat: np.ndarray
    caption: str | None = None
    metadata: dict[str, str] | None = None

    def __post_init__(self):
        self.audio_feat = np.asarray(self.audio_feat, dtype=np.float64)
        self.text_feat = np.asarray(self.text_feat, dtype=np.float64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Track):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.audio_feat, other.audio_feat)
            and np.array_equal(self.text_feat, other.text_feat)
            and self.caption == other.caption
            and self.metadata == other.metadata
        )


@dataclass(frozen=True)
class Playlist:
    id: str
    track_ids: tuple[str, ...]  # input order kept; algorithms treat it as a set

    def __post_init__(self):
        object.__setattr__(self, "track_ids", tuple(self.track_ids))
        if len(set(self.track_ids)) != len(self.track_ids):
            dup = next(t for t in self.track_ids if self.track_ids.count(t) > 1)
            raise CorpusError(f"playlist {self.id!r} repeats track {dup!r}")


@dataclass(eq=False)
class Corpus:
    """Disjoint train/val/test pools of tracks and playlists (cold-start split)."""

    audio_dim: int
    text_dim: int
    train_tracks: list[Track] = field(default_factory=list)
    val_tracks: list[Track] = field(default_factory=list)
    test_tracks: list[Track] = field(default_factory=list)
    train_playlists: list[Playlist] = field(default_factory=list)
    val_playlists: list[Playlist] = field(default_factory=list)
    test_playlists: list[Playlist] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def tracks(self, split: str) -> list[Track]:
        return getattr(self, f"{_check_split(split)}_tracks")

    def playlists(self, split: str) -> list[Playlist]:
        return getattr(self, f"{_check_split(split)}_playlists")

    def track_ids(self, split: str) -> list[str]:
        return [t.id for t in self.tracks(split)]

    def validate(self) -> None:
        seen_tracks: dict[str, str] = {}
        for split in SPLITS:
            for t in self.tracks(split):
                if t.id in seen_tracks:
                    raise CorpusError(
                        f"track id {t.id!r} appears in both "
                        f"{seen_tracks[t.id]!r} and {split!r} pools"
                    )
                seen_tracks[t.id] = split
                if t.audio_feat.shape != (self.audio_dim,):
                    raise CorpusError(
                        f"track {t.id!r}: audio_feat length {t.audio_feat.shape} "
                        f"!= corpus audio_dim {self.audio_dim}"
                    )
                if t.text_feat.shape != (self.text_dim,):
                    raise CorpusError(
                        f"track {t.id!r}: text_feat length {t.text_feat.shape} "
                        f"!= corpus text_dim {self.text_dim}"
                    )
        seen_playlists: dict[str, str] = {}
        for split in SPLITS:
            pool = {t.id for t in self.tracks(split)}
            for p in self.playlists(split):
                if p.id in seen_playlists:
                    raise CorpusError(
                        f"playlist id {p.id!r} appears in both "
                        f"{seen_playlists[p.id]!r} and {split!r} pools"
                    )
                seen_playlists[p.id] = split
                for tid in p.track_ids:
                    if tid not in pool:
                        raise CorpusError(
                            f"playlist {p.id!r} ({split}) references track "
                            f"{tid!r} outside its split pool"
                        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        if (self.audio_dim, self.text_dim) != (other.audio_dim, other.text_dim):
            return False
        for split in SPLITS:
            if self.tracks(split) != other.tracks(split):
                return False
            if self.playlists(split) != other.playlists(split):
                return False
        return True


def _check_split(split: str) -> str:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    return split


@dataclass(frozen=True)
class InteractionGraph:
    """Sparse binary playlist-track membership relation over one split."""

    playlist_ids: tuple[str, ...]
    track_ids: tuple[str, ...]
    memberships: dict[str, tuple[str, ...]]  # playlist id -> member track ids

    @classmethod
    def from_corpus(cls, corpus: Corpus, split: str = "train") -> "InteractionGraph":
        playlists = corpus.playlists(split)
        return cls(
            playlist_ids=tuple(p.id for p in playlists),
            track_ids=tuple(t.id for t in corpus.tracks(split)),
            memberships={p.id: p.track_ids for p in playlists},
        )

    def contains(self, playlist_id: str, track_id: str) -> bool:
        return track_id in self.memberships.get(playlist_id, ())


@dataclass(frozen=True)
class CooccurrenceGraph:
    """Symmetric track-track relation: tracks sharing at least one playlist.

    Self-pairs are excluded (a track is never its own partner).
    """

    neighbors: dict[str, frozenset[str]]

    def cooccurs(self, a: str, b: str) -> bool:
        return a != b and b in self.neighbors.get(a, frozenset())

    def pairs(self) -> set[tuple[str, str]]:
        return {(a, b) for a, ns in self.neighbors.items() for b in ns}


def derive_cooccurrence(graph: InteractionGraph) -> CooccurrenceGraph:
    known = set(graph.track_ids)
    neighbors: dict[str, set[str]] = {tid: set() for tid in graph.track_ids}
    for pid, members in graph.memberships.items():
        for tid in members:
            if tid not in known:
                raise CorpusError(
                    f"playlist {pid!r} references unknown track {tid!r}"
                )
        for i, a in enumerate(members):
            for b in members[i + 1 :]:
                neighbors[a].add(b)
                neighbors[b].add(a)
    return CooccurrenceGraph({k: frozenset(v) for k, v in neighbors.items()})


def make_caption(metadata: Mapping[str, str]) -> str:
    """Render the fixed caption template from track/artist/album names."""
    for key in ("track_name", "artist_name", "album_name"):
        if not metadata.get(key):
            raise CorpusError(f"caption metadata missing non-empty {key!r}")
    return CAPTION_TEMPLATE.format(
        track_name=metadata["track_name"],
        artist_name=metadata["artist_name"],
        album_name=metadata["album_name"],
    )


def hash_featurize(text: str, dim: int) -> np.ndarray:
    """Deterministic bag-of-tokens hashing featurizer, L2-normalized.

    Keeps the text pathway exercisable without a pretrained language model.
    Buckets and signs come from a stable digest, not the salted builtin hash.
    """
    if dim <= 0:
        raise ValueError("dim must be positive")
    vec = np.zeros(dim, dtype=np.float64)
    tokens = text.lower().split()
    if not tokens:
        raise CorpusError("cannot featurize an empty caption")
    for tok in tokens:
        digest = hashlib.md5(tok.encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:8], "little") % dim
        sign = 1.0 if digest[8] % 2 == 0 else -1.0
        vec[bucket] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:  # opposing tokens cancelled; fall back to counts
        for tok in tokens:
            digest = hashlib.md5(tok.encode("utf-8")).digest()
            vec[int.from_bytes(digest[:8], "little") % dim] += 1.0
        norm = np.linalg.norm(vec)
    return vec / norm


@dataclass
class SyntheticConfig:
    """Planted-genre corpus generator parameters. Per-genre latent centers are
    shared across splits; track ids are disjoint (cold-start condition).

    Besides independent per-modality noise, each track can carry a shared
    nuisance latent injected into both modalities (``nuisance_dim`` > 0).
    Cross-modal alignment alone cannot separate it from the genre signal
    (both are shared within a track), but co-occurring tracks share only
    genre, so relational training can learn to suppress it.
    """

    n_genres: int = 4
    tracks_per_genre: int = 50          # train pool, per genre
    val_tracks_per_genre: int = 10
    test_tracks_per_genre: int = 10
    playlists: int = 20                 # train pool
    val_playlists: int = 5
    test_playlists: int = 5
    tracks_per_playlist: int = 10
    purity: float = 0.9
    noise_sigma: float = 0.5
    audio_noise_sigma: float | None = None  # None: noise_sigma
    text_noise_sigma: float | None = None
    nuisance_dim: int = 0
    nuisance_sigma: float = 0.0
    audio_dim: int = 16
    text_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        counts = (
            self.n_genres,
            self.tracks_per_genre,
            self.playlists,
            self.tracks_per_playlist,
            self.audio_dim,
            self.text_dim,
        )
        if any(c <= 0 for c in counts):
            raise CorpusError("all synthetic counts and dims must be positive")
        if min(self.val_tracks_per_genre, self.test_tracks_per_genre) < 0:
            raise CorpusError("per-split track counts must be non-negative")
        if not 0.5 <= self.purity <= 1.0:
            raise CorpusError(f"purity must lie in [0.5, 1], got {self.purity}")
        sigmas = (
            self.noise_sigma,
            self.nuisance_sigma,
            self.audio_noise_sigma or 0.0,
            self.text_noise_sigma or 0.0,
        )
        if any(s < 0 for s in sigmas):
            raise CorpusError("noise sigmas must be non-negative")
        if self.nuisance_dim < 0:
            raise CorpusError("nuisance_dim must be non-negative")

    @property
    def audio_sigma(self) -> float:
        return (
            self.audio_noise_sigma
            if self.audio_noise_sigma is not None
            else self.noise_sigma
        )

    @property
    def text_sigma(self) -> float:
        return (
            self.text_noise_sigma
            if self.text_noise_sigma is not None
            else self.noise_sigma
        )


def generate_synthetic(config: SyntheticConfig) -> tuple[Corpus, dict[str, int]]:
    """Generate a planted-cluster corpus; returns (corpus, track id -> genre)."""
    rng = np.random.default_rng(config.seed)
    centers_a = rng.standard_normal((config.n_genres, config.audio_dim))
    centers_t = rng.standard_normal((config.n_genres, config.text_dim))
    k = config.nuisance_dim
    if k:
        # fixed maps from the shared nuisance latent into each modality,
        # scaled so each feature dim gets nuisance variance nuisance_sigma^2
        map_a = rng.standard_normal((config.audio_dim, k)) / np.sqrt(k)
        map_t = rng.standard_normal((config.text_dim, k)) / np.sqrt(k)

    genre_of: dict[str, int] = {}

    def make_tracks(split: str, per_genre: int) -> tuple[list[Track], dict[int, list[str]]]:
        tracks: list[Track] = []
        by_genre: dict[int, list[str]] = {g: [] for g in range(config.n_genres)}
        for g in range(config.n_genres):
            for i in range(per_genre):
                tid = f"{split}-g{g}-t{i}"
                audio = centers_a[g] + config.audio_sigma * rng.standard_normal(
                    config.audio_dim
                )
                text = centers_t[g] + config.text_sigma * rng.standard_normal(
                    config.text_dim
                )
                if k:
                    latent = rng.standard_normal(k)
                    audio = audio + config.nuisance_sigma * (map_a @ latent)
                    text = text + config.nuisance_sigma * (map_t @ latent)
                tracks.append(Track(tid, audio, text))
                by_genre[g].append(tid)
                genre_of[tid] = g
        return tracks, by_genre

    def make_playlists(
        split: str, count: int, by_genre: dict[int, list[str]]
    ) -> list[Playlist]:
        if count == 0:
            return []
        total = sum(len(v) for v in by_genre.values())
        if config.tracks_per_playlist > total:
            raise CorpusError(
                f"tracks_per_playlist={config.tracks_per_playlist} exceeds the "
                f"{total} tracks available in the {split!r} pool"
            )
        playlists = []
        for i in range(count):
            home = int(rng.integers(config.n_genres))
            chosen: list[str] = []
            used: set[str] = set()
            while len(chosen) < config.tracks_per_playlist:
                if config.n_genres > 1 and rng.random() >= config.purity:
                    others = [g for g in range(config.n_genres) if g != home]
                    g = others[int(rng.integers(len(others)))]
                else:
                    g = home
                avail = [t for t in by_genre[g] if t not in used]
                if not avail:  # genre exhausted; draw from any remaining track
                    avail = [
                        t
                        for pool in by_genre.values()
                        for t in pool
                        if t not in used
                    ]
                pick = avail[int(rng.integers(len(avail)))]
                chosen.append(pick)
                used.add(pick)
            playlists.append(Playlist(f"{split}-p{i}", tuple(chosen)))
        return playlists

    train_tracks, train_by_genre = make_tracks("train", config.tracks_per_genre)
    val_tracks, val_by_genre = make_tracks("val", config.val_tracks_per_genre)
    test_tracks, test_by_genre = make_tracks("test", config.test_tracks_per_genre)

    corpus = Corpus(
        audio_dim=config.audio_dim,
        text_dim=config.text_dim,
        train_tracks=train_tracks,
        val_tracks=val_tracks,
        test_tracks=test_tracks,
        train_playlists=make_playlists("train", config.playlists, train_by_genre),
        val_playlists=make_playlists("val", config.val_playlists, val_by_genre),
        test_playlists=make_playlists("test", config.test_playlists, test_by_genre),
    )
    return corpus, genre_of


def convert_interaction_log(
    log: Sequence[tuple[str, str, float]],
    min_len: int = 30,
    max_len: int = 99,
    splits: Mapping[str, float] | None = None,
    audio_dim: int = 16,
    text_dim: int = 16,
    seed: int = 0,
    features: Mapping[str, tuple[np.ndarray, np.ndarray]] | None = None,
    captions: Mapping[str, str] | None = None,
) -> Corpus:
    """Build a weekly-discovery style corpus from (user, track, timestamp) events.

    Users are randomly split into train/val/test pools; each user's listening
    history becomes one playlist; tracks seen in an earlier split are removed
    from later splits; test playlists are cut to a contiguous window with
    min_len < size <= max_len. Track feature vectors come from ``features``
    when given, otherwise from the deterministic hashing featurizer.
    """
    if not log:
        raise CorpusError("empty interaction log")
    if splits is None:
        splits = {"train": 0.8, "val": 0.1, "test": 0.1}
    if min_len >= max_len:
        raise CorpusError(f"min_len {min_len} must be < max_len {max_len}")

    rng = np.random.default_rng(seed)
    by_user: dict[str, list[tuple[float, str]]] = {}
    for user, track, ts in log:
        by_user.setdefault(user, []).append((float(ts), track))

    users = sorted(by_user)
    order = list(rng.permutation(len(users)))
    n = len(users)
    n_train = int(round(splits.get("train", 0.0) * n))
    n_val = int(round(splits.get("val", 0.0) * n))
    assignment = {
        "train": [users[i] for i in order[:n_train]],
        "val": [users[i] for i in order[n_train : n_train + n_val]],
        "test": [users[i] for i in order[n_train + n_val :]],
    }

    def history(user: str) -> list[str]:
        # timestamp order, duplicates dropped keeping the earliest event
        seen: set[str] = set()
        out = []
        for _, track in sorted(by_user[user]):
            if track not in seen:
                seen.add(track)
                out.append(track)
        return out

    claimed: set[str] = set()  # track ids owned by earlier splits
    split_playlists: dict[str, list[tuple[str, list[str]]]] = {}
    split_tracks: dict[str, list[str]] = {}
    for split in SPLITS:
        pool: list[str] = []
        pool_seen: set[str] = set()
        playlists: list[tuple[str, list[str]]] = []
        for user in assignment[split]:
            tracks = [t for t in history(user) if t not in claimed]
            if split == "test":
                if len(tracks) > max_len:
                    tracks = tracks[:max_len]
                if len(tracks) <= min_len:
                    continue
            if not tracks:
                continue
            playlists.append((user, tracks))
            for t in tracks:
                if t not in pool_seen:
                    pool_seen.add(t)
                    pool.append(t)
        claimed.update(pool_seen)
        split_playlists[split] = playlists
        split_tracks[split] = pool

    def build_track(tid: str) -> Track:
        caption = captions.get(tid) if captions else None
        if features and tid in features:
            audio, text = features[tid]
        else:
            audio = hash_featurize(f"audio {tid}", audio_dim)
            text = hash_featurize(caption if caption else f"text {tid}", text_dim)
        return Track(tid, audio, text, caption=caption)

    kwargs: dict = {"audio_dim": audio_dim, "text_dim": text_dim}
    for split in SPLITS:
        kwargs[f"{split}_tracks"] = [build_track(t) for t in split_tracks[split]]
        kwargs[f"{split}_playlists"] = [
            Playlist(f"{split}-{user}", tuple(tracks))
            for user, tracks in split_playlists[split]
        ]
    return Corpus(**kwargs)


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "record": "header",
            "version": CORPUS_FORMAT_VERSION,
            "audio_dim": corpus.audio_dim,
            "text_dim": corpus.text_dim,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split in SPLITS:
            for t in corpus.tracks(split):
                rec = {
                    "record": "track",
                    "split": split,
                    "id": t.id,
                    "audio": t.audio_feat.tolist(),
                    "text": t.text_feat.tolist(),
                    "caption": t.caption,
                    "metadata": t.metadata,
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            for p in corpus.playlists(split):
                rec = {
                    "record": "playlist",
                    "split": split,
                    "id": p.id,
                    "tracks": list(p.track_ids),
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(path) -> Corpus:
    header = None
    tracks: dict[str, list[Track]] = {s: [] for s in SPLITS}
    playlists: dict[str, list[Playlist]] = {s: [] for s in SPLITS}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            kind = rec.get("record")
            if kind == "header":
                if header is not None:
                    raise CorpusError(f"{path}:{lineno}: duplicate header record")
                header = rec
            elif kind == "track":
                caption = rec.get("caption")
                text = rec.get("text")
                if text is None:
                    # caption-only records: deterministic hashed text features
                    if not caption:
                        raise CorpusError(
                            f"{path}:{lineno}: track {rec['id']!r} has neither "
                            "a text vector nor a caption"
                        )
                    if header is None:
                        raise CorpusError(
                            f"{path}:{lineno}: caption-only track before the "
                            "header record"
                        )
                    text_vec = hash_featurize(caption, int(header["text_dim"]))
                else:
                    text_vec = np.asarray(text, dtype=np.float64)
                tracks[_check_split(rec["split"])].append(
                    Track(
                        rec["id"],
                        np.asarray(rec["audio"], dtype=np.float64),
                        text_vec,
                        caption=caption,
                        metadata=rec.get("metadata"),
                    )
                )
            elif kind == "playlist":
                playlists[_check_split(rec["split"])].append(
                    Playlist(rec["id"], tuple(rec["tracks"]))
                )
            else:
                raise CorpusError(f"{path}:{lineno}: unknown record kind {kind!r}")
    if header is None:
        raise CorpusError(f"{path}: missing header record")
    return Corpus(
        audio_dim=int(header["audio_dim"]),
        text_dim=int(header["text_dim"]),
        train_tracks=tracks["train"],
        val_tracks=tracks["val"],
        test_tracks=tracks["test"],
        train_playlists=playlists["train"],
        val_playlists=playlists["val"],
        test_playlists=playlists["test"],
    )

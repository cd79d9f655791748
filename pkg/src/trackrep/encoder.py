"""Dual-branch track encoder with an EMA momentum copy, a FIFO queue of
momentum representations for contrastive negatives, and non-differentiable
per-track lookup tables holding the latest representations.

Each branch is an MLP (tanh hidden layers, fixed choice of smooth
nonlinearity) followed by a linear projection and L2 normalization, so inner
products downstream equal cosine similarities.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import Track
from .numkit import Mlp, ParamTensor, normalize_rows, normalize_rows_backward

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    audio_dim: int
    text_dim: int
    hidden: tuple[int, ...] = (64,)
    embed_dim: int = 256
    momentum: float = 0.995
    queue_capacity: int = 1024
    temperature: float = 0.07

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if self.queue_capacity <= 0:
            raise ValueError("queue_capacity must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class BatchCache:
    """Forward-pass intermediates consumed by backward_batch."""

    audio: np.ndarray  # B x d unit rows
    text: np.ndarray
    audio_mlp_cache: list[np.ndarray]
    text_mlp_cache: list[np.ndarray]
    audio_norms: np.ndarray
    text_norms: np.ndarray


class EncoderState:
    """All trainable parameters plus the momentum copy, queue, and tables.

    The lookup tables cover the train-track universe; a row stays zero (and is
    flagged cold) until its track first appears in a batch.
    """

    def __init__(self, config: EncoderConfig, train_ids: Sequence[str], seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.audio_mlp = Mlp(
            (config.audio_dim, *config.hidden, config.embed_dim), rng
        )
        self.text_mlp = Mlp((config.text_dim, *config.hidden, config.embed_dim), rng)
        # momentum copy starts as an exact clone of the trainable parameters
        self.momentum_audio = [p.value.copy() for p in self.audio_mlp.params]
        self.momentum_text = [p.value.copy() for p in self.text_mlp.params]
        self.queue_audio: deque[np.ndarray] = deque(maxlen=config.queue_capacity)
        self.queue_text: deque[np.ndarray] = deque(maxlen=config.queue_capacity)
        self.train_ids = tuple(train_ids)
        self._row_of = {tid: i for i, tid in enumerate(self.train_ids)}
        n = len(self.train_ids)
        self.table_audio = np.zeros((n, config.embed_dim))
        self.table_text = np.zeros((n, config.embed_dim))
        self.table_warm = np.zeros(n, dtype=bool)

    def params(self) -> list[ParamTensor]:
        return self.audio_mlp.params + self.text_mlp.params

    # -- forward / backward ------------------------------------------------

    def encode_batch(
        self, audio_feats: np.ndarray, text_feats: np.ndarray
    ) -> BatchCache:
        audio_feats = np.atleast_2d(np.asarray(audio_feats, dtype=np.float64))
        text_feats = np.atleast_2d(np.asarray(text_feats, dtype=np.float64))
        za, cache_a = self.audio_mlp.forward(audio_feats)
        zt, cache_t = self.text_mlp.forward(text_feats)
        a, na = normalize_rows(za)
        t, nt = normalize_rows(zt)
        return BatchCache(a, t, cache_a, cache_t, na, nt)

    def backward_batch(
        self, cache: BatchCache, d_audio: np.ndarray, d_text: np.ndarray
    ) -> None:
        dza = normalize_rows_backward(cache.audio, cache.audio_norms, d_audio)
        dzt = normalize_rows_backward(cache.text, cache.text_norms, d_text)
        self.audio_mlp.backward(cache.audio_mlp_cache, dza)
        self.text_mlp.backward(cache.text_mlp_cache, dzt)

    def encode(self, track: Track) -> tuple[np.ndarray, np.ndarray]:
        cache = self.encode_batch(track.audio_feat[None, :], track.text_feat[None, :])
        return cache.audio[0], cache.text[0]

    def encode_momentum(
        self, audio_feats: np.ndarray, text_feats: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Forward through the EMA copy; outputs feed the queue, never grads."""
        za, _ = self.audio_mlp.forward(audio_feats, values=self.momentum_audio)
        zt, _ = self.text_mlp.forward(text_feats, values=self.momentum_text)
        a, _ = normalize_rows(za)
        t, _ = normalize_rows(zt)
        return a, t

    # -- momentum + queue ---------------------------------------------------

    def momentum_update(self) -> None:
        m = self.config.momentum
        for buf, p in zip(self.momentum_audio, self.audio_mlp.params):
            buf *= m
            buf += (1.0 - m) * p.value
        for buf, p in zip(self.momentum_text, self.text_mlp.params):
            buf *= m
            buf += (1.0 - m) * p.value

    def queue_push(self, audio_batch: np.ndarray, text_batch: np.ndarray) -> None:
        audio_batch = np.atleast_2d(audio_batch)
        text_batch = np.atleast_2d(text_batch)
        if audio_batch.shape[0] != text_batch.shape[0]:
            raise ValueError("queue pushes must keep audio/text index-aligned")
        for a, t in zip(audio_batch, text_batch):
            self.queue_audio.append(np.array(a, dtype=np.float64))
            self.queue_text.append(np.array(t, dtype=np.float64))

    def queue_negatives(
        self, count: int | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Current queue contents, oldest first; truncation keeps the most
        recent ``count`` entries. Empty queue yields (0, d) arrays."""
        d = self.config.embed_dim
        qa = list(self.queue_audio)
        qt = list(self.queue_text)
        if count is not None and count < len(qa):
            qa = qa[len(qa) - count :]
            qt = qt[len(qt) - count :]
        if not qa:
            return np.zeros((0, d)), np.zeros((0, d))
        return np.stack(qa), np.stack(qt)

    # -- lookup tables ------------------------------------------------------

    def table_update(self, track_id: str, a: np.ndarray, t: np.ndarray) -> None:
        row = self._row_of.get(track_id)
        if row is None:
            raise KeyError(f"track {track_id!r} is not in the train pool")
        self.table_audio[row] = a
        self.table_text[row] = t
        self.table_warm[row] = True

    def table_lookup(
        self, track_ids: Iterable[str]
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rows for the given ids plus a warm mask (False = never updated).

        Returned arrays are copies: table rows never participate in gradients.
        """
        rows = []
        for tid in track_ids:
            if tid not in self._row_of:
                raise KeyError(f"track {tid!r} is not in the train pool")
            rows.append(self._row_of[tid])
        idx = np.asarray(rows, dtype=int)
        return (
            self.table_audio[idx].copy(),
            self.table_text[idx].copy(),
            self.table_warm[idx].copy(),
        )


# -- checkpointing ----------------------------------------------------------


def _param_arrays(state: EncoderState, extras: dict[str, list[ParamTensor]]):
    """Deterministically ordered (name, array) pairs covering the full state."""
    out: list[tuple[str, np.ndarray]] = []
    for branch, mlp in (("audio", state.audio_mlp), ("text", state.text_mlp)):
        for i, p in enumerate(mlp.params):
            out.append((f"{branch}_p{i}", p.value))
    for branch, bufs in (
        ("mom_audio", state.momentum_audio),
        ("mom_text", state.momentum_text),
    ):
        for i, buf in enumerate(bufs):
            out.append((f"{branch}_p{i}", buf))
    for name in sorted(extras):
        for i, p in enumerate(extras[name]):
            out.append((f"extra_{name}_p{i}", p.value))
    return out


def state_hash(
    state: EncoderState, extras: dict[str, list[ParamTensor]] | None = None
) -> str:
    """SHA-256 over all parameter bytes in a fixed order."""
    digest = hashlib.sha256()
    for name, arr in _param_arrays(state, extras or {}):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def save_checkpoint(
    path,
    state: EncoderState,
    extras: dict[str, list[ParamTensor]] | None = None,
) -> None:
    extras = extras or {}
    qa, qt = state.queue_negatives()
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "audio_dim": state.config.audio_dim,
            "text_dim": state.config.text_dim,
            "hidden": list(state.config.hidden),
            "embed_dim": state.config.embed_dim,
            "momentum": state.config.momentum,
            "queue_capacity": state.config.queue_capacity,
            "temperature": state.config.temperature,
        },
        "train_ids": list(state.train_ids),
        "extras": {name: len(params) for name, params in extras.items()},
    }
    arrays = dict(_param_arrays(state, extras))
    arrays["queue_audio"] = qa
    arrays["queue_text"] = qt
    arrays["table_audio"] = state.table_audio
    arrays["table_text"] = state.table_text
    arrays["table_warm"] = state.table_warm
    np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[EncoderState, dict[str, list[ParamTensor]]]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = meta["config"]
        config = EncoderConfig(
            audio_dim=cfg["audio_dim"],
            text_dim=cfg["text_dim"],
            hidden=tuple(cfg["hidden"]),
            embed_dim=cfg["embed_dim"],
            momentum=cfg["momentum"],
            queue_capacity=cfg["queue_capacity"],
            temperature=cfg["temperature"],
        )
        state = EncoderState(config, meta["train_ids"], seed=0)
        for branch, mlp in (("audio", state.audio_mlp), ("text", state.text_mlp)):
            for i, p in enumerate(mlp.params):
                p.value[...] = data[f"{branch}_p{i}"]
        for branch, bufs in (
            ("mom_audio", state.momentum_audio),
            ("mom_text", state.momentum_text),
        ):
            for i, buf in enumerate(bufs):
                buf[...] = data[f"{branch}_p{i}"]
        state.queue_audio.clear()
        state.queue_text.clear()
        if data["queue_audio"].size:
            state.queue_push(data["queue_audio"], data["queue_text"])
        state.table_audio[...] = data["table_audio"]
        state.table_text[...] = data["table_text"]
        state.table_warm[...] = data["table_warm"]
        extras: dict[str, list[ParamTensor]] = {}
        for name, n_params in meta["extras"].items():
            extras[name] = [
                ParamTensor(data[f"extra_{name}_p{i}"].copy())
                for i in range(n_params)
            ]
    return state, extras

"""Multi-stage training loop: batch assembly, Adam with a warmup + cosine
learning-rate schedule, per-stage early stopping on validation retrieval,
exact weight transfer across stages, and convergence logging.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Corpus, InteractionGraph, derive_cooccurrence
from .encoder import EncoderConfig, EncoderState, load_checkpoint, save_checkpoint
from .losses import (
    FusionParams,
    stage_objective,
    track_playlist_loss,
    track_track_loss,
    within_track_loss,
)
from .numkit import ParamTensor
from .recsys import build_embedding_table, itemknn_recommend
from .evaluation import build_tasks, evaluate


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries a diagnostic snapshot dict."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    max_epochs: int = 45
    patience: int = 5
    lr: float = 1e-4
    warmup_steps: int | None = None  # None: 5% of the stage's total steps
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    temperature: float = 0.07
    fusion_neighbors: int = 10  # member tracks fused per playlist sample
    objective_scale: float = 1.0  # 1/stage recovers averaged stage losses
    val_q: int = 3  # seed tracks per validation task
    val_k: int = 10  # Recall@K monitored for early stopping
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.max_epochs, self.patience) <= 0:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.lr <= 0 or self.temperature <= 0:
            raise ValueError("lr and temperature must be positive")
        if self.fusion_neighbors < 1:
            raise ValueError("fusion_neighbors must be >= 1")


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    wtc: float
    ttc: float
    tpc: float
    total: float
    val_recall: float
    val_ndcg: float
    lr: float
    wall_time: float
    tpc_skipped: int = 0

    COLUMNS = (
        "stage,epoch,wtc,ttc,tpc,total,val_recall,val_ndcg,lr,wall_time,tpc_skipped"
    )

    def to_csv_row(self) -> str:
        return (
            f"{self.stage},{self.epoch},{self.wtc!r},{self.ttc!r},{self.tpc!r},"
            f"{self.total!r},{self.val_recall!r},{self.val_ndcg!r},{self.lr!r},"
            f"{self.wall_time!r},{self.tpc_skipped}"
        )


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    boundaries: list[int] = field(default_factory=list)  # record count at stage ends

    def mark_stage_end(self) -> None:
        self.boundaries.append(len(self.records))

    def extend(self, other: "TrainLog") -> None:
        offset = len(self.records)
        self.records.extend(other.records)
        self.boundaries.extend(offset + b for b in other.boundaries)

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(EpochRecord.COLUMNS + "\n")
            for rec in self.records:
                fh.write(rec.to_csv_row() + "\n")
            fh.write("# stage_boundaries: " + ",".join(map(str, self.boundaries)) + "\n")


@dataclass
class ModelState:
    """Encoder plus the two per-modality fusion parameter sets."""

    encoder: EncoderState
    fusion_audio: FusionParams
    fusion_text: FusionParams

    def params(self) -> list[ParamTensor]:
        return (
            self.encoder.params()
            + self.fusion_audio.params()
            + self.fusion_text.params()
        )

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)


def new_model(corpus: Corpus, config: EncoderConfig, seed: int = 0) -> ModelState:
    encoder = EncoderState(config, [t.id for t in corpus.train_tracks], seed=seed)
    fusion_rng = np.random.default_rng([seed, 7])
    return ModelState(
        encoder=encoder,
        fusion_audio=FusionParams.create(config.embed_dim, fusion_rng),
        fusion_text=FusionParams.create(config.embed_dim, fusion_rng),
    )


def save_model(path, model: ModelState) -> None:
    save_checkpoint(
        path,
        model.encoder,
        extras={
            "fusion_audio": model.fusion_audio.params(),
            "fusion_text": model.fusion_text.params(),
        },
    )


def load_model(path) -> ModelState:
    encoder, extras = load_checkpoint(path)
    fa = extras["fusion_audio"]
    ft = extras["fusion_text"]
    return ModelState(
        encoder=encoder,
        fusion_audio=FusionParams(wq=fa[0], wk=fa[1], wv=fa[2]),
        fusion_text=FusionParams(wq=ft[0], wk=ft[1], wv=ft[2]),
    )


class Adam:
    """Bias-corrected Adam; the learning rate is supplied per step."""

    def __init__(self, params: Sequence[ParamTensor], config: TrainConfig):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = config.beta1, config.beta2, config.adam_eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            p.value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.zero_grad()


def resolve_warmup(config: TrainConfig, total_steps: int) -> int:
    if config.warmup_steps is not None:
        return config.warmup_steps
    return max(1, round(0.05 * total_steps))


def lr_at(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear ramp to the base rate, then a half-cosine decay to zero."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warmup = resolve_warmup(config, total_steps)
    if warmup > 0 and step < warmup:
        return config.lr * step / warmup
    span = max(total_steps - warmup, 1)
    progress = min(max((step - warmup) / span, 0.0), 1.0)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class _TrainIndex:
    """Precomputed per-corpus structures shared by every epoch."""

    ids: list[str]
    audio: np.ndarray
    text: np.ndarray
    row_of: dict[str, int]
    neighbors: dict[str, list[str]]  # sorted co-occurring track ids
    parent_playlists: dict[str, list[int]]
    playlist_members: list[tuple[str, ...]]
    member_sets: list[frozenset[str]]


def _build_index(corpus: Corpus) -> _TrainIndex:
    ids = [t.id for t in corpus.train_tracks]
    graph = InteractionGraph.from_corpus(corpus, "train")
    co = derive_cooccurrence(graph)
    neighbors = {tid: sorted(co.neighbors.get(tid, frozenset())) for tid in ids}
    parent_playlists: dict[str, list[int]] = {tid: [] for tid in ids}
    playlist_members = []
    for i, p in enumerate(corpus.train_playlists):
        playlist_members.append(p.track_ids)
        for tid in p.track_ids:
            parent_playlists[tid].append(i)
    return _TrainIndex(
        ids=ids,
        audio=np.stack([t.audio_feat for t in corpus.train_tracks]),
        text=np.stack([t.text_feat for t in corpus.train_tracks]),
        row_of={tid: i for i, tid in enumerate(ids)},
        neighbors=neighbors,
        parent_playlists=parent_playlists,
        playlist_members=playlist_members,
        member_sets=[frozenset(m) for m in playlist_members],
    )


def _validation_metrics(
    model: ModelState, corpus: Corpus, tasks, config: TrainConfig
) -> tuple[float, float]:
    if not tasks:
        return float("nan"), float("nan")
    table = build_embedding_table(model.encoder, corpus, "val")

    def recommender(query, k, exclude):
        return itemknn_recommend(query, table, k, exclude)

    report = evaluate(recommender, table, tasks, [config.val_k])
    return report.mean_recall(config.val_k), report.mean_ndcg(config.val_k)


def _train_step(
    model: ModelState,
    index: _TrainIndex,
    anchor_rows: np.ndarray,
    partner_of: dict[str, str | None],
    stage: int,
    config: TrainConfig,
    rng: np.random.Generator,
    use_fusion: bool = True,
):
    """Losses + gradient accumulation for one batch.

    Returns (wtc, ttc, tpc, objective, tpc_skips, batch_ids, cache); the cache
    holds the forward-pass outputs later written to the lookup tables.
    """
    enc = model.encoder
    anchors = [index.ids[r] for r in anchor_rows]
    batch_ids = list(anchors)
    if stage >= 2:
        for a in anchors:
            partner = partner_of.get(a)
            if partner is not None and partner not in index.row_of:
                raise KeyError(f"partner {partner!r} missing from the train pool")
            if partner is not None and partner not in batch_ids:
                batch_ids.append(partner)
    union_row = {tid: i for i, tid in enumerate(batch_ids)}
    feats_rows = [index.row_of[tid] for tid in batch_ids]
    cache = enc.encode_batch(index.audio[feats_rows], index.text[feats_rows])
    d_audio = np.zeros_like(cache.audio)
    d_text = np.zeros_like(cache.text)
    queue_a, queue_t = enc.queue_negatives()
    tau = config.temperature

    a_idx = np.asarray([union_row[a] for a in anchors])
    loss_wtc, g_a, g_t = within_track_loss(
        cache.audio[a_idx], cache.text[a_idx], queue_a, queue_t, tau
    )
    np.add.at(d_audio, a_idx, g_a)
    np.add.at(d_text, a_idx, g_t)

    loss_ttc = 0.0
    if stage >= 2:
        paired = [a for a in anchors if partner_of.get(a) is not None]
        if paired:
            pa_idx = np.asarray([union_row[a] for a in paired])
            pp_idx = np.asarray([union_row[partner_of[a]] for a in paired])
            partner_ids = [partner_of[a] for a in paired]
            co = np.zeros((len(paired), len(paired)))
            for x, a in enumerate(paired):
                ns = set(index.neighbors[a])
                for y, pb in enumerate(partner_ids):
                    co[x, y] = 1.0 if (pb in ns and pb != a) else 0.0
            loss_ttc, g_aa, g_at, g_pa, g_pt = track_track_loss(
                cache.audio[pa_idx], cache.text[pa_idx],
                cache.audio[pp_idx], cache.text[pp_idx],
                co, queue_a, queue_t, tau,
            )
            np.add.at(d_audio, pa_idx, g_aa)
            np.add.at(d_text, pa_idx, g_at)
            np.add.at(d_audio, pp_idx, g_pa)
            np.add.at(d_text, pp_idx, g_pt)

    loss_tpc = 0.0
    tpc_skips = 0
    if stage >= 3:
        samples = []  # (anchor union row, playlist index, member ids)
        for a in anchors:
            parents = index.parent_playlists.get(a, [])
            if not parents:
                tpc_skips += 1
                continue
            pl = parents[int(rng.integers(len(parents)))]
            others = [
                m
                for m in index.playlist_members[pl]
                if m != a and enc.table_warm[enc._row_of[m]]
            ]
            if not others:
                tpc_skips += 1
                continue
            take = min(config.fusion_neighbors, len(others))
            picked = sorted(rng.choice(len(others), size=take, replace=False))
            samples.append((union_row[a], pl, [others[i] for i in picked]))
        if samples:
            t_idx = np.asarray([s[0] for s in samples])
            sample_ids = [batch_ids[s[0]] for s in samples]
            members_a, members_t = [], []
            for _, _, member_ids in samples:
                ma, mt, _ = enc.table_lookup(member_ids)
                members_a.append(ma)
                members_t.append(mt)
            rel = np.zeros((len(samples), len(samples)))
            for x, (_, pl, _) in enumerate(samples):
                mset = index.member_sets[pl]
                for y, tid in enumerate(sample_ids):
                    rel[x, y] = 1.0 if tid in mset else 0.0
            loss_tpc, g_ta, g_tt = track_playlist_loss(
                cache.audio[t_idx], cache.text[t_idx],
                members_a, members_t, rel, queue_a, queue_t, tau,
                model.fusion_audio if use_fusion else None,
                model.fusion_text if use_fusion else None,
            )
            np.add.at(d_audio, t_idx, g_ta)
            np.add.at(d_text, t_idx, g_tt)

    objective = stage_objective(
        stage,
        wtc=loss_wtc,
        ttc=loss_ttc if stage >= 2 else None,
        tpc=loss_tpc if stage >= 3 else None,
        scale=config.objective_scale,
    )
    if not np.isfinite(objective):
        raise TrainingDiverged(
            "non-finite training loss",
            snapshot={
                "stage": stage,
                "wtc": loss_wtc,
                "ttc": loss_ttc,
                "tpc": loss_tpc,
                "batch_ids": batch_ids,
            },
        )
    if config.objective_scale != 1.0:
        d_audio *= config.objective_scale
        d_text *= config.objective_scale
        for fp in model.fusion_audio.params() + model.fusion_text.params():
            fp.grad *= config.objective_scale
    enc.backward_batch(cache, d_audio, d_text)

    return loss_wtc, loss_ttc, loss_tpc, objective, tpc_skips, batch_ids, cache


def _finish_step(
    model: ModelState,
    index: _TrainIndex,
    anchor_rows: np.ndarray,
    batch_ids: list[str],
    cache,
) -> None:
    """Momentum update, queue push (momentum outputs) and table refresh.

    Table rows receive the batch's forward-pass outputs; the queue receives
    momentum-copy outputs computed after the EMA update.
    """
    enc = model.encoder
    enc.momentum_update()
    mom_a, mom_t = enc.encode_momentum(
        index.audio[anchor_rows], index.text[anchor_rows]
    )
    enc.queue_push(mom_a, mom_t)
    for tid, a, t in zip(batch_ids, cache.audio, cache.text):
        enc.table_update(tid, a, t)


def run_stage(
    stage: int,
    model: ModelState,
    corpus: Corpus,
    config: TrainConfig,
    use_fusion: bool = True,
) -> tuple[ModelState, TrainLog]:
    """Train one stage with early stopping; returns the best-validation model.

    The learning-rate schedule spans this stage's ``max_epochs`` worth of
    steps. Without validation playlists the stage runs all epochs and returns
    the final weights.
    """
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    if model.encoder.config.queue_capacity < config.batch_size:
        raise ValueError("queue_capacity must be at least batch_size")
    index = _build_index(corpus)
    n = len(index.ids)
    if n == 0:
        raise ValueError("corpus has no train tracks")
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.max_epochs
    optimizer = Adam(model.params(), config)
    val_tasks = []
    if corpus.val_playlists:
        val_tasks, _ = build_tasks(corpus, config.val_q, config.seed, split="val")

    log = TrainLog()
    best: ModelState | None = None
    best_metric = -math.inf
    best_epoch = 0
    global_step = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, stage, epoch])
        partner_of: dict[str, str | None] = {}
        if stage >= 2:
            for tid in index.ids:
                ns = index.neighbors[tid]
                partner_of[tid] = (
                    ns[int(rng.integers(len(ns)))] if ns else None
                )
        perm = rng.permutation(n)
        sums = np.zeros(4)
        skips = 0
        lr = 0.0
        for start in range(0, n, config.batch_size):
            anchor_rows = perm[start : start + config.batch_size]
            wtc, ttc, tpc, total, skip, batch_ids, cache = _train_step(
                model, index, anchor_rows, partner_of, stage, config, rng, use_fusion
            )
            lr = lr_at(global_step, config, total_steps)
            optimizer.step(lr)
            _finish_step(model, index, anchor_rows, batch_ids, cache)
            sums += (wtc, ttc, tpc, total)
            skips += skip
            global_step += 1
        means = sums / steps_per_epoch
        val_recall, val_ndcg = _validation_metrics(model, corpus, val_tasks, config)
        log.records.append(
            EpochRecord(
                stage=stage,
                epoch=epoch,
                wtc=float(means[0]),
                ttc=float(means[1]),
                tpc=float(means[2]),
                total=float(means[3]),
                val_recall=val_recall,
                val_ndcg=val_ndcg,
                lr=lr,
                wall_time=time.perf_counter() - t0,
                tpc_skipped=skips,
            )
        )
        if val_tasks:
            if val_recall > best_metric:
                best_metric = val_recall
                best_epoch = epoch
                best = model.clone()
            elif epoch - best_epoch >= config.patience:
                break
    log.mark_stage_end()
    return (best if best is not None else model), log


def run_all_stages(
    corpus: Corpus,
    encoder_config: EncoderConfig,
    config: TrainConfig,
    stages: Sequence[int] = (1, 2, 3),
    model: ModelState | None = None,
    use_fusion: bool = True,
) -> tuple[ModelState, TrainLog]:
    """Run the staged objectives in order, transferring weights exactly."""
    stages = list(stages)
    if stages != sorted(stages) or any(s not in (1, 2, 3) for s in stages):
        raise ValueError(f"stages must be an increasing subset of (1, 2, 3): {stages}")
    if model is None:
        model = new_model(corpus, encoder_config, seed=config.seed)
    log = TrainLog()
    for stage in stages:
        model, stage_log = run_stage(stage, model, corpus, config, use_fusion)
        log.extend(stage_log)
    return model, log

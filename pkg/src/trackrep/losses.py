"""Contrastive losses over the unified embedding space.

The building block is a two-direction softmax cross-entropy over similarity
logits ("contrast"): each anchor is scored against in-batch candidates of the
opposite modality plus queue negatives. On top of it sit the three staged
losses (within-track, track-track, track-playlist), the self-attention
playlist fusion encoder, and the stage objectives.

All embedding rows entering these functions must already be L2-normalized so
inner products are cosine similarities. Gradients are hand-derived and
returned for every trainable input; queue rows are constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numkit import LOG_EPS, ParamTensor, softmax


@dataclass
class ContrastBatch:
    """One two-direction contrast problem.

    a2t direction: ``anchors_a`` scored against ``positives_t`` stacked over
    ``negatives_t``; t2a likewise with modalities swapped. Target rows are
    probability distributions over the B + Q candidate columns, with mass only
    on in-batch positives.
    """

    anchors_a: np.ndarray  # B x d
    anchors_t: np.ndarray
    positives_a: np.ndarray  # B x d
    positives_t: np.ndarray
    negatives_a: np.ndarray  # Q x d (Q may be 0)
    negatives_t: np.ndarray
    targets_a2t: np.ndarray  # B x (B + Q), rows sum to 1
    targets_t2a: np.ndarray


@dataclass
class ContrastGrads:
    d_anchors_a: np.ndarray
    d_anchors_t: np.ndarray
    d_positives_a: np.ndarray
    d_positives_t: np.ndarray


def one_hot_targets(batch_size: int, queue_size: int) -> np.ndarray:
    y = np.zeros((batch_size, batch_size + queue_size))
    y[np.arange(batch_size), np.arange(batch_size)] = 1.0
    return y


def relation_targets(relation: np.ndarray, queue_size: int) -> np.ndarray:
    """Uniform target mass over in-batch positives of a 0/1 relation matrix.

    Row i of ``relation`` marks which in-batch candidates are positives for
    anchor i; every row must contain at least one (the sampled partner).
    Queue columns always get zero mass.
    """
    rel = np.asarray(relation, dtype=np.float64)
    row_sums = rel.sum(axis=1, keepdims=True)
    if np.any(row_sums == 0):
        raise ValueError("every anchor needs at least one in-batch positive")
    y = np.zeros((rel.shape[0], rel.shape[1] + queue_size))
    y[:, : rel.shape[1]] = rel / row_sums
    return y


def _directed(
    anchors: np.ndarray,
    in_batch: np.ndarray,
    queue: np.ndarray,
    targets: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy of anchors vs (in_batch | queue) candidates.

    Returns (loss, d_anchors, d_in_batch); queue gradients are dropped.
    """
    b = anchors.shape[0]
    cands = np.vstack([in_batch, queue]) if queue.shape[0] else in_batch
    logits = anchors @ cands.T / tau
    probs = softmax(logits)
    loss = float(
        -(targets * np.log(np.maximum(probs, LOG_EPS))).sum(axis=1).mean()
    )
    # d loss / d logits for mean-over-anchors CE with soft targets
    dlogits = (probs - targets) / b
    d_anchors = dlogits @ cands / tau
    d_cands = dlogits.T @ anchors / tau
    return loss, d_anchors, d_cands[:b]


def contrast(batch: ContrastBatch, tau: float) -> tuple[float, ContrastGrads]:
    """Two-direction contrastive loss, Q queue negatives per direction.

    loss = 1/2 * mean_i [CE(y_i_a2t, softmax(sim/tau)) + CE(y_i_t2a, ...)].
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    b = batch.anchors_a.shape[0]
    if b == 0:
        raise ValueError("empty contrast batch")
    for name in ("targets_a2t", "targets_t2a"):
        y = getattr(batch, name)
        if not np.allclose(y.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError(f"{name} rows must sum to 1")

    loss_a2t, d_aa, d_pt = _directed(
        batch.anchors_a, batch.positives_t, batch.negatives_t, batch.targets_a2t, tau
    )
    loss_t2a, d_at, d_pa = _directed(
        batch.anchors_t, batch.positives_a, batch.negatives_a, batch.targets_t2a, tau
    )
    loss = 0.5 * (loss_a2t + loss_t2a)
    grads = ContrastGrads(
        d_anchors_a=0.5 * d_aa,
        d_anchors_t=0.5 * d_at,
        d_positives_a=0.5 * d_pa,
        d_positives_t=0.5 * d_pt,
    )
    return loss, grads


def within_track_loss(
    audio: np.ndarray,
    text: np.ndarray,
    queue_audio: np.ndarray,
    queue_text: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Align each track's audio and text embeddings (one-hot diagonal targets).

    Returns (loss, d_audio, d_text) with both grad paths (anchor + candidate)
    summed per row.
    """
    b = audio.shape[0]
    targets = one_hot_targets(b, queue_audio.shape[0])
    batch = ContrastBatch(
        anchors_a=audio,
        anchors_t=text,
        positives_a=audio,
        positives_t=text,
        negatives_a=queue_audio,
        negatives_t=queue_text,
        targets_a2t=targets,
        targets_t2a=targets,
    )
    loss, g = contrast(batch, tau)
    return loss, g.d_anchors_a + g.d_positives_a, g.d_anchors_t + g.d_positives_t


def track_track_loss(
    anchor_audio: np.ndarray,
    anchor_text: np.ndarray,
    partner_audio: np.ndarray,
    partner_text: np.ndarray,
    cooccur: np.ndarray,
    queue_audio: np.ndarray,
    queue_text: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Cross-modal alignment between co-occurring track pairs.

    ``cooccur[i, v]`` says whether anchor i co-occurs with partner v; the
    diagonal (each anchor with its own sampled partner) must be all ones.
    Four directed terms: audio(i)->text(partners), text(partner)->audio(anchors),
    text(i)->audio(partners), audio(partner)->text(anchors).

    Returns (loss, d_anchor_audio, d_anchor_text, d_partner_audio, d_partner_text).
    """
    co = np.asarray(cooccur, dtype=np.float64)
    b = anchor_audio.shape[0]
    if co.shape != (b, b):
        raise ValueError(f"cooccur must be {b}x{b}, got {co.shape}")
    if np.any(np.diag(co) == 0):
        bad = int(np.argmin(np.diag(co)))
        raise ValueError(
            f"batch position {bad}: sampled partner does not co-occur with its anchor"
        )
    q = queue_audio.shape[0]
    targets_fwd = relation_targets(co, q)  # anchor row -> partner columns
    targets_rev = relation_targets(co.T, q)  # partner row -> anchor columns

    # Contrast(audio_i, text_partner): a2t anchored at anchor audio,
    # t2a anchored at partner text.
    batch_1 = ContrastBatch(
        anchors_a=anchor_audio,
        anchors_t=partner_text,
        positives_a=anchor_audio,
        positives_t=partner_text,
        negatives_a=queue_audio,
        negatives_t=queue_text,
        targets_a2t=targets_fwd,
        targets_t2a=targets_rev,
    )
    # Contrast(text_i, audio_partner): t2a anchored at anchor text,
    # a2t anchored at partner audio.
    batch_2 = ContrastBatch(
        anchors_a=partner_audio,
        anchors_t=anchor_text,
        positives_a=partner_audio,
        positives_t=anchor_text,
        negatives_a=queue_audio,
        negatives_t=queue_text,
        targets_a2t=targets_rev,
        targets_t2a=targets_fwd,
    )
    loss_1, g1 = contrast(batch_1, tau)
    loss_2, g2 = contrast(batch_2, tau)
    loss = 0.5 * (loss_1 + loss_2)
    d_anchor_audio = 0.5 * (g1.d_anchors_a + g1.d_positives_a)
    d_partner_text = 0.5 * (g1.d_anchors_t + g1.d_positives_t)
    d_anchor_text = 0.5 * (g2.d_anchors_t + g2.d_positives_t)
    d_partner_audio = 0.5 * (g2.d_anchors_a + g2.d_positives_a)
    return loss, d_anchor_audio, d_anchor_text, d_partner_audio, d_partner_text


# -- playlist fusion ---------------------------------------------------------


@dataclass
class FusionParams:
    """One-layer self-attention projections, d x d each."""

    wq: ParamTensor
    wk: ParamTensor
    wv: ParamTensor

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator) -> "FusionParams":
        scale = 1.0 / np.sqrt(dim)
        return cls(
            wq=ParamTensor(rng.uniform(-scale, scale, size=(dim, dim))),
            wk=ParamTensor(rng.uniform(-scale, scale, size=(dim, dim))),
            wv=ParamTensor(rng.uniform(-scale, scale, size=(dim, dim))),
        )

    def params(self) -> list[ParamTensor]:
        return [self.wq, self.wk, self.wv]


@dataclass
class FuseCache:
    members: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    pooled: np.ndarray
    pooled_norm: float
    out: np.ndarray


def fuse_playlist(
    fusion: FusionParams, members: np.ndarray
) -> tuple[np.ndarray, FuseCache]:
    """Fuse J member-track rows into one unit playlist representation.

    Scaled dot-product self-attention over the rows, mean-pooled and
    L2-normalized. Member rows come from the lookup tables and are treated as
    constants; only the projection weights receive gradients.
    """
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    if members.shape[0] == 0:
        raise ValueError("cannot fuse an empty member set")
    d = members.shape[1]
    q = members @ fusion.wq.value.T
    k = members @ fusion.wk.value.T
    v = members @ fusion.wv.value.T
    attn = softmax(q @ k.T / np.sqrt(d))
    pooled = (attn @ v).mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm < 1e-12:
        raise ValueError("fused representation collapsed to zero norm")
    out = pooled / norm
    return out, FuseCache(members, q, k, v, attn, pooled, norm, out)


def fuse_backward(fusion: FusionParams, cache: FuseCache, d_out: np.ndarray) -> None:
    """Accumulate wq/wk/wv gradients from an upstream gradient on the output."""
    j, d = cache.members.shape
    # through L2 normalization
    d_pooled = (d_out - np.dot(d_out, cache.out) * cache.out) / cache.pooled_norm
    # through the mean over attended rows
    d_attended = np.tile(d_pooled / j, (j, 1))
    d_attn = d_attended @ cache.v.T
    d_v = cache.attn.T @ d_attended
    # softmax rows backward
    inner = (d_attn * cache.attn).sum(axis=1, keepdims=True)
    d_scores = cache.attn * (d_attn - inner) / np.sqrt(d)
    d_q = d_scores @ cache.k
    d_k = d_scores.T @ cache.q
    fusion.wq.grad += d_q.T @ cache.members
    fusion.wk.grad += d_k.T @ cache.members
    fusion.wv.grad += d_v.T @ cache.members


def mean_fuse(members: np.ndarray) -> np.ndarray:
    """Fusion-free pooling used by the no-fusion ablation: plain mean, unit norm."""
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    if members.shape[0] == 0:
        raise ValueError("cannot pool an empty member set")
    pooled = members.mean(axis=0)
    norm = np.linalg.norm(pooled)
    if norm < 1e-12:
        raise ValueError("pooled representation collapsed to zero norm")
    return pooled / norm


def track_playlist_loss(
    track_audio: np.ndarray,
    track_text: np.ndarray,
    member_sets_audio: Sequence[np.ndarray],
    member_sets_text: Sequence[np.ndarray],
    membership: np.ndarray,
    queue_audio: np.ndarray,
    queue_text: np.ndarray,
    tau: float,
    fusion_audio: FusionParams | None,
    fusion_text: FusionParams | None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Align fused playlist representations with a member track's embeddings.

    One sample per batch row: the anchor track (trainable embeddings) and its
    playlist's member rows drawn from the lookup tables (constants).
    ``membership[k, v]`` marks whether track v belongs to playlist k; the
    diagonal must be all ones. With ``fusion_* = None`` the no-fusion variant
    (plain mean pooling, no trainable fusion path) is used.

    Returns (loss, d_track_audio, d_track_text); fusion gradients are
    accumulated into the FusionParams.
    """
    b = track_audio.shape[0]
    rel = np.asarray(membership, dtype=np.float64)
    if rel.shape != (b, b):
        raise ValueError(f"membership must be {b}x{b}, got {rel.shape}")
    if np.any(np.diag(rel) == 0):
        bad = int(np.argmin(np.diag(rel)))
        raise ValueError(f"batch position {bad}: anchor track not in its playlist")
    if len(member_sets_audio) != b or len(member_sets_text) != b:
        raise ValueError("need one member set per batch sample")

    use_fusion = fusion_audio is not None and fusion_text is not None
    fused_audio = np.zeros((b, track_audio.shape[1]))
    fused_text = np.zeros((b, track_text.shape[1]))
    caches_a: list[FuseCache | None] = [None] * b
    caches_t: list[FuseCache | None] = [None] * b
    for i in range(b):
        if use_fusion:
            fused_audio[i], caches_a[i] = fuse_playlist(
                fusion_audio, member_sets_audio[i]
            )
            fused_text[i], caches_t[i] = fuse_playlist(
                fusion_text, member_sets_text[i]
            )
        else:
            fused_audio[i] = mean_fuse(member_sets_audio[i])
            fused_text[i] = mean_fuse(member_sets_text[i])

    q = queue_audio.shape[0]
    targets_fwd = relation_targets(rel, q)  # playlist row -> track columns
    targets_rev = relation_targets(rel.T, q)  # track row -> playlist columns

    # Contrast(fused_audio, track_text): a2t anchored at the fused audio rep,
    # t2a anchored at the track text.
    batch_1 = ContrastBatch(
        anchors_a=fused_audio,
        anchors_t=track_text,
        positives_a=fused_audio,
        positives_t=track_text,
        negatives_a=queue_audio,
        negatives_t=queue_text,
        targets_a2t=targets_fwd,
        targets_t2a=targets_rev,
    )
    # Contrast(fused_text, track_audio) with modalities swapped.
    batch_2 = ContrastBatch(
        anchors_a=track_audio,
        anchors_t=fused_text,
        positives_a=track_audio,
        positives_t=fused_text,
        negatives_a=queue_audio,
        negatives_t=queue_text,
        targets_a2t=targets_rev,
        targets_t2a=targets_fwd,
    )
    loss_1, g1 = contrast(batch_1, tau)
    loss_2, g2 = contrast(batch_2, tau)
    loss = 0.5 * (loss_1 + loss_2)
    d_track_text = 0.5 * (g1.d_anchors_t + g1.d_positives_t)
    d_track_audio = 0.5 * (g2.d_anchors_a + g2.d_positives_a)
    if use_fusion:
        d_fused_audio = 0.5 * (g1.d_anchors_a + g1.d_positives_a)
        d_fused_text = 0.5 * (g2.d_anchors_t + g2.d_positives_t)
        for i in range(b):
            fuse_backward(fusion_audio, caches_a[i], d_fused_audio[i])
            fuse_backward(fusion_text, caches_t[i], d_fused_text[i])
    return loss, d_track_audio, d_track_text


def stage_objective(
    stage: int,
    wtc: float | None = None,
    ttc: float | None = None,
    tpc: float | None = None,
    scale: float = 1.0,
) -> float:
    """Unweighted sum of the loss components active at a training stage.

    Stage 1 uses the within-track term; stage 2 adds track-track; stage 3 adds
    track-playlist. ``scale`` rescales the sum (1/stage recovers a plain
    average of the active terms).
    """
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    needed = {1: ("wtc",), 2: ("wtc", "ttc"), 3: ("wtc", "ttc", "tpc")}[stage]
    values = {"wtc": wtc, "ttc": ttc, "tpc": tpc}
    missing = [name for name in needed if values[name] is None]
    if missing:
        raise ValueError(f"stage {stage} objective missing components: {missing}")
    return scale * float(sum(values[name] for name in needed))

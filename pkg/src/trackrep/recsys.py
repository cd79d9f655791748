"""Cold-start playlist continuation on top of the unified embedding table:
parameter-free nearest-neighbour retrieval, weighted matrix factorization with
a dropout-trained content/collaborative score network, and a contrastive
collaborative-reconstruction recommender.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, InteractionGraph
from .encoder import EncoderState
from .losses import ContrastBatch, contrast, one_hot_targets
from .numkit import Mlp, ParamTensor, normalize_rows, normalize_rows_backward


# -- unified embeddings -------------------------------------------------------


@dataclass
class EmbeddingTable:
    """Per-track unified representations with a stable id order."""

    ids: list[str]
    vectors: np.ndarray  # n x d

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError("vectors must be (len(ids), d)")
        self._row_of = {tid: i for i, tid in enumerate(self.ids)}
        if len(self._row_of) != len(self.ids):
            raise ValueError("duplicate ids in embedding table")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, track_id: str) -> np.ndarray:
        return self.vectors[self._row_of[track_id]]

    def rows(self, track_ids: Iterable[str]) -> np.ndarray:
        return self.vectors[[self._row_of[t] for t in track_ids]]

    def save(self, path) -> None:
        for tid in self.ids:
            if any(ch.isspace() for ch in tid):
                raise ValueError(f"id {tid!r} contains whitespace; not serializable")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(self.ids)} {self.dim}\n")
            for tid, vec in zip(self.ids, self.vectors):
                fh.write(tid + " " + " ".join(repr(float(x)) for x in vec) + "\n")

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        with open(path, "r", encoding="utf-8") as fh:
            n, d = (int(x) for x in fh.readline().split())
            ids, rows = [], []
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                ids.append(parts[0])
                rows.append([float(x) for x in parts[1:]])
        if len(ids) != n:
            raise ValueError(f"expected {n} rows, found {len(ids)}")
        vectors = np.asarray(rows, dtype=np.float64)
        if vectors.shape != (n, d):
            raise ValueError(f"expected shape {(n, d)}, got {vectors.shape}")
        return cls(ids, vectors)


def unify(a: np.ndarray, t: np.ndarray, renormalize: bool = True) -> np.ndarray:
    """Average the two modality embeddings into the unified representation."""
    a = np.asarray(a, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if a.shape != t.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {t.shape}")
    e = 0.5 * (a + t)
    if not renormalize:
        return e
    norm = np.linalg.norm(e)
    if norm < 1e-12:
        raise ValueError("antipodal embeddings: unified representation is zero")
    return e / norm


def build_embedding_table(
    state: EncoderState, corpus: Corpus, split: str, renormalize: bool = True
) -> EmbeddingTable:
    """Encode a corpus split and average the modalities per track."""
    tracks = corpus.tracks(split)
    if not tracks:
        return EmbeddingTable([], np.zeros((0, state.config.embed_dim)))
    audio = np.stack([t.audio_feat for t in tracks])
    text = np.stack([t.text_feat for t in tracks])
    cache = state.encode_batch(audio, text)
    vectors = np.stack(
        [unify(a, t, renormalize) for a, t in zip(cache.audio, cache.text)]
    )
    return EmbeddingTable([t.id for t in tracks], vectors)


def pool_playlist(
    table: EmbeddingTable, track_ids: Sequence[str], renormalize: bool = True
) -> np.ndarray:
    """Average member rows into a playlist representation."""
    if not track_ids:
        raise ValueError("cannot pool an empty playlist")
    pooled = table.rows(track_ids).mean(axis=0)
    if not renormalize:
        return pooled
    norm = np.linalg.norm(pooled)
    if norm < 1e-12:
        raise ValueError("pooled playlist representation is zero")
    return pooled / norm


def rank_by_score(
    table: EmbeddingTable, scores: np.ndarray, k: int, exclude: frozenset[str]
) -> list[str]:
    """Top-k ids by score, excluded ids removed, ties broken by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(
        (tid for tid in table.ids if tid not in exclude),
        key=lambda tid: (-scores[table._row_of[tid]], tid),
    )
    return ranked[:k]


def itemknn_recommend(
    query: np.ndarray,
    table: EmbeddingTable,
    k: int,
    exclude: frozenset[str] = frozenset(),
) -> list[str]:
    """Inner-product retrieval of the k nearest candidate tracks."""
    scores = table.vectors @ np.asarray(query, dtype=np.float64)
    return rank_by_score(table, scores, k, exclude)


# -- weighted matrix factorization --------------------------------------------


@dataclass(frozen=True)
class WmfConfig:
    factors: int = 64
    reg: float = 0.1
    alpha: float = 40.0  # confidence boost on observed entries
    sweeps: int = 15
    seed: int = 0


@dataclass
class WmfState:
    playlist_ids: list[str]
    track_ids: list[str]
    playlist_factors: np.ndarray  # M x k
    track_factors: np.ndarray  # N x k
    config: WmfConfig
    objective_trace: list[float] = field(default_factory=list)


def wmf_objective(
    memberships: np.ndarray, zp: np.ndarray, zs: np.ndarray, reg: float, alpha: float
) -> float:
    """Weighted implicit-feedback objective: confidence 1 + alpha on observed
    cells (preference 1), confidence 1 elsewhere (preference 0), plus L2."""
    pred = zp @ zs.T
    conf = 1.0 + alpha * memberships
    err = (memberships - pred) ** 2
    return float(
        (conf * err).sum() + reg * ((zp**2).sum() + (zs**2).sum())
    )


def _als_half_step(
    obs_lists: list[np.ndarray], other: np.ndarray, this: np.ndarray,
    reg: float, alpha: float,
) -> None:
    """Solve one factor matrix row-wise with the other held fixed."""
    k = other.shape[1]
    gram = other.T @ other + reg * np.eye(k)
    for i, obs in enumerate(obs_lists):
        if obs.size:
            m = other[obs]
            a = gram + alpha * (m.T @ m)
            b = (1.0 + alpha) * m.sum(axis=0)
        else:
            a = gram
            b = np.zeros(k)
        this[i] = np.linalg.solve(a, b)


def wmf_fit(graph: InteractionGraph, config: WmfConfig = WmfConfig()) -> WmfState:
    """Alternating least squares on the implicit-feedback objective.

    The objective trace holds the value at init and after each full sweep;
    exact row solves make it non-increasing.
    """
    playlist_ids = list(graph.playlist_ids)
    track_ids = list(graph.track_ids)
    if not playlist_ids or not track_ids:
        raise ValueError("cannot factorize an empty interaction graph")
    track_row = {tid: i for i, tid in enumerate(track_ids)}
    m, n = len(playlist_ids), len(track_ids)

    r = np.zeros((m, n))
    playlist_obs: list[np.ndarray] = []
    for i, pid in enumerate(playlist_ids):
        idx = np.asarray(
            [track_row[t] for t in graph.memberships.get(pid, ())], dtype=int
        )
        playlist_obs.append(idx)
        r[i, idx] = 1.0
    track_obs = [np.flatnonzero(r[:, j]) for j in range(n)]

    rng = np.random.default_rng(config.seed)
    # unit-scale rows keep the first solves balanced; tiny inits make the
    # regularized norm rebalancing between the two factors painfully slow
    scale = 1.0 / np.sqrt(config.factors)
    zp = scale * rng.standard_normal((m, config.factors))
    zs = scale * rng.standard_normal((n, config.factors))

    trace = [wmf_objective(r, zp, zs, config.reg, config.alpha)]
    for _ in range(config.sweeps):
        _als_half_step(playlist_obs, zs, zp, config.reg, config.alpha)
        _als_half_step(track_obs, zp, zs, config.reg, config.alpha)
        # global rescale Zp*c, Zs/c at c^2 = |Zs|/|Zp| leaves predictions
        # unchanged and minimizes the L2 term (AM-GM), so the objective stays
        # non-increasing while the factor norms equalize quickly
        np_norm, ns_norm = np.linalg.norm(zp), np.linalg.norm(zs)
        if np_norm > 0 and ns_norm > 0:
            c = np.sqrt(ns_norm / np_norm)
            zp *= c
            zs /= c
        trace.append(wmf_objective(r, zp, zs, config.reg, config.alpha))
    return WmfState(playlist_ids, track_ids, zp, zs, config, trace)


# -- DropoutNet ----------------------------------------------------------------


@dataclass(frozen=True)
class DropoutNetConfig:
    transform_dim: int = 256
    hidden: tuple[int, ...] | None = None  # None: two hidden layers of transform_dim
    dropout_ratio: float = 0.2
    lr: float = 0.005
    sgd_momentum: float = 0.9
    l2: float = 0.1
    steps: int = 300
    batch_size: int = 64
    seed: int = 0

    def net_dims(self, input_dim: int) -> tuple[int, ...]:
        hidden = (
            self.hidden
            if self.hidden is not None
            else (self.transform_dim, self.transform_dim)
        )
        return (input_dim, *hidden, self.transform_dim)


@dataclass
class DropoutNetState:
    playlist_net: Mlp  # input: playlist content || collaborative factors
    track_net: Mlp
    mean_playlist_factor: np.ndarray  # exact means over the train pool
    mean_track_factor: np.ndarray
    config: DropoutNetConfig
    loss_trace: list[float] = field(default_factory=list)


def dropoutnet_loss(
    playlist_net: Mlp,
    track_net: Mlp,
    playlist_inputs: np.ndarray,
    track_inputs: np.ndarray,
    targets: np.ndarray,
) -> float:
    """Mean squared error between predicted and collaborative scores.

    Accumulates analytic gradients into both networks; dropout masks are the
    caller's concern (applied to the inputs beforehand).
    """
    u, cache_p = playlist_net.forward(playlist_inputs)
    v, cache_s = track_net.forward(track_inputs)
    scores = (u * v).sum(axis=1)
    diff = scores - targets
    loss = float((diff**2).mean())
    d_scores = 2.0 * diff / diff.shape[0]
    playlist_net.backward(cache_p, d_scores[:, None] * v)
    track_net.backward(cache_s, d_scores[:, None] * u)
    return loss


class _SgdMomentum:
    def __init__(self, params: Sequence[ParamTensor], lr: float, momentum: float, l2: float):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.l2 = l2
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v -= self.lr * (p.grad + self.l2 * p.value)
            p.value += v
            p.zero_grad()


def dropoutnet_fit(
    wmf: WmfState,
    playlist_content: Mapping[str, np.ndarray],
    track_content: Mapping[str, np.ndarray],
    config: DropoutNetConfig = DropoutNetConfig(),
) -> DropoutNetState:
    """Train the two score networks on preference-content concatenations.

    Each step samples random (playlist, track) pairs, targets their WMF score,
    and independently zeroes each side's collaborative sub-vector with the
    configured dropout probability.
    """
    e_p = np.stack([playlist_content[pid] for pid in wmf.playlist_ids])
    e_s = np.stack([track_content[tid] for tid in wmf.track_ids])
    zp, zs = wmf.playlist_factors, wmf.track_factors
    k = zp.shape[1]
    rng = np.random.default_rng(config.seed)
    playlist_net = Mlp(config.net_dims(e_p.shape[1] + k), rng)
    track_net = Mlp(config.net_dims(e_s.shape[1] + k), rng)
    opt = _SgdMomentum(
        playlist_net.params + track_net.params,
        config.lr, config.sgd_momentum, config.l2,
    )
    trace = []
    for _ in range(config.steps):
        p_idx = rng.integers(zp.shape[0], size=config.batch_size)
        s_idx = rng.integers(zs.shape[0], size=config.batch_size)
        keep_p = (rng.random(config.batch_size) >= config.dropout_ratio)[:, None]
        keep_s = (rng.random(config.batch_size) >= config.dropout_ratio)[:, None]
        in_p = np.hstack([e_p[p_idx], zp[p_idx] * keep_p])
        in_s = np.hstack([e_s[s_idx], zs[s_idx] * keep_s])
        targets = (zp[p_idx] * zs[s_idx]).sum(axis=1)
        trace.append(dropoutnet_loss(playlist_net, track_net, in_p, in_s, targets))
        opt.step()
    return DropoutNetState(
        playlist_net=playlist_net,
        track_net=track_net,
        mean_playlist_factor=zp.mean(axis=0),
        mean_track_factor=zs.mean(axis=0),
        config=config,
        loss_trace=trace,
    )


def dropoutnet_recommend(
    state: DropoutNetState,
    query_content: np.ndarray,
    candidates: EmbeddingTable,
    k: int,
    exclude: frozenset[str] = frozenset(),
) -> list[str]:
    """Score candidates with mean collaborative factors substituted (cold start)."""
    in_p = np.concatenate([query_content, state.mean_playlist_factor])[None, :]
    u, _ = state.playlist_net.forward(in_p)
    tiled = np.tile(state.mean_track_factor, (len(candidates.ids), 1))
    in_s = np.hstack([candidates.vectors, tiled])
    v, _ = state.track_net.forward(in_s)
    scores = v @ u[0]
    return rank_by_score(candidates, scores, k, exclude)


# -- CLCRec --------------------------------------------------------------------


@dataclass(frozen=True)
class ClcrecConfig:
    factors: int = 64
    temperature: float = 2.0
    replace_prob: float = 0.5
    lr: float = 0.001
    l2: float = 0.1
    steps: int = 300
    batch_size: int = 64
    hidden: tuple[int, ...] = (128,)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.replace_prob <= 1.0:
            raise ValueError("replace_prob must lie in [0, 1]")


@dataclass
class ClcrecState:
    playlist_ids: list[str]
    track_ids: list[str]
    playlist_embed: ParamTensor  # M x k, learned
    track_embed: ParamTensor  # N x k, learned
    transform: Mlp  # content -> k
    config: ClcrecConfig
    loss_trace: list[float] = field(default_factory=list)


def _norm_contrast(
    left_raw: np.ndarray, right_raw: np.ndarray, tau: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Two-direction contrast on cosine-normalized copies with one-hot targets
    and in-batch negatives; returns grads w.r.t. the raw (unnormalized) rows."""
    left, ln = normalize_rows(left_raw)
    right, rn = normalize_rows(right_raw)
    targets = one_hot_targets(left.shape[0], 0)
    batch = ContrastBatch(
        anchors_a=left,
        anchors_t=right,
        positives_a=left,
        positives_t=right,
        negatives_a=np.zeros((0, left.shape[1])),
        negatives_t=np.zeros((0, left.shape[1])),
        targets_a2t=targets,
        targets_t2a=targets,
    )
    loss, g = contrast(batch, tau)
    d_left = normalize_rows_backward(left, ln, g.d_anchors_a + g.d_positives_a)
    d_right = normalize_rows_backward(right, rn, g.d_anchors_t + g.d_positives_t)
    return loss, d_left, d_right


def clcrec_loss(
    state: ClcrecState,
    p_idx: np.ndarray,
    s_i_idx: np.ndarray,
    s_j_idx: np.ndarray,
    content_i: np.ndarray,
    content_j: np.ndarray,
    replace_mask: np.ndarray,
) -> float:
    """Collaborative + content contrast for one batch of (p, s_i, s_j) triples.

    First term contrasts playlist embeddings with member-track embeddings,
    where each track's collaborative embedding is swapped for its transformed
    content under ``replace_mask``. Second term contrasts transformed contents
    of the co-occurring pair. Gradients accumulate into the state's parameters.
    """
    f = state.transform
    fi, cache_i = f.forward(content_i)
    fj, cache_j = f.forward(content_j)
    zp_rows = state.playlist_embed.value[p_idx]
    zs_rows = state.track_embed.value[s_i_idx]
    mixed = np.where(replace_mask[:, None], fi, zs_rows)

    loss_collab, d_zp, d_mixed = _norm_contrast(
        zp_rows, mixed, state.config.temperature
    )
    loss_content, d_fi_2, d_fj = _norm_contrast(fi, fj, state.config.temperature)

    np.add.at(state.playlist_embed.grad, p_idx, d_zp)
    d_fi = d_fi_2 + np.where(replace_mask[:, None], d_mixed, 0.0)
    d_zs = np.where(replace_mask[:, None], 0.0, d_mixed)
    np.add.at(state.track_embed.grad, s_i_idx, d_zs)
    f.backward(cache_i, d_fi)
    f.backward(cache_j, d_fj)
    return loss_collab + loss_content


class _Adam:
    def __init__(self, params: Sequence[ParamTensor], lr: float, l2: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.l2 = lr, l2
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad + self.l2 * p.value
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.zero_grad()


def clcrec_fit(
    graph: InteractionGraph,
    track_content: Mapping[str, np.ndarray],
    config: ClcrecConfig = ClcrecConfig(),
) -> ClcrecState:
    """Learn collaborative embeddings plus a content transform contrastively.

    Batches sample (playlist, member, co-member) triples; playlists with a
    single member are skipped (no co-member pair exists).
    """
    playlist_ids = list(graph.playlist_ids)
    track_ids = list(graph.track_ids)
    missing = [t for t in track_ids if t not in track_content]
    if missing:
        raise ValueError(f"track {missing[0]!r} has no content embedding")
    track_row = {tid: i for i, tid in enumerate(track_ids)}
    eligible = [
        (pi, [track_row[t] for t in graph.memberships[pid]])
        for pi, pid in enumerate(playlist_ids)
        if len(graph.memberships.get(pid, ())) >= 2
    ]
    if not eligible:
        raise ValueError("no playlist has two or more members")

    content = np.stack([track_content[t] for t in track_ids])
    rng = np.random.default_rng(config.seed)
    scale = 0.1 / np.sqrt(config.factors)
    state = ClcrecState(
        playlist_ids=playlist_ids,
        track_ids=track_ids,
        playlist_embed=ParamTensor(
            scale * rng.standard_normal((len(playlist_ids), config.factors))
        ),
        track_embed=ParamTensor(
            scale * rng.standard_normal((len(track_ids), config.factors))
        ),
        transform=Mlp((content.shape[1], *config.hidden, config.factors), rng),
        config=config,
    )
    opt = _Adam(
        [state.playlist_embed, state.track_embed] + state.transform.params,
        lr=config.lr,
        l2=config.l2,
    )
    for _ in range(config.steps):
        picks = rng.integers(len(eligible), size=config.batch_size)
        p_idx = np.empty(config.batch_size, dtype=int)
        s_i = np.empty(config.batch_size, dtype=int)
        s_j = np.empty(config.batch_size, dtype=int)
        for b, e in enumerate(picks):
            pi, members = eligible[e]
            p_idx[b] = pi
            a = int(rng.integers(len(members)))
            b2 = int(rng.integers(len(members) - 1))
            if b2 >= a:
                b2 += 1
            s_i[b] = members[a]
            s_j[b] = members[b2]
        replace = rng.random(config.batch_size) < config.replace_prob
        loss = clcrec_loss(
            state, p_idx, s_i, s_j, content[s_i], content[s_j], replace
        )
        state.loss_trace.append(loss)
        opt.step()
    return state


def clcrec_recommend(
    state: ClcrecState,
    query_content: np.ndarray,
    candidates: EmbeddingTable,
    k: int,
    exclude: frozenset[str] = frozenset(),
) -> list[str]:
    """Score candidates by inner product of transformed content features."""
    q, _ = state.transform.forward(query_content[None, :])
    v, _ = state.transform.forward(candidates.vectors)
    scores = v @ q[0]
    return rank_by_score(candidates, scores, k, exclude)

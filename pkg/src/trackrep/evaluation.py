"""Retrieval metrics and experiment analyses: Recall@K / NDCG@K, playlist
homogeneity, seed/held-out task construction, 2-D principal-component export,
and the fusion-set-size sensitivity sweep.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import Corpus, Playlist
from .recsys import EmbeddingTable, pool_playlist

Recommender = Callable[[np.ndarray, int, frozenset[str]], list[str]]


def recall_at_k(ranked: Sequence[str], relevant: set[str], k: int) -> float:
    """|top-k hits| / |relevant|."""
    if k <= 0:
        raise ValueError("k must be positive")
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    hits = sum(1 for tid in ranked[:k] if tid in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: Sequence[str], relevant: set[str], k: int) -> float:
    """Binary-relevance NDCG with the ideal DCG truncated at min(k, |relevant|)."""
    if k <= 0:
        raise ValueError("k must be positive")
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    dcg = sum(
        1.0 / math.log2(rank + 1)
        for rank, tid in enumerate(ranked[:k], start=1)
        if tid in relevant
    )
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(relevant)) + 1))
    return dcg / idcg


@dataclass
class HomogeneityReport:
    mean: float
    per_playlist: dict[str, float]
    skipped_singletons: int


def homogeneity(
    playlists: Sequence[Playlist], vectors: dict[str, np.ndarray]
) -> HomogeneityReport:
    """Mean pairwise cosine similarity of member vectors, averaged over playlists.

    Playlists with fewer than two members are skipped and counted.
    """
    per: dict[str, float] = {}
    skipped = 0
    for p in playlists:
        if len(p.track_ids) < 2:
            skipped += 1
            continue
        mat = np.stack([vectors[t] for t in p.track_ids]).astype(np.float64)
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        unit = mat / norms
        sims = unit @ unit.T
        n = len(p.track_ids)
        upper = sims[np.triu_indices(n, k=1)]
        per[p.id] = float(upper.mean())
    mean = float(np.mean(list(per.values()))) if per else float("nan")
    return HomogeneityReport(mean, per, skipped)


@dataclass(frozen=True)
class EvalTask:
    playlist_id: str
    seeds: tuple[str, ...]
    relevant: frozenset[str]


def build_tasks(
    corpus: Corpus, seed_count: int, seed: int, split: str = "test"
) -> tuple[list[EvalTask], int]:
    """One task per playlist with > seed_count members: a deterministic seeded
    choice of seed tracks, the rest held out as relevant. Returns (tasks,
    number of too-small playlists skipped)."""
    if seed_count < 1:
        raise ValueError("seed_count must be >= 1")
    rng = np.random.default_rng(seed)
    tasks: list[EvalTask] = []
    skipped = 0
    for p in corpus.playlists(split):
        members = list(p.track_ids)
        if len(members) <= seed_count:
            skipped += 1
            continue
        chosen = rng.choice(len(members), size=seed_count, replace=False)
        seed_ids = tuple(members[i] for i in sorted(chosen))
        relevant = frozenset(members) - frozenset(seed_ids)
        tasks.append(EvalTask(p.id, seed_ids, relevant))
    return tasks, skipped


@dataclass
class MetricReport:
    k_values: list[int]
    per_task: dict[str, dict[int, tuple[float, float]]]  # id -> k -> (recall, ndcg)

    def mean_recall(self, k: int) -> float:
        return float(np.mean([self.per_task[t][k][0] for t in self.per_task]))

    def mean_ndcg(self, k: int) -> float:
        return float(np.mean([self.per_task[t][k][1] for t in self.per_task]))

    def summary(self) -> dict[str, float]:
        out = {}
        for k in self.k_values:
            out[f"recall@{k}"] = self.mean_recall(k)
            out[f"ndcg@{k}"] = self.mean_ndcg(k)
        return out

    def to_text(self) -> str:
        lines = ["task" + "".join(f"  R@{k}  N@{k}" for k in self.k_values)]
        for tid in sorted(self.per_task):
            cells = "".join(
                f"  {self.per_task[tid][k][0]:.4f}  {self.per_task[tid][k][1]:.4f}"
                for k in self.k_values
            )
            lines.append(tid + cells)
        mean_cells = "".join(
            f"  {self.mean_recall(k):.4f}  {self.mean_ndcg(k):.4f}"
            for k in self.k_values
        )
        lines.append("MEAN" + mean_cells)
        return "\n".join(lines)

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("task,k,recall,ndcg\n")
            for tid in sorted(self.per_task):
                for k in self.k_values:
                    r, n = self.per_task[tid][k]
                    fh.write(f"{tid},{k},{r!r},{n!r}\n")
            for k in self.k_values:
                fh.write(f"MEAN,{k},{self.mean_recall(k)!r},{self.mean_ndcg(k)!r}\n")


def evaluate(
    recommender: Recommender,
    table: EmbeddingTable,
    tasks: Sequence[EvalTask],
    k_values: Sequence[int],
) -> MetricReport:
    """Run every task: pool the seed rows into the query, recommend with seeds
    excluded, and score the ranking at each cutoff."""
    if not tasks:
        raise ValueError("no evaluation tasks")
    k_values = sorted(int(k) for k in k_values)
    k_max = k_values[-1]
    per_task: dict[str, dict[int, tuple[float, float]]] = {}
    for task in tasks:
        query = pool_playlist(table, task.seeds)
        ranked = recommender(query, k_max, frozenset(task.seeds))
        per_task[task.playlist_id] = {
            k: (
                recall_at_k(ranked, set(task.relevant), k),
                ndcg_at_k(ranked, set(task.relevant), k),
            )
            for k in k_values
        }
    return MetricReport(list(k_values), per_task)


def project_2d(
    table: EmbeddingTable, ids: Sequence[str] | None = None
) -> list[tuple[str, float, float]]:
    """Project embeddings onto their top-2 principal directions.

    Sign convention: each direction's largest-magnitude loading is positive.
    Rank-deficient inputs get a zero second coordinate (with a warning).
    """
    ids = list(ids) if ids is not None else list(table.ids)
    if len(ids) < 2:
        raise ValueError("need at least two vectors to project")
    mat = table.rows(ids)
    centered = mat - mat.mean(axis=0)
    cov = centered.T @ centered / len(ids)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]

    def fix_sign(v: np.ndarray) -> np.ndarray:
        return v if v[np.argmax(np.abs(v))] >= 0 else -v

    first = fix_sign(eigvecs[:, 0])
    x = centered @ first
    tol = max(eigvals[0], 1.0) * 1e-12
    if eigvecs.shape[1] < 2 or eigvals[1] <= tol:
        warnings.warn("input is effectively rank-1; second coordinate zeroed")
        y = np.zeros_like(x)
    else:
        y = centered @ fix_sign(eigvecs[:, 1])
    return [(tid, float(xi), float(yi)) for tid, xi, yi in zip(ids, x, y)]


def save_projection(rows: Sequence[tuple[str, float, float]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,x,y\n")
        for tid, x, y in rows:
            fh.write(f"{tid},{x!r},{y!r}\n")


def sensitivity_sweep(
    corpus: Corpus,
    j_values: Sequence[int],
    encoder_config,
    train_config,
    k_values: Sequence[int],
    q: int,
    eval_seed: int,
) -> list[tuple[int, MetricReport]]:
    """Stage-3 retrieval quality as the fused member-set size varies.

    Stages 1-2 are trained once; each sweep value branches stage 3 from that
    shared checkpoint. Results are ordered by ascending set size.
    """
    from dataclasses import replace as dc_replace

    from . import trainer  # deferred: trainer depends on this module
    from .recsys import build_embedding_table, itemknn_recommend

    if any(j < 1 for j in j_values):
        raise ValueError("fusion set sizes must be >= 1")
    base_model, _ = trainer.run_all_stages(
        corpus, encoder_config, train_config, stages=(1, 2)
    )
    tasks, _ = build_tasks(corpus, q, eval_seed, split="test")
    out = []
    for j in sorted(set(int(j) for j in j_values)):
        cfg = dc_replace(train_config, fusion_neighbors=j)
        model, _ = trainer.run_stage(3, base_model.clone(), corpus, cfg)
        table = build_embedding_table(model.encoder, corpus, "test")

        def recommender(query, k, exclude, _table=table):
            return itemknn_recommend(query, _table, k, exclude)

        out.append((j, evaluate(recommender, table, tasks, k_values)))
    return out

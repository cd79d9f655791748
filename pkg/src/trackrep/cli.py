"""Config-driven experiment runner.

Subcommands: gen-data, train, embed, recommend, eval, ablate, sweep-j,
project. Every command resolves a YAML config plus flags, writes its outputs
under a run directory together with a JSON manifest (resolved config + input
hashes), and is deterministic given config + seed.

Exit codes: 0 success, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .corpus import (
    Corpus,
    CorpusError,
    InteractionGraph,
    SyntheticConfig,
    convert_interaction_log,
    generate_synthetic,
    load_corpus,
    save_corpus,
)
from .encoder import EncoderConfig
from .evaluation import (
    MetricReport,
    build_tasks,
    evaluate,
    project_2d,
    save_projection,
    sensitivity_sweep,
)
from .recsys import (
    ClcrecConfig,
    DropoutNetConfig,
    EmbeddingTable,
    WmfConfig,
    build_embedding_table,
    clcrec_fit,
    clcrec_recommend,
    dropoutnet_fit,
    dropoutnet_recommend,
    itemknn_recommend,
    pool_playlist,
    wmf_fit,
)
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    TrainLog,
    load_model,
    new_model,
    run_stage,
    save_model,
)

RECOMMENDERS = ("itemknn", "dropoutnet", "clcrec")
ABLATION_VARIANTS = (
    "untrained",
    "text-only",
    "audio-only",
    "stage-1",
    "stage-2",
    "stage-3-no-fusion",
    "stage-3-fusion",
)


class ConfigError(ValueError):
    pass


def _from_mapping(cls, data: Mapping, context: str):
    """Build a dataclass from a config mapping, rejecting unknown keys."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"{context}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{context}: unknown field {unknown[0]!r}")
    coerced = {
        k: tuple(v) if isinstance(v, list) and k == "hidden" else v
        for k, v in data.items()
    }
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


@dataclasses.dataclass
class ExperimentConfig:
    seed: int
    output_dir: Path | None
    corpus_source: str
    corpus_path: str | None
    synthetic: SyntheticConfig | None
    log_params: dict
    encoder: dict  # merged onto corpus dims once those are known
    train: TrainConfig
    stages: list[int]
    recommender: str
    wmf: WmfConfig
    dropoutnet: DropoutNetConfig
    clcrec: ClcrecConfig
    k_list: list[int]
    eval_q: int
    eval_seed: int
    ablation_variants: list[str]
    sweep_values: list[int]

    def encoder_config(self, corpus: Corpus) -> EncoderConfig:
        merged = {
            "audio_dim": corpus.audio_dim,
            "text_dim": corpus.text_dim,
            **self.encoder,
        }
        return _from_mapping(EncoderConfig, merged, "encoder")


def load_config(path: str | Path | None, overrides: Mapping | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if overrides:
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}

    known = {
        "seed", "output_dir", "corpus", "encoder", "train", "stages",
        "recommender", "eval", "ablation", "sweep",
    }
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"config: unknown section {unknown[0]!r}")

    seed = int(raw.get("seed", 0))
    corpus_section = raw.get("corpus", {}) or {}
    source = corpus_section.get("source", "synthetic")
    if source not in ("synthetic", "file", "interaction-log"):
        raise ConfigError(f"corpus.source: unknown value {source!r}")
    synthetic = None
    if source == "synthetic":
        syn = dict(corpus_section.get("synthetic", {}) or {})
        syn.setdefault("seed", seed)
        synthetic = _from_mapping(SyntheticConfig, syn, "corpus.synthetic")
    log_params = dict(corpus_section.get("interaction_log", {}) or {})
    log_params.setdefault("seed", seed)
    allowed_log_keys = {"min_len", "max_len", "splits", "audio_dim", "text_dim", "seed"}
    unknown_log = sorted(set(log_params) - allowed_log_keys)
    if unknown_log:
        raise ConfigError(
            f"corpus.interaction_log: unknown field {unknown_log[0]!r}"
        )

    train_section = dict(raw.get("train", {}) or {})
    train_section.setdefault("seed", seed)
    train = _from_mapping(TrainConfig, train_section, "train")

    rec_section = dict(raw.get("recommender", {}) or {})
    rec_name = rec_section.pop("name", "itemknn")
    if rec_name not in RECOMMENDERS:
        raise ConfigError(f"recommender.name: unknown value {rec_name!r}")
    wmf = _from_mapping(WmfConfig, rec_section.pop("wmf", {}) or {}, "recommender.wmf")
    dropoutnet = _from_mapping(
        DropoutNetConfig, rec_section.pop("dropoutnet", {}) or {},
        "recommender.dropoutnet",
    )
    clcrec = _from_mapping(
        ClcrecConfig, rec_section.pop("clcrec", {}) or {}, "recommender.clcrec"
    )
    if rec_section:
        raise ConfigError(
            f"recommender: unknown field {sorted(rec_section)[0]!r}"
        )

    eval_section = dict(raw.get("eval", {}) or {})
    k_list = [int(k) for k in eval_section.pop("k_list", [10, 20, 40])]
    eval_q = int(eval_section.pop("q", 10))
    eval_seed = int(eval_section.pop("seed", seed))
    if eval_section:
        raise ConfigError(f"eval: unknown field {sorted(eval_section)[0]!r}")
    if eval_q < 1:
        raise ConfigError("eval.q: at least one seed track is required")

    stages = [int(s) for s in raw.get("stages", [1, 2, 3])]
    if stages != sorted(set(stages)) or stages != list(range(1, len(stages) + 1)):
        raise ConfigError(f"stages: must be a prefix of [1, 2, 3], got {stages}")

    ablation = dict(raw.get("ablation", {}) or {})
    variants = list(ablation.get("variants", ABLATION_VARIANTS))
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ConfigError(f"ablation.variants: unknown variant {v!r}")
    sweep = dict(raw.get("sweep", {}) or {})
    sweep_values = [int(j) for j in sweep.get("values", [1, 5, 10])]

    out = raw.get("output_dir")
    return ExperimentConfig(
        seed=seed,
        output_dir=Path(out) if out else None,
        corpus_source=source,
        corpus_path=corpus_section.get("path"),
        synthetic=synthetic,
        log_params=log_params,
        encoder=dict(raw.get("encoder", {}) or {}),
        train=train,
        stages=stages,
        recommender=rec_name,
        wmf=wmf,
        dropoutnet=dropoutnet,
        clcrec=clcrec,
        k_list=k_list,
        eval_q=eval_q,
        eval_seed=eval_seed,
        ablation_variants=variants,
        sweep_values=sweep_values,
    )


# -- manifest ------------------------------------------------------------------


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _to_jsonable(dataclasses.asdict(obj))
    if isinstance(obj, Mapping):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    return obj


def write_manifest(out_dir: Path, command: str, config, inputs: Sequence[Path]) -> None:
    manifest = {
        "command": command,
        "config": _to_jsonable(config),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).exists()},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- shared plumbing -----------------------------------------------------------


def _resolve_corpus(config: ExperimentConfig, corpus_path: str | None) -> tuple[Corpus, list[Path]]:
    """Corpus from an explicit file, the configured file, or the generator."""
    path = corpus_path or config.corpus_path
    if path:
        return load_corpus(path), [Path(path)]
    if config.corpus_source == "synthetic":
        corpus, _ = generate_synthetic(config.synthetic)
        return corpus, []
    raise ConfigError("corpus: no path given and source is not synthetic")


def _read_interaction_log(path: str) -> list[tuple[str, str, float]]:
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ConfigError(
                    f"{path}:{lineno}: expected 'user,track,timestamp'"
                )
            events.append((parts[0], parts[1], float(parts[2])))
    return events


def _fit_recommender(
    name: str,
    config: ExperimentConfig,
    corpus: Corpus,
    train_table: EmbeddingTable,
    test_table: EmbeddingTable,
):
    """Returns a (query, k, exclude) -> ranked-ids callable over the test pool."""
    if name == "itemknn":
        return lambda query, k, exclude: itemknn_recommend(
            query, test_table, k, exclude
        )
    graph = InteractionGraph.from_corpus(corpus, "train")
    track_content = {tid: train_table.row(tid) for tid in train_table.ids}
    if name == "clcrec":
        state = clcrec_fit(graph, track_content, config.clcrec)
        return lambda query, k, exclude: clcrec_recommend(
            state, query, test_table, k, exclude
        )
    if name == "dropoutnet":
        wmf = wmf_fit(graph, config.wmf)
        playlist_content = {
            p.id: pool_playlist(train_table, p.track_ids)
            for p in corpus.train_playlists
            if p.track_ids
        }
        state = dropoutnet_fit(wmf, playlist_content, track_content, config.dropoutnet)
        return lambda query, k, exclude: dropoutnet_recommend(
            state, query, test_table, k, exclude
        )
    raise ConfigError(f"unknown recommender {name!r}")


def _normalized_raw_table(corpus: Corpus, split: str, modality: str) -> EmbeddingTable:
    tracks = corpus.tracks(split)
    feats = np.stack(
        [t.audio_feat if modality == "audio" else t.text_feat for t in tracks]
    ).astype(np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return EmbeddingTable([t.id for t in tracks], feats / norms)


def run_ablation(
    corpus: Corpus,
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    variants: Sequence[str],
    k_values: Sequence[int],
    q: int,
    eval_seed: int,
) -> dict[str, MetricReport]:
    """Shared-seed comparison across encoder variants, scored with the
    parameter-free recommender on the test pool."""
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant {v!r}")
    tasks, _ = build_tasks(corpus, q, eval_seed, split="test")
    tables: dict[str, EmbeddingTable] = {}

    if "text-only" in variants:
        tables["text-only"] = _normalized_raw_table(corpus, "test", "text")
    if "audio-only" in variants:
        tables["audio-only"] = _normalized_raw_table(corpus, "test", "audio")

    stage_variants = [v for v in variants if v.startswith(("untrained", "stage"))]
    if stage_variants:
        model0 = new_model(corpus, encoder_config, seed=train_config.seed)
        if "untrained" in variants:
            tables["untrained"] = build_embedding_table(model0.encoder, corpus, "test")
        deepest = max(
            (
                {"stage-1": 1, "stage-2": 2, "stage-3-no-fusion": 3,
                 "stage-3-fusion": 3}[v]
                for v in stage_variants
                if v != "untrained"
            ),
            default=0,
        )
        model = model0
        if deepest >= 1:
            model, _ = run_stage(1, model.clone(), corpus, train_config)
            if "stage-1" in variants:
                tables["stage-1"] = build_embedding_table(model.encoder, corpus, "test")
        if deepest >= 2:
            model, _ = run_stage(2, model.clone(), corpus, train_config)
            if "stage-2" in variants:
                tables["stage-2"] = build_embedding_table(model.encoder, corpus, "test")
        if deepest >= 3:
            if "stage-3-no-fusion" in variants:
                m3, _ = run_stage(
                    3, model.clone(), corpus, train_config, use_fusion=False
                )
                tables["stage-3-no-fusion"] = build_embedding_table(
                    m3.encoder, corpus, "test"
                )
            if "stage-3-fusion" in variants:
                m3, _ = run_stage(3, model.clone(), corpus, train_config)
                tables["stage-3-fusion"] = build_embedding_table(
                    m3.encoder, corpus, "test"
                )

    reports: dict[str, MetricReport] = {}
    for variant in variants:
        table = tables[variant]

        def recommender(query, k, exclude, _table=table):
            return itemknn_recommend(query, _table, k, exclude)

        reports[variant] = evaluate(recommender, table, tasks, k_values)
    return reports


def _write_report(report: MetricReport, out_dir: Path, stem: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save_csv(out_dir / f"{stem}.csv")
    with open(out_dir / f"{stem}.txt", "w", encoding="utf-8") as fh:
        fh.write(report.to_text() + "\n")


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    out_dir = Path(args.out_dir or config.output_dir or "run-gen-data")
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = [Path(args.config)] if args.config else []
    if config.corpus_source == "interaction-log":
        if not config.corpus_path:
            raise ConfigError("corpus.path: required for interaction-log source")
        events = _read_interaction_log(config.corpus_path)
        inputs.append(Path(config.corpus_path))
        params = dict(config.log_params)
        corpus = convert_interaction_log(events, **params)
        genre_of = None
    elif config.corpus_source == "synthetic":
        corpus, genre_of = generate_synthetic(config.synthetic)
    else:
        raise ConfigError("gen-data: corpus.source must be synthetic or interaction-log")
    corpus_path = out_dir / "corpus.jsonl"
    save_corpus(corpus, corpus_path)
    if genre_of is not None:
        with open(out_dir / "genres.csv", "w", encoding="utf-8") as fh:
            fh.write("track,genre\n")
            for tid in sorted(genre_of):
                fh.write(f"{tid},{genre_of[tid]}\n")
    write_manifest(out_dir, "gen-data", config, inputs)
    print(f"wrote {corpus_path}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    corpus, inputs = _resolve_corpus(config, args.corpus)
    if args.config:
        inputs.append(Path(args.config))
    out_dir = Path(args.out_dir or config.output_dir or "run-train")
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = [int(s) for s in args.stages] if args.stages else config.stages
    model = None
    if args.resume:
        model = load_model(args.resume)
        inputs.append(Path(args.resume))
        encoder_config = model.encoder.config
    else:
        encoder_config = config.encoder_config(corpus)
    try:
        final = model
        log = TrainLog()
        for stage in stages:
            if final is None:
                final = new_model(corpus, encoder_config, seed=config.train.seed)
            final, stage_log = run_stage(stage, final, corpus, config.train)
            log.extend(stage_log)
            save_model(out_dir / f"checkpoint-stage-{stage}.npz", final)
        if final is None:
            raise ConfigError("train: empty stage list")
    except TrainingDiverged as exc:
        with open(out_dir / "diagnostic.json", "w", encoding="utf-8") as fh:
            json.dump(_to_jsonable(exc.snapshot), fh, indent=2, sort_keys=True)
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    save_model(out_dir / "checkpoint.npz", final)
    log.save_csv(out_dir / "trainlog.csv")
    write_manifest(out_dir, "train", config, inputs)
    print(f"wrote {out_dir / 'checkpoint.npz'}")
    return 0


def cmd_embed(args) -> int:
    model = load_model(args.checkpoint)
    corpus = load_corpus(args.corpus)
    table = build_embedding_table(
        model.encoder, corpus, args.split, renormalize=not args.raw_means
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.save(out)
    write_manifest(
        out.parent, "embed",
        {"checkpoint": args.checkpoint, "corpus": args.corpus, "split": args.split},
        [Path(args.checkpoint), Path(args.corpus)],
    )
    print(f"wrote {out} ({len(table.ids)} rows)")
    return 0


def cmd_recommend(args) -> int:
    table = EmbeddingTable.load(args.table)
    seeds = [s for s in args.seeds.split(",") if s]
    if not seeds:
        raise ConfigError("recommend: at least one seed id is required")
    missing = [s for s in seeds if s not in set(table.ids)]
    if missing:
        raise ConfigError(f"recommend: seed {missing[0]!r} not in table")
    query = pool_playlist(table, seeds)
    ranked = itemknn_recommend(query, table, args.k, frozenset(seeds))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("".join(tid + "\n" for tid in ranked), encoding="utf-8")
        write_manifest(
            out.parent, "recommend",
            {"table": args.table, "seeds": seeds, "k": args.k},
            [Path(args.table)],
        )
    for tid in ranked:
        print(tid)
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    corpus, inputs = _resolve_corpus(config, args.corpus)
    if args.config:
        inputs.append(Path(args.config))
    out_dir = Path(args.out_dir or config.output_dir or "run-eval")
    recommender_name = args.recommender or config.recommender
    if recommender_name not in RECOMMENDERS:
        raise ConfigError(f"unknown recommender {recommender_name!r}")
    model = load_model(args.checkpoint)
    inputs.append(Path(args.checkpoint))
    if model.encoder.config.audio_dim != corpus.audio_dim or (
        model.encoder.config.text_dim != corpus.text_dim
    ):
        raise ConfigError(
            "checkpoint feature dims do not match the corpus "
            f"({model.encoder.config.audio_dim}/{model.encoder.config.text_dim} "
            f"vs {corpus.audio_dim}/{corpus.text_dim})"
        )
    train_table = build_embedding_table(model.encoder, corpus, "train")
    test_table = build_embedding_table(model.encoder, corpus, "test")
    recommender = _fit_recommender(
        recommender_name, config, corpus, train_table, test_table
    )
    tasks, skipped = build_tasks(corpus, config.eval_q, config.eval_seed, split="test")
    if not tasks:
        raise ConfigError(
            f"eval: no test playlist has more than q={config.eval_q} members"
        )
    report = evaluate(recommender, test_table, tasks, config.k_list)
    _write_report(report, out_dir, f"report-{recommender_name}")
    write_manifest(out_dir, "eval", config, inputs)
    for k in config.k_list:
        print(
            f"{recommender_name} recall@{k}={report.mean_recall(k):.4f} "
            f"ndcg@{k}={report.mean_ndcg(k):.4f}"
        )
    if skipped:
        print(f"skipped {skipped} playlists with <= {config.eval_q} members")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    corpus, inputs = _resolve_corpus(config, args.corpus)
    if args.config:
        inputs.append(Path(args.config))
    out_dir = Path(args.out_dir or config.output_dir or "run-ablate")
    variants = args.variants or config.ablation_variants
    reports = run_ablation(
        corpus,
        config.encoder_config(corpus),
        config.train,
        variants,
        config.k_list,
        config.eval_q,
        config.eval_seed,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", encoding="utf-8") as fh:
        header = "variant" + "".join(f",recall@{k},ndcg@{k}" for k in config.k_list)
        fh.write(header + "\n")
        for variant in variants:
            rep = reports[variant]
            cells = "".join(
                f",{rep.mean_recall(k)!r},{rep.mean_ndcg(k)!r}"
                for k in config.k_list
            )
            fh.write(variant + cells + "\n")
    write_manifest(out_dir, "ablate", config, inputs)
    for variant in variants:
        rep = reports[variant]
        print(f"{variant}: recall@{config.k_list[0]}={rep.mean_recall(config.k_list[0]):.4f}")
    return 0


def cmd_sweep_j(args) -> int:
    config = load_config(args.config)
    corpus, inputs = _resolve_corpus(config, args.corpus)
    if args.config:
        inputs.append(Path(args.config))
    out_dir = Path(args.out_dir or config.output_dir or "run-sweep")
    values = [int(v) for v in args.values] if args.values else config.sweep_values
    results = sensitivity_sweep(
        corpus,
        values,
        config.encoder_config(corpus),
        config.train,
        config.k_list,
        config.eval_q,
        config.eval_seed,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", encoding="utf-8") as fh:
        header = "seed_tracks" + "".join(
            f",recall@{k},ndcg@{k}" for k in config.k_list
        )
        fh.write(header + "\n")
        for j, rep in results:
            cells = "".join(
                f",{rep.mean_recall(k)!r},{rep.mean_ndcg(k)!r}"
                for k in config.k_list
            )
            fh.write(f"{j}{cells}\n")
    write_manifest(out_dir, "sweep-j", config, inputs)
    for j, rep in results:
        print(f"J={j}: recall@{config.k_list[0]}={rep.mean_recall(config.k_list[0]):.4f}")
    return 0


def cmd_project(args) -> int:
    table = EmbeddingTable.load(args.table)
    ids = [s for s in args.ids.split(",") if s] if args.ids else None
    rows = project_2d(table, ids)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_projection(rows, out)
    write_manifest(
        out.parent, "project",
        {"table": args.table, "ids": ids},
        [Path(args.table)],
    )
    print(f"wrote {out} ({len(rows)} points)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trackrep",
        description="Relational contrastive track pre-training and cold-start "
        "playlist continuation experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate or convert a corpus file")
    p.add_argument("--config", help="experiment YAML")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the staged training loop")
    p.add_argument("--config", help="experiment YAML")
    p.add_argument("--corpus", help="corpus file (overrides config)")
    p.add_argument("--out-dir")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stages", nargs="*", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="export an embedding table for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument(
        "--raw-means", action="store_true",
        help="skip the post-pooling renormalization of unified embeddings",
    )
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("recommend", help="rank continuations for seed tracks")
    p.add_argument("--table", required=True, help="embedding table file")
    p.add_argument("--seeds", required=True, help="comma-separated seed ids")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", help="also write the ranking to a file")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("eval", help="fit a recommender and score test tasks")
    p.add_argument("--config", help="experiment YAML")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="corpus file (overrides config)")
    p.add_argument("--recommender", choices=RECOMMENDERS)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare encoder variants")
    p.add_argument("--config", help="experiment YAML")
    p.add_argument("--corpus")
    p.add_argument("--variants", nargs="*", choices=ABLATION_VARIANTS)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-j", help="stage-3 sweep over fused seed-track counts")
    p.add_argument("--config", help="experiment YAML")
    p.add_argument("--corpus")
    p.add_argument("--values", nargs="*", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_sweep_j)

    p = sub.add_parser("project", help="export 2-D principal-component coordinates")
    p.add_argument("--table", required=True)
    p.add_argument("--ids", help="comma-separated subset of ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad flags
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, CorpusError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

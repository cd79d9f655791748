"""Sensitivity of stage-3 retrieval to the fused seed-track count.

Shares the stage-1/2 checkpoint across sweep values and prints Recall@10 /
NDCG@10 per value.

Usage:
    python scripts/run_neighbor_sweep.py --values 1 3 5 10 --seed 1
"""

import argparse

from trackrep.corpus import generate_synthetic
from trackrep.encoder import EncoderConfig
from trackrep.evaluation import sensitivity_sweep
from trackrep.trainer import TrainConfig

from run_desk_ablation import desk_corpus


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--values", nargs="*", type=int, default=[1, 3, 5, 10])
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()

    corpus, _ = generate_synthetic(desk_corpus(args.seed))
    encoder = EncoderConfig(
        audio_dim=64, text_dim=64, hidden=(64,), embed_dim=32, queue_capacity=128
    )
    train = TrainConfig(
        batch_size=50, max_epochs=25, patience=8, lr=2e-3, temperature=0.2,
        val_q=3, seed=args.seed,
    )
    for j, report in sensitivity_sweep(
        corpus, args.values, encoder, train, [10], q=10, eval_seed=args.seed
    ):
        print(
            f"J={j}: recall@10={report.mean_recall(10):.4f} "
            f"ndcg@10={report.mean_ndcg(10):.4f}"
        )


if __name__ == "__main__":
    main()

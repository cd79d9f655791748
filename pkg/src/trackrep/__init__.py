"""Relational contrastive pre-training of track embeddings with a cold-start
playlist continuation stack (nearest-neighbour, factorization + dropout
networks, contrastive reconstruction) and a retrieval evaluation harness.
"""

__version__ = "0.1.0"

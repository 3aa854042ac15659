"""Schema-graph table embeddings: biased random walks plus skip-gram with negative sampling.

The walk's transition rule weights a step back to the previous node by
``1/p`` and a step to any other neighbor by ``1/q``; there is no separate
weight class for neighbors of the previous node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..catalog import Catalog, SchemaGraph, schema_graph


@dataclass(frozen=True)
class SchemaEmbedConfig:
    p: float = 1.0
    q: float = 1.0
    walk_length: int = 10
    walks_per_node: int = 20
    dim: int = 16
    window: int = 3
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025

    def __post_init__(self) -> None:
        if self.p <= 0 or self.q <= 0:
            raise ValueError("p and q must be positive")
        if self.walk_length < 2 or self.walks_per_node < 1:
            raise ValueError("walk_length >= 2 and walks_per_node >= 1 required")
        if min(self.dim, self.window, self.negatives, self.epochs) < 1:
            raise ValueError("dim, window, negatives and epochs must be positive")


def biased_walks(adj: list[list[int]], cfg: SchemaEmbedConfig, rng: np.random.Generator) -> list[list[int]]:
    walks = []
    inv_p, inv_q = 1.0 / cfg.p, 1.0 / cfg.q
    for _ in range(cfg.walks_per_node):
        for start in range(len(adj)):
            walk = [start]
            while len(walk) < cfg.walk_length:
                nbrs = adj[walk[-1]]
                if not nbrs:
                    break  # isolated node: the walk stays trivial
                if len(walk) == 1:
                    nxt = nbrs[int(rng.integers(len(nbrs)))]
                else:
                    prev = walk[-2]
                    w = np.array([inv_p if x == prev else inv_q for x in nbrs])
                    nxt = nbrs[int(rng.choice(len(nbrs), p=w / w.sum()))]
                walk.append(nxt)
            walks.append(walk)
    return walks


def _skipgram_pairs(walks: list[list[int]], window: int) -> tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    for walk in walks:
        for i, c in enumerate(walk):
            for k in range(max(0, i - window), min(len(walk), i + window + 1)):
                if k != i:
                    centers.append(c)
                    contexts.append(walk[k])
    return np.array(centers, dtype=np.int64), np.array(contexts, dtype=np.int64)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def train_skipgram(walks: list[list[int]], n_nodes: int, cfg: SchemaEmbedConfig, rng: np.random.Generator):
    """Mini-batch SGD on the negative-sampling objective; returns (input, output) vectors."""
    w_in = rng.uniform(-0.5 / cfg.dim, 0.5 / cfg.dim, size=(n_nodes, cfg.dim))
    w_out = np.zeros((n_nodes, cfg.dim))
    centers, contexts = _skipgram_pairs(walks, cfg.window)
    if len(centers) == 0:
        return w_in, w_out
    counts = np.bincount(np.concatenate([np.concatenate(walks)]), minlength=n_nodes).astype(float)
    noise = counts**0.75
    noise /= noise.sum()
    batch = 64
    total_steps = cfg.epochs * int(np.ceil(len(centers) / batch))
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(centers))
        for b0 in range(0, len(order), batch):
            idx = order[b0:b0 + batch]
            lr = cfg.lr * max(1e-4, 1.0 - step / total_steps)
            step += 1
            c, o = centers[idx], contexts[idx]
            neg = rng.choice(n_nodes, size=(len(idx), cfg.negatives), p=noise)
            vc = w_in[c]                                   # (B, d)
            targets = np.concatenate([o[:, None], neg], 1)  # (B, 1+K)
            vo = w_out[targets]                             # (B, 1+K, d)
            labels = np.zeros(targets.shape)
            labels[:, 0] = 1.0
            score = _sigmoid(np.einsum("bd,bkd->bk", vc, vo))
            g = (score - labels)                            # d loss / d logit
            grad_c = np.einsum("bk,bkd->bd", g, vo)
            grad_o = g[:, :, None] * vc[:, None, :]
            np.add.at(w_in, c, -lr * grad_c)
            np.add.at(w_out, targets.reshape(-1), -lr * grad_o.reshape(-1, cfg.dim))
    return w_in, w_out


def pool_occurrences(walks: list[list[int]], w_in: np.ndarray, window: int) -> np.ndarray:
    """Average, over every occurrence of a node, the mean input vector of its window."""
    n, d = w_in.shape
    acc = np.zeros((n, d))
    hits = np.zeros(n)
    for walk in walks:
        vecs = w_in[walk]
        for i, node in enumerate(walk):
            lo, hi = max(0, i - window), min(len(walk), i + window + 1)
            acc[node] += vecs[lo:hi].mean(axis=0)
            hits[node] += 1
    never = hits == 0
    acc[never] = w_in[never]
    hits[never] = 1
    return acc / hits[:, None]


def embed_graph(graph: SchemaGraph, cfg: SchemaEmbedConfig, seed: int) -> dict[str, np.ndarray]:
    if not graph.nodes:
        raise ValueError("empty schema graph")
    names = list(graph.nodes)
    pos = {n: i for i, n in enumerate(names)}
    adj = [[pos[nb] for nb in graph.neighbors(n)] for n in names]
    rng = np.random.default_rng(seed)
    walks = biased_walks(adj, cfg, rng)
    w_in, _ = train_skipgram(walks, len(names), cfg, rng)
    pooled = pool_occurrences(walks, w_in, cfg.window)
    return {n: pooled[i] for i, n in enumerate(names)}


def schema_embeddings(catalog: Catalog, cfg: SchemaEmbedConfig | None = None, seed: int = 0) -> dict[str, np.ndarray]:
    """Table name -> R(T0) vector of size ``cfg.dim``."""
    return embed_graph(schema_graph(catalog), cfg or SchemaEmbedConfig(), seed)

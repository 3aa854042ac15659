"""Query-graph encoder: masked multi-head dot-product attention over join neighbors."""
from __future__ import annotations

import numpy as np

from ..autodiff import Tape, Tensor

NEG = -1e9


def attention_bias(adjacency: np.ndarray) -> Tensor:
    """0 where attention is allowed (join neighbors and self), a large negative elsewhere."""
    allowed = (adjacency > 0) | np.eye(len(adjacency), dtype=bool)
    return Tensor(np.where(allowed, 0.0, NEG))


def attention_layer(
    x: Tensor, bias: Tensor, w_qkv: Tensor, w_merge: Tensor, b_merge: Tensor, heads: int, tape: Tape,
    weights_out: list | None = None,
) -> Tensor:
    """One layer: per-head softmax(QK^T/sqrt(dk) + bias) V, heads concatenated,
    affine merge, residual add, tanh.  ``w_qkv`` is (hs, 3 * heads * dk)."""
    width = w_qkv.shape[1] // 3
    dk = width // heads
    proj = tape.matmul(x, w_qkv)
    outs = []
    for h in range(heads):
        q = tape.slice(proj, cols=slice(h * dk, (h + 1) * dk))
        k = tape.slice(proj, cols=slice(width + h * dk, width + (h + 1) * dk))
        v = tape.slice(proj, cols=slice(2 * width + h * dk, 2 * width + (h + 1) * dk))
        scores = tape.add(tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / np.sqrt(dk)), bias)
        attn = tape.softmax(scores)
        if weights_out is not None:
            weights_out.append(attn.data.copy())
        outs.append(tape.matmul(attn, v))
    merged = tape.add(tape.matmul(tape.concat(outs, axis=1), w_merge), b_merge)
    return tape.tanh(tape.add(x, merged))


def query_graph_embedding(
    table_embs: Tensor, adjacency: np.ndarray, layers: list[tuple[Tensor, Tensor, Tensor]], heads: int, tape: Tape,
    weights_out: list | None = None,
) -> Tensor:
    """Stacked attention layers over the query's tables, then global mean pooling -> (1, hs)."""
    bias = attention_bias(adjacency)
    x = table_embs
    for w_qkv, w_merge, b_merge in layers:
        x = attention_layer(x, bias, w_qkv, w_merge, b_merge, heads, tape, weights_out)
    return tape.mean_pool(x)

"""Per-column predicate features and their learned projections."""
from __future__ import annotations

import numpy as np

from ..autodiff import Tape, Tensor
from ..catalog import Catalog, selectivity
from ..query import Query

# feature slots: [join, =, <, >, <=, >=]
SLOT = {"=": 1, "<": 2, ">": 3, "<=": 4, ">=": 5}
FEATURE_SIZE = 6


def column_feature(query: Query, table: str, column: str, catalog: Catalog) -> np.ndarray:
    col = catalog.column(table, column)  # KeyError for unknown columns
    f = np.zeros(FEATURE_SIZE)
    ref = (table, column)
    if any(j.left == ref or j.right == ref for j in query.joins):
        f[0] = 1.0
    touched = [False] * FEATURE_SIZE

    def put(slot: int, value: float) -> None:
        # several predicates on one slot combine under independence
        f[slot] = f[slot] * value if touched[slot] else value
        touched[slot] = True

    for s in query.selections:
        if s.table != table or s.column != column:
            continue
        if s.op == "BETWEEN":
            low, high = s.literals
            put(SLOT["<="], selectivity(col, "<=", high))
            put(SLOT[">="], selectivity(col, ">=", low))
        else:
            put(SLOT[s.op], selectivity(col, s.op, s.literals[0]))
    return f


def column_embedding(tape: Tape, feature: Tensor, matrix: Tensor) -> Tensor:
    """R(c) = F(c) . M(c): (1, 6) x (6, hs) -> (1, hs)."""
    if feature.shape != (1, FEATURE_SIZE):
        raise ValueError(f"column feature must have shape (1, 6), got {feature.shape}")
    return tape.matmul(feature, matrix)

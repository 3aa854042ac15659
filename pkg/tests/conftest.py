from __future__ import annotations

import pytest

from joinrl.catalog import Catalog, ColumnStats, TableStats, generate_catalog
from joinrl.query import generate_workload, parse_spj

EXAMPLE_SQL = (
    "SELECT T1.c FROM T1, T2, T3, T4 WHERE T1.a < 40 AND T1.a > 60 "
    "AND T1.d BETWEEN 10 AND 20 AND T2.b = T3.b AND T1.c = T4.c;"
)


def four_table_catalog() -> Catalog:
    """T1..T4 with T1.a holding 100 distinct values in [1, 100]."""
    t1 = TableStats("T1", 1000, (
        ColumnStats("a", 100, 1, 100),
        ColumnStats("c", 100, 1, 100, True),
        ColumnStats("d", 100, 1, 100),
    ))
    t2 = TableStats("T2", 500, (ColumnStats("b", 50, 1, 50, True), ColumnStats("x", 10, 1, 10)))
    t3 = TableStats("T3", 2000, (ColumnStats("b", 50, 1, 50, True), ColumnStats("y", 20, 1, 20)))
    t4 = TableStats("T4", 100, (ColumnStats("c", 100, 1, 100, True),))
    edges = frozenset({(("T2", "b"), ("T3", "b")), (("T1", "c"), ("T4", "c")), (("T1", "c"), ("T2", "b"))})
    return Catalog((t1, t2, t3, t4), edges, seed=0)


@pytest.fixture(scope="session")
def example_catalog() -> Catalog:
    return four_table_catalog()


@pytest.fixture(scope="session")
def example_query(example_catalog):
    return parse_spj(EXAMPLE_SQL, example_catalog, allow_disconnected=True)


@pytest.fixture(scope="session")
def catalog12() -> Catalog:
    return generate_catalog(7, 12, 6, 0.3)


@pytest.fixture(scope="session")
def workload12(catalog12):
    return generate_workload(catalog12, 3, 200, 2, 6)


def pipeline_fd_error(catalog: Catalog, query, seed: int, max_entries: int = 4) -> float:
    """Finite-difference check of a TD-style loss through column -> table -> query -> tree -> forest -> Q.

    A random legal action prefix is fixed first, so every perturbed evaluation builds the same forest.
    """
    import numpy as np

    from joinrl.agent import AgentConfig, QNetwork, action_mask, apply_action
    from joinrl.autodiff import Tape, finite_difference_check
    from joinrl.encoders import Encoder, EncoderConfig

    rng = np.random.default_rng(seed)
    enc = Encoder(catalog, EncoderConfig(hs=4, gnn_heads=2), seed=seed)
    n = len(catalog.tables)
    net = QNetwork(8, n * (n - 1) // 2, AgentConfig(trunk=(5,), seed=seed), seed)

    def rollout(tape):
        ctx = enc.context(query, tape)
        forest = enc.initial_forest(ctx)
        for a in actions:
            forest = apply_action(forest, a, query, catalog, enc, ctx, tape)
        return ctx, forest

    actions: list[int] = []
    _, forest = rollout(Tape(record=False))
    for _ in range(int(rng.integers(1, len(query.tables)))):
        mask = action_mask(query, forest, catalog)
        if mask.terminal:
            break
        actions.append(int(rng.choice(np.flatnonzero(mask.vector))))
        _, forest = rollout(Tape(record=False))
    mask = action_mask(query, forest, catalog)
    if mask.terminal:
        actions.pop()
        _, forest = rollout(Tape(record=False))
        mask = action_mask(query, forest, catalog)
    target = float(rng.normal())
    a_star = int(rng.choice(np.flatnonzero(mask.vector)))

    def loss(tape):
        ctx, forest = rollout(tape)
        from joinrl.autodiff import Tensor
        q = net.forward(tape, enc.state(ctx, forest, tape), mask.vector[None, :])
        onehot = np.zeros((1, q.shape[1]))
        onehot[0, a_star] = 1.0
        q_sa = tape.sum(tape.mul(q, Tensor(onehot)))
        return tape.square(tape.sub(q_sa, Tensor([[target]])))

    params = dict(enc.params)
    params.update(net.params)
    return finite_difference_check(loss, params, max_entries=max_entries, rng=rng)

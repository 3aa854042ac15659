"""The full representation stack: columns -> tables -> query graph, and join trees -> forest -> state."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..autodiff import Tape, Tensor, init_param
from ..catalog import Catalog
from ..environment import Join, Leaf, Plan
from ..query import JoinPredicate, Query, join_matrix
from .features import FEATURE_SIZE, column_feature
from .graph import query_graph_embedding
from .schema import SchemaEmbedConfig, schema_embeddings
from .tree import TreeNodeState, child_sum_unit, leaf_state, nary_unit


@dataclass(frozen=True)
class EncoderConfig:
    hs: int = 32
    gnn_layers: int = 2
    gnn_heads: int = 2
    pool: str = "mean"
    schema: SchemaEmbedConfig = field(default_factory=SchemaEmbedConfig)

    def __post_init__(self) -> None:
        if self.hs < 1 or self.gnn_heads < 1:
            raise ValueError("hs and gnn_heads must be positive")
        if self.gnn_layers != 2:
            raise ValueError("the query encoder uses exactly two attention layers")
        if self.hs % self.gnn_heads:
            raise ValueError("hs must be divisible by gnn_heads")
        if self.pool != "mean":
            raise ValueError("only mean pooling is supported")

    def to_dict(self) -> dict:
        s = self.schema
        return {
            "hs": self.hs, "gnn_layers": self.gnn_layers, "gnn_heads": self.gnn_heads, "pool": self.pool,
            "schema": {k: getattr(s, k) for k in s.__dataclass_fields__},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EncoderConfig":
        doc = dict(doc)
        schema = SchemaEmbedConfig(**doc.pop("schema", {}))
        return cls(schema=schema, **doc)


@dataclass(frozen=True)
class JoinTree:
    plan: Plan
    state: TreeNodeState


@dataclass(frozen=True)
class JoinForest:
    trees: tuple[JoinTree, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for t in self.trees:
            if seen & t.plan.tables:
                raise ValueError("forest trees must be disjoint in tables")
            seen |= t.plan.tables

    @property
    def covered(self) -> frozenset[str]:
        return frozenset().union(*(t.plan.tables for t in self.trees))

    def tree_of(self) -> dict[str, int]:
        return {name: k for k, t in enumerate(self.trees) for name in t.plan.tables}

    def __len__(self) -> int:
        return len(self.trees)


@dataclass
class QueryContext:
    """Everything about one query that does not change during an episode."""
    query: Query
    table_h: dict[str, Tensor]
    rq: Tensor
    column_h: dict[tuple[str, str], Tensor]


class Encoder:
    def __init__(self, catalog: Catalog, cfg: EncoderConfig | None = None, seed: int = 0,
                 schema_emb: Mapping[str, np.ndarray] | None = None) -> None:
        self.catalog = catalog
        self.cfg = cfg or EncoderConfig()
        self.seed = seed
        if schema_emb is None:
            schema_emb = schema_embeddings(catalog, self.cfg.schema, seed)
        self.schema_emb = {t: np.asarray(v, dtype=float).reshape(1, -1) for t, v in schema_emb.items()}
        self.params = self._init_params(seed)

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        hs = self.cfg.hs
        dim = next(iter(self.schema_emb.values())).shape[1]
        p: dict[str, Tensor] = {}
        for t, c in self.catalog.all_columns():
            name = f"col/{t}.{c}/M"
            p[name] = init_param(seed, name, FEATURE_SIZE, hs)
        p["schema/proj/W"] = init_param(seed, "schema/proj/W", dim, hs)
        p["schema/proj/b"] = init_param(seed, "schema/proj/b", 1, hs, fan_in=dim)
        p["table/fc/W"] = init_param(seed, "table/fc/W", 2 * hs, hs)
        p["table/fc/b"] = init_param(seed, "table/fc/b", 1, hs, fan_in=2 * hs)
        for layer in range(self.cfg.gnn_layers):
            pre = f"gnn/layer{layer}"
            p[f"{pre}/qkv"] = init_param(seed, f"{pre}/qkv", hs, 3 * hs)
            p[f"{pre}/merge/W"] = init_param(seed, f"{pre}/merge/W", hs, hs)
            p[f"{pre}/merge/b"] = init_param(seed, f"{pre}/merge/b", 1, hs, fan_in=hs)
        p["tree/nary/U"] = init_param(seed, "tree/nary/U", 4 * hs, 7 * hs)
        p["tree/nary/b"] = init_param(seed, "tree/nary/b", 1, 7 * hs, fan_in=4 * hs)
        p["tree/childsum/U_iou"] = init_param(seed, "tree/childsum/U_iou", hs, 3 * hs)
        p["tree/childsum/b_iou"] = init_param(seed, "tree/childsum/b_iou", 1, 3 * hs, fan_in=hs)
        p["tree/childsum/U_f"] = init_param(seed, "tree/childsum/U_f", hs, hs)
        p["tree/childsum/b_f"] = init_param(seed, "tree/childsum/b_f", 1, hs, fan_in=hs)
        return p

    @property
    def hs(self) -> int:
        return self.cfg.hs

    # -- column / table level -------------------------------------------------
    def column_embedding(self, query: Query, table: str, column: str, tape: Tape) -> Tensor:
        f = Tensor(column_feature(query, table, column, self.catalog).reshape(1, -1))
        return tape.matmul(f, self.params[f"col/{table}.{column}/M"])

    def pooled_columns(self, query: Query, table: str, tape: Tape) -> Tensor:
        """Mean of F(c) M(c) over the table's columns, as one stacked product."""
        cols = self.catalog.table(table).columns
        feats = np.concatenate([column_feature(query, table, c.name, self.catalog) for c in cols])
        mats = [self.params[f"col/{table}.{c.name}/M"] for c in cols]
        stacked = tape.concat(mats, axis=0) if len(mats) > 1 else mats[0]
        return tape.scale(tape.matmul(Tensor(feats.reshape(1, -1)), stacked), 1.0 / len(cols))

    def table_embeddings(self, query: Query, tables, tape: Tape) -> Tensor:
        """R(T) = FC(pool(R(c) for c in T) (+) proj(R(T0))) for each table, stacked as rows."""
        p = self.params
        pooled = [self.pooled_columns(query, t, tape) for t in tables]
        pooled = tape.concat(pooled, axis=0) if len(pooled) > 1 else pooled[0]
        r0 = Tensor(np.concatenate([self.schema_emb[t] for t in tables], axis=0))
        proj = tape.add(tape.matmul(r0, p["schema/proj/W"]), p["schema/proj/b"])
        both = tape.concat([pooled, proj], axis=1)
        return tape.add(tape.matmul(both, p["table/fc/W"]), p["table/fc/b"])

    def table_embedding(self, query: Query, table: str, tape: Tape) -> Tensor:
        return self.table_embeddings(query, [table], tape)

    # -- query level -------------------------------------------------------------
    def query_embedding(self, query: Query, table_embs: Tensor, tape: Tape, weights_out: list | None = None) -> Tensor:
        jm = join_matrix(query, self.catalog)
        idx = [self.catalog.table_index(t) for t in query.tables]
        adjacency = jm.m[np.ix_(idx, idx)]
        return self.graph_embedding(table_embs, adjacency, tape, weights_out)

    def graph_embedding(self, table_embs: Tensor, adjacency: np.ndarray, tape: Tape,
                        weights_out: list | None = None) -> Tensor:
        p = self.params
        layers = [
            (p[f"gnn/layer{k}/qkv"], p[f"gnn/layer{k}/merge/W"], p[f"gnn/layer{k}/merge/b"])
            for k in range(self.cfg.gnn_layers)
        ]
        return query_graph_embedding(table_embs, adjacency, layers, self.cfg.gnn_heads, tape, weights_out)

    def context(self, query: Query, tape: Tape) -> QueryContext:
        embs = self.table_embeddings(query, query.tables, tape)
        table_h = {t: tape.slice(embs, rows=slice(k, k + 1)) for k, t in enumerate(query.tables)}
        rq = self.query_embedding(query, embs, tape)
        column_h = {}
        for j in query.sorted_joins():
            for ref in (j.left, j.right):
                if ref not in column_h:
                    column_h[ref] = self.column_embedding(query, ref[0], ref[1], tape)
        return QueryContext(query, table_h, rq, column_h)

    # -- trees / forest / state --------------------------------------------------------
    def initial_forest(self, ctx: QueryContext) -> JoinForest:
        return JoinForest(tuple(JoinTree(Leaf(t), leaf_state(ctx.table_h[t])) for t in ctx.query.tables))

    def join_trees(self, left: JoinTree, right: JoinTree, pred: JoinPredicate, ctx: QueryContext, tape: Tape) -> JoinTree:
        """Children in order alpha0=left tree, beta0=left column, beta1=right column, alpha1=right tree."""
        a, b = pred.tables
        left_col = pred.left if a in left.plan.tables else pred.right
        right_col = pred.right if left_col == pred.left else pred.left
        children = [
            left.state,
            leaf_state(ctx.column_h[left_col]),
            leaf_state(ctx.column_h[right_col]),
            right.state,
        ]
        state = nary_unit(children, self.params["tree/nary/U"], self.params["tree/nary/b"], tape)
        return JoinTree(Join(left.plan, right.plan, pred), state)

    def encode_tree(self, plan: Plan, ctx: QueryContext, tape: Tape) -> TreeNodeState:
        """Recursive encoding of a whole plan (leaf: h = R(T), c = 0)."""
        return self._encode(plan, ctx, tape).state

    def _encode(self, plan: Plan, ctx: QueryContext, tape: Tape) -> JoinTree:
        if isinstance(plan, Leaf):
            return JoinTree(plan, leaf_state(ctx.table_h[plan.table]))
        return self.join_trees(self._encode(plan.left, ctx, tape), self._encode(plan.right, ctx, tape),
                               plan.predicate, ctx, tape)

    def forest_embedding(self, forest: JoinForest, tape: Tape) -> Tensor:
        if not forest.trees:
            raise ValueError("empty forest")
        p = self.params
        root = child_sum_unit([t.state for t in forest.trees], p["tree/childsum/U_iou"], p["tree/childsum/b_iou"],
                              p["tree/childsum/U_f"], p["tree/childsum/b_f"], tape)
        return root.h

    @staticmethod
    def state_embedding(rq: Tensor, rf: Tensor, tape: Tape) -> Tensor:
        return tape.concat([rq, rf], axis=1)

    def state(self, ctx: QueryContext, forest: JoinForest, tape: Tape) -> Tensor:
        return self.state_embedding(ctx.rq, self.forest_embedding(forest, tape), tape)

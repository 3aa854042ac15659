"""Synthetic schema, column statistics, and uniform-model selectivities."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

COMPARISON_OPS = ("=", "<", ">", "<=", ">=", "BETWEEN")

ColumnRef = tuple[str, str]
FkEdge = tuple[ColumnRef, ColumnRef]


@dataclass(frozen=True)
class ColumnStats:
    name: str
    distinct_count: int
    min_val: int
    max_val: int
    is_key: bool = False

    def __post_init__(self) -> None:
        if self.distinct_count < 1:
            raise ValueError(f"column {self.name}: distinct_count must be >= 1")
        if self.min_val > self.max_val:
            raise ValueError(f"column {self.name}: min_val > max_val")
        if self.distinct_count > self.max_val - self.min_val + 1:
            raise ValueError(f"column {self.name}: more distinct values than the domain holds")

    @property
    def domain_size(self) -> int:
        return self.max_val - self.min_val + 1


@dataclass(frozen=True)
class TableStats:
    name: str
    row_count: int
    columns: tuple[ColumnStats, ...]

    def __post_init__(self) -> None:
        if self.row_count < 1:
            raise ValueError(f"table {self.name}: row_count must be positive")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError(f"table {self.name}: duplicate column names")
        for c in self.columns:
            if c.distinct_count > self.row_count:
                raise ValueError(f"table {self.name}: column {c.name} has more distinct values than rows")

    def column(self, name: str) -> ColumnStats:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(f"{self.name}.{name}")

    def has_column(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)


def _canon_edge(a: ColumnRef, b: ColumnRef) -> FkEdge:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class Catalog:
    tables: tuple[TableStats, ...]
    fk_edges: frozenset[FkEdge]
    seed: int = 0

    def __post_init__(self) -> None:
        names = [t.name for t in self.tables]
        if not names:
            raise ValueError("catalog needs at least one table")
        if len(set(names)) != len(names):
            raise ValueError("duplicate table names")
        object.__setattr__(self, "fk_edges", frozenset(_canon_edge(a, b) for a, b in self.fk_edges))
        index = {t.name: t for t in self.tables}
        for a, b in self.fk_edges:
            for t, c in (a, b):
                if t not in index or not index[t].has_column(c):
                    raise ValueError(f"fk edge references unknown column {t}.{c}")
            if a[0] == b[0]:
                raise ValueError(f"fk edge within one table: {a} {b}")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def table_index(self, name: str) -> int:
        return self._index[name]  # type: ignore[attr-defined]

    def has_table(self, name: str) -> bool:
        return name in self._index  # type: ignore[attr-defined]

    def table(self, name: str) -> TableStats:
        return self.tables[self.table_index(name)]

    def column(self, table: str, column: str) -> ColumnStats:
        return self.table(table).column(column)

    def all_columns(self) -> list[ColumnRef]:
        return [(t.name, c.name) for t in self.tables for c in t.columns]

    # -- serialization --------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "tables": [
                {
                    "name": t.name,
                    "row_count": t.row_count,
                    "columns": [
                        {"name": c.name, "distinct": c.distinct_count, "min": c.min_val,
                         "max": c.max_val, "is_key": c.is_key}
                        for c in t.columns
                    ],
                }
                for t in self.tables
            ],
            "fk_edges": [[list(a), list(b)] for a, b in sorted(self.fk_edges)],
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "Catalog":
        tables = tuple(
            TableStats(
                name=t["name"],
                row_count=int(t["row_count"]),
                columns=tuple(
                    ColumnStats(c["name"], int(c["distinct"]), int(c["min"]), int(c["max"]), bool(c["is_key"]))
                    for c in t["columns"]
                ),
            )
            for t in doc["tables"]
        )
        edges = frozenset((tuple(a), tuple(b)) for a, b in doc["fk_edges"])
        return cls(tables=tables, fk_edges=edges, seed=int(doc.get("seed", 0)))

    @classmethod
    def from_json(cls, text: str) -> "Catalog":
        return cls.from_dict(json.loads(text))


# -- generation ----------------------------------------------------------------

def generate_catalog(seed: int, n_tables: int, max_cols: int = 6, fk_density: float = 0.3) -> Catalog:
    """Deterministic random schema.

    Row counts are log-uniform in [1e2, 1e6]. A random spanning tree of PK-FK
    edges keeps the schema connected whenever ``fk_density > 0``; every other
    table pair gains an extra edge with probability ``fk_density``.
    """
    if n_tables < 1:
        raise ValueError("n_tables must be >= 1")
    if max_cols < 2:
        raise ValueError("max_cols must be >= 2")
    if not 0.0 <= fk_density <= 1.0:
        raise ValueError("fk_density must lie in [0, 1]")
    rng = np.random.default_rng(seed)

    rows = [int(round(10 ** rng.uniform(2.0, 6.0))) for _ in range(n_tables)]
    # guarantee the two-orders-of-magnitude spread
    if n_tables >= 2:
        lo, hi = int(np.argmin(rows)), int(np.argmax(rows))
        if lo == hi:
            hi = (lo + 1) % n_tables
        rows[lo] = min(rows[lo], int(round(10 ** rng.uniform(2.0, 2.5))))
        rows[hi] = max(rows[hi], int(round(10 ** rng.uniform(5.5, 6.0))))

    pairs: list[tuple[int, int]] = []
    if fk_density > 0 and n_tables >= 2:
        order = rng.permutation(n_tables)
        for k in range(1, n_tables):
            parent = int(order[rng.integers(0, k)])
            pairs.append((parent, int(order[k])))
        in_tree = {frozenset(p) for p in pairs}
        for i in range(n_tables):
            for j in range(i + 1, n_tables):
                if frozenset((i, j)) not in in_tree and rng.random() < fk_density:
                    pairs.append((i, j) if rng.random() < 0.5 else (j, i))

    # (parent, child): child carries a foreign key to parent's key column
    fk_cols: dict[int, list[int]] = {i: [] for i in range(n_tables)}
    has_pk = [False] * n_tables
    for parent, child in pairs:
        has_pk[parent] = True
        fk_cols[child].append(parent)

    tables: list[TableStats] = []
    edges: set[FkEdge] = set()
    for i in range(n_tables):
        name = f"t{i}"
        r = rows[i]
        cols: list[ColumnStats] = []
        key_cols = (1 if has_pk[i] else 0) + len(fk_cols[i])
        # key columns may push a hub table past max_cols
        n_cols = max(int(rng.integers(2, max_cols + 1)), key_cols + 1)
        if has_pk[i]:
            cols.append(ColumnStats("id", r, 1, r, True))
        for parent in fk_cols[i]:
            prow = rows[parent]
            # skewed foreign keys: not every parent value is referenced
            hi = min(prow, r)
            lo = max(1, hi // 50)
            d = int(round(math.exp(rng.uniform(math.log(lo), math.log(hi))))) if hi > lo else hi
            d = max(1, min(d, hi))
            cname = f"fk_t{parent}"
            cols.append(ColumnStats(cname, d, 1, max(prow, d), True))
            edges.add(_canon_edge((f"t{parent}", "id"), (name, cname)))
        k = 0
        while len(cols) < n_cols:
            span = int(rng.choice([10, 100, 1000, 10000]))
            d = int(min(r, span, int(rng.integers(1, span + 1))))
            d = max(d, 1)
            cols.append(ColumnStats(f"c{k}", d, 1, max(span, d), False))
            k += 1
        tables.append(TableStats(name, r, tuple(cols)))
    return Catalog(tables=tuple(tables), fk_edges=frozenset(edges), seed=seed)


# -- selectivity -----------------------------------------------------------------

def _clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else 1.0 if x > 1.0 else x


def selectivity(col: ColumnStats, op: str, literal) -> float:
    """Fraction of rows surviving ``col <op> literal``.

    Values are modeled as uniform over the integer domain [min_val, max_val];
    equality uses ``1 / distinct_count``.  BETWEEN takes a ``(low, high)`` pair.
    """
    lo, hi, n = col.min_val, col.max_val, col.domain_size
    if op == "=":
        v = int(literal)
        return 1.0 / col.distinct_count if lo <= v <= hi else 0.0
    if op == "<":
        return _clamp01((int(literal) - lo) / n)
    if op == "<=":
        return _clamp01((int(literal) - lo + 1) / n)
    if op == ">":
        return _clamp01((hi - int(literal)) / n)
    if op == ">=":
        return _clamp01((hi - int(literal) + 1) / n)
    if op == "BETWEEN":
        low, high = literal
        if low > high:
            raise ValueError("BETWEEN needs low <= high")
        return _clamp01(selectivity(col, "<=", high) + selectivity(col, ">=", low) - 1.0)
    raise ValueError(f"unknown comparison operator {op!r}")


def join_selectivity(a: ColumnStats, b: ColumnStats) -> float:
    return 1.0 / max(a.distinct_count, b.distinct_count)


# -- schema graph ------------------------------------------------------------------

@dataclass(frozen=True)
class SchemaGraph:
    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]

    def neighbors(self, node: str) -> list[str]:
        out = [b for a, b in self.edges if a == node] + [a for a, b in self.edges if b == node]
        return sorted(out, key=self.nodes.index)

    def adjacency(self) -> dict[str, list[str]]:
        return {n: self.neighbors(n) for n in self.nodes}

    def is_connected(self) -> bool:
        if not self.nodes:
            return False
        adj = self.adjacency()
        seen = {self.nodes[0]}
        stack = [self.nodes[0]]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.nodes)


def schema_graph(catalog: Catalog) -> SchemaGraph:
    order = {n: i for i, n in enumerate(catalog.table_names)}
    edges = set()
    for (ta, _), (tb, _) in catalog.fk_edges:
        edges.add((ta, tb) if order[ta] < order[tb] else (tb, ta))
    return SchemaGraph(nodes=tuple(catalog.table_names), edges=frozenset(edges))


def materialize_uniform(col: ColumnStats, n_rows: int | None = None) -> np.ndarray:
    """Small materialized column for test oracles: ``distinct_count`` evenly spaced values, repeated."""
    values = np.unique(np.linspace(col.min_val, col.max_val, col.distinct_count).round().astype(np.int64))
    n_rows = len(values) if n_rows is None else n_rows
    return np.resize(values, n_rows)


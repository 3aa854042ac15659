"""SPJ query model: a small SQL parser, join matrices, and workload generation.

Grammar (keywords case-insensitive, identifiers case-sensitive)::

    SELECT ( '*' | colref {',' colref} ) FROM ident {',' ident}
        [ WHERE pred { AND pred } ] [';']
    pred   := colref '=' colref
            | colref cmp int | int cmp colref
            | colref BETWEEN int AND int
    colref := ident '.' ident
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .catalog import Catalog, schema_graph

ColumnRef = tuple[str, str]

_FLIP = {"<": ">", ">": "<", "<=": ">=", ">=": "<=", "=": "="}


class SQLSyntaxError(ValueError):
    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} at position {position}")
        self.position = position


class SQLSemanticError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class SelectionPredicate:
    table: str
    column: str
    op: str
    literals: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.op == "BETWEEN":
            if len(self.literals) != 2 or self.literals[0] > self.literals[1]:
                raise ValueError("BETWEEN needs two literals with low <= high")
        elif self.op in ("=", "<", ">", "<=", ">="):
            if len(self.literals) != 1:
                raise ValueError(f"{self.op} takes exactly one literal")
        else:
            raise ValueError(f"unsupported operator {self.op!r}")

    @property
    def literal(self):
        return self.literals if self.op == "BETWEEN" else self.literals[0]

    def to_sql(self) -> str:
        if self.op == "BETWEEN":
            return f"{self.table}.{self.column} BETWEEN {self.literals[0]} AND {self.literals[1]}"
        return f"{self.table}.{self.column} {self.op} {self.literals[0]}"


@dataclass(frozen=True, order=True)
class JoinPredicate:
    left: ColumnRef
    right: ColumnRef

    def __post_init__(self) -> None:
        if self.left[0] == self.right[0]:
            raise ValueError("join predicate must connect two different tables")
        if self.right < self.left:
            l, r = self.right, self.left
            object.__setattr__(self, "left", l)
            object.__setattr__(self, "right", r)

    @property
    def tables(self) -> tuple[str, str]:
        return self.left[0], self.right[0]

    def column_for(self, table: str) -> ColumnRef:
        if self.left[0] == table:
            return self.left
        if self.right[0] == table:
            return self.right
        raise KeyError(table)

    def to_sql(self) -> str:
        return f"{self.left[0]}.{self.left[1]} = {self.right[0]}.{self.right[1]}"


@dataclass(frozen=True)
class Query:
    tables: tuple[str, ...]
    joins: frozenset[JoinPredicate]
    selections: tuple[SelectionPredicate, ...] = ()
    projection: tuple[ColumnRef, ...] = ()
    qid: str = field(default="", compare=False)
    template: str = field(default="", compare=False)

    @property
    def n_tables(self) -> int:
        return len(self.tables)

    @property
    def n_joins(self) -> int:
        return len(self.joins)

    def sorted_joins(self) -> list[JoinPredicate]:
        return sorted(self.joins)

    def selections_on(self, table: str) -> list[SelectionPredicate]:
        return [s for s in self.selections if s.table == table]

    def is_connected(self) -> bool:
        return _connected(self.tables, self.joins)

    def to_sql(self) -> str:
        proj = ", ".join(f"{t}.{c}" for t, c in self.projection) or "*"
        text = f"SELECT {proj} FROM {', '.join(self.tables)}"
        preds = [s.to_sql() for s in self.selections] + [j.to_sql() for j in self.sorted_joins()]
        if preds:
            text += " WHERE " + " AND ".join(preds)
        return text + ";"

    def with_meta(self, qid: str, template: str) -> "Query":
        return Query(self.tables, self.joins, self.selections, self.projection, qid, template)

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "template": self.template,
            "tables": list(self.tables),
            "joins": [[list(j.left), list(j.right)] for j in self.sorted_joins()],
            "selections": [[s.table, s.column, s.op, list(s.literals)] for s in self.selections],
            "projection": [list(p) for p in self.projection],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Query":
        return cls(
            tables=tuple(doc["tables"]),
            joins=frozenset(JoinPredicate(tuple(a), tuple(b)) for a, b in doc["joins"]),
            selections=tuple(SelectionPredicate(t, c, op, tuple(lits)) for t, c, op, lits in doc["selections"]),
            projection=tuple(tuple(p) for p in doc["projection"]),
            qid=doc.get("qid", ""),
            template=doc.get("template", ""),
        )


def _connected(tables: Sequence[str], joins: Iterable[JoinPredicate]) -> bool:
    if not tables:
        return False
    adj: dict[str, set[str]] = {t: set() for t in tables}
    for j in joins:
        a, b = j.tables
        adj[a].add(b)
        adj[b].add(a)
    seen = {tables[0]}
    stack = [tables[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(tables)


# -- parsing --------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>-?\d+)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op><=|>=|<>|!=|[=<>])|(?P<punct>[.,;*()]))"
)
_KEYWORDS = {"SELECT", "FROM", "WHERE", "AND", "BETWEEN", "OR", "NOT", "IN", "EXISTS", "AS", "JOIN", "ON"}


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise SQLSyntaxError(f"unexpected character {text[pos:].lstrip()[:1]!r}", pos)
        kind = m.lastgroup or ""
        tok = m.group(kind)
        start = m.start(kind)
        if kind == "ident" and tok.upper() in _KEYWORDS:
            toks.append(_Tok("kw", tok.upper(), start))
        else:
            toks.append(_Tok(kind, tok, start))
        pos = m.end()
    toks.append(_Tok("eof", "", n))
    return toks


class _Parser:
    def __init__(self, text: str) -> None:
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, text: str | None = None) -> _Tok:
        tok = self.next()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text or kind
            got = tok.text or tok.kind
            raise SQLSyntaxError(f"expected {want!r}, found {got!r}", tok.pos)
        return tok

    def accept(self, kind: str, text: str | None = None) -> bool:
        tok = self.peek()
        if tok.kind == kind and (text is None or tok.text == text):
            self.i += 1
            return True
        return False

    def colref(self) -> tuple[ColumnRef, int]:
        tok = self.peek()
        if tok.kind == "punct" and tok.text == "(":
            raise SQLSemanticError(f"subqueries and parenthesized expressions are not supported (position {tok.pos})")
        t = self.expect("ident")
        self.expect("punct", ".")
        c = self.expect("ident")
        return (t.text, c.text), t.pos

    def integer(self) -> int:
        return int(self.expect("num").text)

    def parse(self):
        self.expect("kw", "SELECT")
        projection: list[tuple[ColumnRef, int]] = []
        if not self.accept("punct", "*"):
            projection.append(self.colref())
            while self.accept("punct", ","):
                projection.append(self.colref())
        self.expect("kw", "FROM")
        tables = [self.expect("ident")]
        while self.accept("punct", ","):
            tables.append(self.expect("ident"))
        preds = []
        if self.accept("kw", "WHERE"):
            preds.append(self.predicate())
            while True:
                tok = self.peek()
                if tok.kind == "kw" and tok.text == "OR":
                    raise SQLSemanticError(f"OR is not supported (position {tok.pos})")
                if not self.accept("kw", "AND"):
                    break
                preds.append(self.predicate())
        tok = self.peek()
        if tok.kind == "kw" and tok.text == "OR":
            raise SQLSemanticError(f"OR is not supported (position {tok.pos})")
        self.accept("punct", ";")
        tok = self.peek()
        if tok.kind != "eof":
            raise SQLSyntaxError(f"unexpected {tok.text!r}", tok.pos)
        return projection, tables, preds

    def predicate(self):
        tok = self.peek()
        if tok.kind == "kw" and tok.text in ("NOT", "EXISTS", "IN"):
            raise SQLSemanticError(f"{tok.text} is not supported (position {tok.pos})")
        if tok.kind == "num":
            value = self.integer()
            op = self.expect("op")
            ref, pos = self.colref()
            if op.text not in _FLIP:
                raise SQLSemanticError(f"operator {op.text} not supported (position {op.pos})")
            return ("sel", ref, _FLIP[op.text], (value,), pos)
        ref, pos = self.colref()
        if self.accept("kw", "BETWEEN"):
            low = self.integer()
            self.expect("kw", "AND")
            high = self.integer()
            if low > high:
                raise SQLSemanticError(f"BETWEEN bounds out of order (position {pos})")
            return ("sel", ref, "BETWEEN", (low, high), pos)
        op = self.expect("op")
        if op.text in ("<>", "!="):
            raise SQLSemanticError(f"operator {op.text} not supported (position {op.pos})")
        nxt = self.peek()
        if nxt.kind == "num":
            return ("sel", ref, op.text, (self.integer(),), pos)
        other, _ = self.colref()
        if op.text != "=":
            raise SQLSemanticError(f"non-equi join {ref[0]}.{ref[1]} {op.text} {other[0]}.{other[1]} (position {pos})")
        if other[0] == ref[0]:
            raise SQLSemanticError(f"column comparison within table {ref[0]} is not supported (position {pos})")
        return ("join", ref, other, None, pos)


def parse_spj(sql_text: str, catalog: Catalog, allow_disconnected: bool = False) -> Query:
    """Parse one SELECT-FROM-WHERE statement with AND-ed predicates.

    Disconnected join graphs are rejected unless ``allow_disconnected`` is set;
    such queries can be encoded and masked but admit no complete plan.
    """
    projection, table_toks, preds = _Parser(sql_text).parse()
    names = [t.text for t in table_toks]
    for tok in table_toks:
        if not catalog.has_table(tok.text):
            raise SQLSemanticError(f"unknown table {tok.text!r} (position {tok.pos})")
    if len(set(names)) != len(names):
        raise SQLSemanticError("a table may appear only once in FROM")
    in_query = set(names)

    def check(ref: ColumnRef, pos: int) -> None:
        t, c = ref
        if t not in in_query:
            raise SQLSemanticError(f"table {t!r} is not in FROM (position {pos})")
        if not catalog.table(t).has_column(c):
            raise SQLSemanticError(f"unknown column {t}.{c} (position {pos})")

    for ref, pos in projection:
        check(ref, pos)
    joins: set[JoinPredicate] = set()
    selections: list[SelectionPredicate] = []
    for kind, ref, a, b, pos in preds:
        check(ref, pos)
        if kind == "join":
            check(a, pos)
            joins.add(JoinPredicate(ref, a))
        else:
            selections.append(SelectionPredicate(ref[0], ref[1], a, b))
    tables = tuple(sorted(names, key=catalog.table_index))
    if not allow_disconnected and not _connected(tables, joins):
        raise SQLSemanticError("join graph is disconnected (Cartesian products are not supported)")
    return Query(tables, frozenset(joins), tuple(selections), tuple(r for r, _ in projection))


# -- join matrix ------------------------------------------------------------------

@dataclass(frozen=True)
class JoinMatrix:
    n: int
    m: np.ndarray

    def pairs(self) -> list[tuple[int, int]]:
        idx = np.argwhere(np.triu(self.m, 1) > 0)
        return [(int(i), int(j)) for i, j in idx]


def join_matrix(query: Query, catalog: Catalog) -> JoinMatrix:
    n = len(catalog.tables)
    m = np.zeros((n, n), dtype=np.int8)
    for j in query.joins:
        a, b = (catalog.table_index(t) for t in j.tables)
        m[a, b] = m[b, a] = 1
    m.setflags(write=False)
    return JoinMatrix(n, m)


# -- workloads --------------------------------------------------------------------

SHAPES = ("chain", "star", "branchy", "cyclic")


def _grow(rng: np.random.Generator, adj: dict[int, list[int]], n_nodes: int, shape: str, start: int):
    """Grow a connected table set plus its spanning edges from ``start``."""
    nodes = [start]
    edges: list[tuple[int, int]] = []
    inside = {start}
    tip = start
    while len(nodes) < n_nodes:
        if shape == "chain":
            frontier = [(tip, nb) for nb in adj[tip] if nb not in inside]
            if not frontier:
                frontier = [(u, nb) for u in nodes for nb in adj[u] if nb not in inside]
        elif shape == "star":
            frontier = [(start, nb) for nb in adj[start] if nb not in inside]
            if not frontier:
                frontier = [(u, nb) for u in nodes for nb in adj[u] if nb not in inside]
        else:
            frontier = [(u, nb) for u in nodes for nb in adj[u] if nb not in inside]
        if not frontier:
            return None
        u, v = frontier[int(rng.integers(len(frontier)))]
        nodes.append(v)
        inside.add(v)
        edges.append((u, v))
        tip = v
    return nodes, edges


def generate_workload(
    catalog: Catalog,
    seed: int,
    n_queries: int,
    min_joins: int = 2,
    max_joins: int = 6,
    max_selections: int = 3,
) -> list[Query]:
    """Random connected SPJ queries over the catalog's PK-FK graph.

    The join count of a query is its number of join predicates.  Tree-shaped
    queries have ``tables - 1`` joins; the ``cyclic`` class adds induced edges.
    Each query gets a template id ``j<joins>-<shape>``.
    """
    if min_joins > max_joins:
        raise ValueError("min_joins must be <= max_joins")
    if min_joins < 1:
        raise ValueError("min_joins must be >= 1")
    n_tables = len(catalog.tables)
    if max_joins >= n_tables:
        raise ValueError("max_joins must be smaller than the catalog's table count")
    rng = np.random.default_rng(seed)
    names = catalog.table_names
    graph = schema_graph(catalog)
    adj = {i: [names.index(nb) for nb in graph.neighbors(names[i])] for i in range(n_tables)}
    # one representative fk column pair per table pair, smallest first
    edge_cols: dict[frozenset, list[JoinPredicate]] = {}
    for a, b in sorted(catalog.fk_edges):
        edge_cols.setdefault(frozenset((a[0], b[0])), []).append(JoinPredicate(a, b))

    queries: list[Query] = []
    attempts = 0
    while len(queries) < n_queries:
        attempts += 1
        if attempts > 1000 * max(n_queries, 1):
            raise RuntimeError("could not sample enough connected queries from this catalog")
        target = int(rng.integers(min_joins, max_joins + 1))
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        start = int(rng.integers(n_tables))
        n_nodes = target + 1
        if shape == "cyclic":
            n_nodes = max(2, target + 1 - int(rng.integers(0, 3)))
        grown = _grow(rng, adj, n_nodes, shape, start)
        if grown is None:
            continue
        nodes, tree_edges = grown
        pairs = [frozenset((names[u], names[v])) for u, v in tree_edges]
        if shape == "cyclic":
            extra = [
                frozenset((names[u], names[v]))
                for i, u in enumerate(nodes) for v in nodes[i + 1:]
                if v in adj[u] and frozenset((names[u], names[v])) not in pairs
            ]
            order = rng.permutation(len(extra))
            for k in order:
                if len(pairs) >= target:
                    break
                pairs.append(extra[int(k)])
            if len(pairs) <= len(nodes) - 1:
                continue  # no cycle available here
        if not min_joins <= len(pairs) <= max_joins:
            continue
        joins = []
        for pair in pairs:
            options = edge_cols[pair]
            joins.append(options[int(rng.integers(len(options)))])
        tables = tuple(sorted((names[u] for u in nodes), key=catalog.table_index))
        selections = []
        for _ in range(int(rng.integers(0, max_selections + 1))):
            t = tables[int(rng.integers(len(tables)))]
            plain = [c for c in catalog.table(t).columns if not c.is_key] or list(catalog.table(t).columns)
            col = plain[int(rng.integers(len(plain)))]
            op = ("=", "<", ">", "<=", ">=", "BETWEEN")[int(rng.integers(6))]
            lo, hi = col.min_val, col.max_val
            if op == "BETWEEN":
                a, b = sorted(int(x) for x in rng.integers(lo, hi + 1, size=2))
                lits: tuple[int, ...] = (a, b)
            else:
                lits = (int(rng.integers(lo, hi + 1)),)
            selections.append(SelectionPredicate(t, col.name, op, lits))
        projection = ((tables[0], catalog.table(tables[0]).columns[0].name),)
        q = Query(tables, frozenset(joins), tuple(selections), projection)
        queries.append(q.with_meta(f"q{len(queries):04d}", f"j{len(joins)}-{shape}"))
    return queries


# -- workload files ------------------------------------------------------------------

def dump_workload(queries: Sequence[Query]) -> str:
    lines = []
    for q in queries:
        lines.append(f"-- {q.qid} template={q.template}")
        lines.append(q.to_sql())
    return "\n".join(lines) + "\n"


def load_workload(text: str, catalog: Catalog) -> list[Query]:
    """Read the line-oriented workload format; ``-- <qid> template=<id>`` comments carry metadata."""
    stripped = text.lstrip()
    if stripped.startswith("["):
        return [Query.from_dict(d) for d in json.loads(stripped)]
    queries: list[Query] = []
    meta: tuple[str, str] | None = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("--"):
            m = re.match(r"--\s*(\S+)\s+template=(\S+)", line)
            if m:
                meta = (m.group(1), m.group(2))
            continue
        q = parse_spj(line, catalog)
        qid, template = meta or (f"q{len(queries):04d}", f"j{q.n_joins}")
        queries.append(q.with_meta(qid, template))
        meta = None
    return queries


def split_workload(queries: Sequence[Query], n_test: int, seed: int) -> tuple[list[Query], list[Query]]:
    """Seeded disjoint train/test split; ``n_test`` queries go to the test side."""
    if not 0 <= n_test <= len(queries):
        raise ValueError("n_test out of range")
    perm = np.random.default_rng(seed).permutation(len(queries))
    test_idx = set(int(i) for i in perm[:n_test])
    train = [q for i, q in enumerate(queries) if i not in test_idx]
    test = [q for i, q in enumerate(queries) if i in test_idx]
    return train, test

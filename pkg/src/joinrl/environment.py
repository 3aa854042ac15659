"""The DBMS stand-in: plans, cardinality and C_out cost, the DP optimizer,
an exhaustive oracle, and a latency simulator with hidden correlation errors.

Cardinalities are a function of the joined table *set*: the product of the
filtered base cardinalities and of every join predicate inside the set.  That
keeps the cost of a subplan independent of how it was built, which is what
makes the subset DP exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Mapping, Union

import numpy as np

from .catalog import Catalog, join_selectivity, selectivity
from .query import JoinPredicate, Query

MIN_FEEDBACK = 1.0
MAX_DP_TABLES = 20
MAX_EXHAUSTIVE_TABLES = 8


@dataclass(frozen=True)
class Leaf:
    table: str

    @property
    def tables(self) -> frozenset[str]:
        return frozenset((self.table,))

    def joins(self) -> Iterator["Join"]:
        return iter(())

    def to_text(self) -> str:
        return self.table

    def to_dict(self) -> dict:
        return {"leaf": self.table}


@dataclass(frozen=True)
class Join:
    left: "Plan"
    right: "Plan"
    predicate: JoinPredicate

    @cached_property
    def tables(self) -> frozenset[str]:
        return self.left.tables | self.right.tables

    def joins(self) -> Iterator["Join"]:
        """Post-order over join nodes."""
        yield from self.left.joins()
        yield from self.right.joins()
        yield self

    def to_text(self) -> str:
        p = self.predicate
        return f"({self.left.to_text()} ⋈[{p.left[0]}.{p.left[1]}={p.right[0]}.{p.right[1]}] {self.right.to_text()})"

    def to_dict(self) -> dict:
        return {
            "join": [self.left.to_dict(), self.right.to_dict()],
            "on": [list(self.predicate.left), list(self.predicate.right)],
        }


Plan = Union[Leaf, Join]


def plan_from_dict(doc: Mapping) -> Plan:
    if "leaf" in doc:
        return Leaf(doc["leaf"])
    left, right = doc["join"]
    a, b = doc["on"]
    return Join(plan_from_dict(left), plan_from_dict(right), JoinPredicate(tuple(a), tuple(b)))


def canonical_text(plan: Plan) -> str:
    """Text form with children ordered by their smallest table name (commutativity-free)."""
    if isinstance(plan, Leaf):
        return plan.table
    l, r = plan.left, plan.right
    if min(r.tables) < min(l.tables):
        l, r = r, l
    p = plan.predicate
    return f"({canonical_text(l)} ⋈[{p.left[0]}.{p.left[1]}={p.right[0]}.{p.right[1]}] {canonical_text(r)})"


class InvalidPlanError(ValueError):
    pass


def validate_plan(plan: Plan, query: Query, complete: bool = True) -> None:
    seen: list[str] = []

    def walk(node: Plan) -> frozenset[str]:
        if isinstance(node, Leaf):
            if node.table not in query.tables:
                raise InvalidPlanError(f"table {node.table} is not in the query")
            seen.append(node.table)
            return node.tables
        lt, rt = walk(node.left), walk(node.right)
        p = node.predicate
        if p not in query.joins:
            raise InvalidPlanError(f"predicate {p.to_sql()} is not a join of the query")
        a, b = p.tables
        if not ((a in lt and b in rt) or (a in rt and b in lt)):
            raise InvalidPlanError(f"predicate {p.to_sql()} does not connect its join's inputs")
        return lt | rt

    walk(plan)
    if len(seen) != len(set(seen)):
        raise InvalidPlanError("a table appears twice in the plan")
    if complete and set(seen) != set(query.tables):
        raise InvalidPlanError("plan does not cover the query's tables")


@dataclass(frozen=True)
class Feedback:
    value: float
    kind: str  # "cost" | "latency"
    timed_out: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("cost", "latency"):
            raise ValueError(f"unknown feedback kind {self.kind!r}")
        object.__setattr__(self, "value", max(float(self.value), MIN_FEEDBACK))


# -- cardinality -------------------------------------------------------------------

class CardinalityModel:
    """Per-query cached cardinality estimates keyed by table set.

    ``factors`` maps a frozenset table pair to a multiplicative error on that
    pair's join selectivity (1.0 when absent).
    """

    def __init__(self, query: Query, catalog: Catalog, factors: Mapping[frozenset, float] | None = None) -> None:
        self.query = query
        self.catalog = catalog
        self.tables = query.tables
        self._order = {t: i for i, t in enumerate(self.tables)}
        self.base: dict[str, float] = {}
        for t in self.tables:
            sel = 1.0
            for s in query.selections_on(t):
                sel *= selectivity(catalog.column(t, s.column), s.op, s.literal)
            self.base[t] = catalog.table(t).row_count * sel
        factors = factors or {}
        self.join_sel: list[tuple[str, str, float]] = []
        for j in query.sorted_joins():
            a, b = j.tables
            js = join_selectivity(catalog.column(*j.left), catalog.column(*j.right))
            js *= factors.get(frozenset((a, b)), 1.0)
            self.join_sel.append((a, b, js))
        self._cache: dict[frozenset, float] = {}

    def raw(self, tables: frozenset[str]) -> float:
        value = 1.0
        for t in sorted(tables, key=self._order.__getitem__):
            value *= self.base[t]
        for a, b, js in self.join_sel:
            if a in tables and b in tables:
                value *= js
        return value

    def card(self, tables: frozenset[str]) -> float:
        c = self._cache.get(tables)
        if c is None:
            c = self._cache[tables] = max(self.raw(tables), 1.0)
        return c


def estimate_cardinality(plan: Plan, query: Query, catalog: Catalog, model: CardinalityModel | None = None) -> float:
    model = model or CardinalityModel(query, catalog)
    return model.card(plan.tables)


def _cout(plan: Plan, model: CardinalityModel) -> float:
    if isinstance(plan, Leaf):
        return 0.0
    return (_cout(plan.left, model) + _cout(plan.right, model)) + model.card(plan.tables)


def estimate_cost(plan: Plan, query: Query, catalog: Catalog, model: CardinalityModel | None = None) -> Feedback:
    """C_out: sum of output cardinalities over all join nodes."""
    model = model or CardinalityModel(query, catalog)
    return Feedback(_cout(plan, model), "cost")


# -- optimizers ------------------------------------------------------------------

class DisconnectedQueryError(ValueError):
    pass


def _masks(query: Query):
    tables = query.tables
    idx = {t: i for i, t in enumerate(tables)}
    n = len(tables)
    nbr = [0] * n
    preds_between: dict[tuple[int, int], list[JoinPredicate]] = {}
    for j in query.sorted_joins():
        a, b = idx[j.tables[0]], idx[j.tables[1]]
        nbr[a] |= 1 << b
        nbr[b] |= 1 << a
        preds_between.setdefault((min(a, b), max(a, b)), []).append(j)
    return tables, n, nbr, preds_between


def _connected_mask(mask: int, nbr: list[int]) -> bool:
    low = mask & -mask
    seen = low
    frontier = low
    while frontier:
        bit = frontier & -frontier
        frontier ^= bit
        i = bit.bit_length() - 1
        new = nbr[i] & mask & ~seen
        seen |= new
        frontier |= new
    return seen == mask


def _connecting_predicate(m1: int, m2: int, tables, preds_between) -> JoinPredicate | None:
    best = None
    for (a, b), preds in preds_between.items():
        if ((m1 >> a) & 1 and (m2 >> b) & 1) or ((m1 >> b) & 1 and (m2 >> a) & 1):
            if best is None or preds[0] < best:
                best = preds[0]
    return best


def _mask_tables(mask: int, tables) -> frozenset[str]:
    return frozenset(t for i, t in enumerate(tables) if (mask >> i) & 1)


def dp_optimal(query: Query, catalog: Catalog, model: CardinalityModel | None = None) -> tuple[Plan, Feedback]:
    """Exact minimum-C_out bushy plan without Cartesian products (DP over connected subsets).

    Ties keep the first split in ascending (left-mask, right-mask) order.
    """
    tables, n, nbr, preds_between = _masks(query)
    if n > MAX_DP_TABLES:
        raise ValueError(f"DP supports at most {MAX_DP_TABLES} tables")
    if not query.is_connected():
        raise DisconnectedQueryError("query join graph is disconnected")
    model = model or CardinalityModel(query, catalog)
    best: dict[int, tuple[float, Plan]] = {1 << i: (0.0, Leaf(t)) for i, t in enumerate(tables)}
    full = (1 << n) - 1
    by_size: list[list[int]] = [[] for _ in range(n + 1)]
    for mask in range(1, full + 1):
        if _connected_mask(mask, nbr):
            by_size[bin(mask).count("1")].append(mask)
    for size in range(2, n + 1):
        for mask in by_size[size]:
            low = mask & -mask
            rest = mask ^ low
            card = model.card(_mask_tables(mask, tables))
            winner: tuple[float, Plan] | None = None
            # submasks containing the lowest bit, in ascending order
            subs = []
            sub = rest
            while True:
                subs.append(sub | low)
                if sub == 0:
                    break
                sub = (sub - 1) & rest
            for m1 in sorted(subs):
                m2 = mask ^ m1
                if m2 == 0 or m1 not in best or m2 not in best:
                    continue
                pred = _connecting_predicate(m1, m2, tables, preds_between)
                if pred is None:
                    continue
                cost = (best[m1][0] + best[m2][0]) + card
                if winner is None or cost < winner[0]:
                    winner = (cost, Join(best[m1][1], best[m2][1], pred))
            if winner is not None:
                best[mask] = winner
    plan = best[full][1]
    return plan, estimate_cost(plan, query, catalog, model)


def enumerate_plans(query: Query) -> list[Plan]:
    """Every valid bushy plan without Cartesian products, one per unordered child pair."""
    tables, n, nbr, preds_between = _masks(query)
    memo: dict[int, list[Plan]] = {}

    def plans(mask: int) -> list[Plan]:
        if mask in memo:
            return memo[mask]
        if mask & (mask - 1) == 0:
            out: list[Plan] = [Leaf(tables[mask.bit_length() - 1])]
        else:
            out = []
            low = mask & -mask
            rest = mask ^ low
            sub = rest
            while True:
                m1 = sub | low
                m2 = mask ^ m1
                if m2 and _connected_mask(m1, nbr) and _connected_mask(m2, nbr):
                    pred = _connecting_predicate(m1, m2, tables, preds_between)
                    if pred is not None:
                        for l in plans(m1):
                            for r in plans(m2):
                                out.append(Join(l, r, pred))
                if sub == 0:
                    break
                sub = (sub - 1) & rest
        memo[mask] = out
        return out

    return plans((1 << n) - 1)


def exhaustive_optimal(query: Query, catalog: Catalog) -> tuple[Plan, Feedback]:
    if query.n_tables > MAX_EXHAUSTIVE_TABLES:
        raise ValueError(f"exhaustive enumeration supports at most {MAX_EXHAUSTIVE_TABLES} tables")
    if not query.is_connected():
        raise DisconnectedQueryError("query join graph is disconnected")
    model = CardinalityModel(query, catalog)
    best_plan, best_cost = None, math.inf
    for plan in enumerate_plans(query):
        cost = _cout(plan, model)
        if cost < best_cost:
            best_plan, best_cost = plan, cost
    assert best_plan is not None
    return best_plan, Feedback(best_cost, "cost")


def random_plan(query: Query, rng: np.random.Generator) -> Plan:
    """Uniformly random merge sequence along join predicates."""
    trees: list[Plan] = [Leaf(t) for t in query.tables]
    joins = query.sorted_joins()
    while len(trees) > 1:
        options = []
        for i in range(len(trees)):
            for k in range(i + 1, len(trees)):
                ti, tk = trees[i].tables, trees[k].tables
                conn = [j for j in joins if (j.tables[0] in ti and j.tables[1] in tk) or (j.tables[1] in ti and j.tables[0] in tk)]
                if conn:
                    options.append((i, k, conn[0]))
        i, k, pred = options[int(rng.integers(len(options)))]
        merged = Join(trees[i], trees[k], pred)
        trees = [t for m, t in enumerate(trees) if m not in (i, k)] + [merged]
    return trees[0]


# -- latency simulation ---------------------------------------------------------------

@dataclass(frozen=True)
class LatencyModel:
    seed: int
    correlation: Mapping[frozenset, float] = field(default_factory=dict)
    cost_to_ms: float = 1.0

    def factor(self, a: str, b: str) -> float:
        return self.correlation.get(frozenset((a, b)), 1.0)

    def to_dict(self) -> dict:
        pairs = sorted((sorted(k), v) for k, v in self.correlation.items())
        return {"seed": self.seed, "cost_to_ms": self.cost_to_ms, "correlation": [[a, b, v] for (a, b), v in pairs]}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LatencyModel":
        corr = {frozenset((a, b)): float(v) for a, b, v in doc["correlation"]}
        return cls(int(doc["seed"]), corr, float(doc["cost_to_ms"]))


def make_latency_model(
    catalog: Catalog, seed: int, sigma: float = 1.0, cost_to_ms: float = 1.0, neutral: bool = False
) -> LatencyModel:
    """One log-normal factor per joinable table pair, clipped to [0.2, 5.0]."""
    rng = np.random.default_rng([int(catalog.seed) & (2**63 - 1), int(seed) & (2**63 - 1)])
    pairs = sorted({tuple(sorted((a[0], b[0]))) for a, b in catalog.fk_edges})
    corr = {}
    for a, b in pairs:
        f = 1.0 if neutral else float(np.clip(np.exp(rng.normal(0.0, sigma)), 0.2, 5.0))
        corr[frozenset((a, b))] = f
    return LatencyModel(seed, corr, cost_to_ms)


def simulate_latency(
    plan: Plan, query: Query, catalog: Catalog, lm: LatencyModel, true_model: CardinalityModel | None = None
) -> Feedback:
    """cost_to_ms * sum over joins of (true |left| + true |right| + true |output|)."""
    true_model = true_model or CardinalityModel(query, catalog, lm.correlation)
    total = 0.0
    if isinstance(plan, Join):
        for node in plan.joins():
            total += true_model.card(node.left.tables) + true_model.card(node.right.tables) + true_model.card(node.tables)
    return Feedback(lm.cost_to_ms * total, "latency")

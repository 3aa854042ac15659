"""Episode loop, curriculum schedule, cost-training and latency-tuning phases."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import Agent, Transition, action_mask, reward, select_action
from .catalog import Catalog
from .environment import (
    CardinalityModel, Feedback, LatencyModel, Plan, canonical_text, dp_optimal, estimate_cost, simulate_latency,
)
from .metrics import EvalRecord, gmrl, mrc
from .query import Query

LOG_FIELDS = ("episode", "phase", "loss", "epsilon", "mrc", "gmrl", "active_partitions")
TIMEOUT_FACTOR = 5.0


# -- curriculum --------------------------------------------------------------------------

@dataclass(frozen=True)
class CurriculumConfig:
    k: int = 3
    interval: int | None = None  # episodes between expansions; None derives it from the run length
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.k < 1 or (self.interval is not None and self.interval < 1):
            raise ValueError("k and interval must be positive")

    def resolve_interval(self, episodes: int) -> int:
        """Default spreads the expansions over the first half of training."""
        if self.interval is not None:
            return self.interval
        return max(1, episodes // (2 * self.k))


def curriculum_partitions(workload: Sequence[Query], k: int) -> list[list[Query]]:
    """Stable sort by join count, then k equal chunks with the remainder going to the last."""
    if not workload:
        raise ValueError("empty workload")
    if k < 1 or k > len(workload):
        raise ValueError(f"cannot split {len(workload)} queries into {k} partitions")
    ordered = sorted(workload, key=lambda q: q.n_joins)
    size = len(ordered) // k
    parts = [ordered[i * size:(i + 1) * size] for i in range(k - 1)]
    parts.append(ordered[(k - 1) * size:])
    return parts


def active_partitions(t: int, k: int, interval: int) -> int:
    if t < 1:
        raise ValueError("episode index starts at 1")
    return min(math.ceil(t / interval), k)


def active_dataset(t: int, partitions: Sequence[Sequence[Query]], interval: int) -> list[Query]:
    m = active_partitions(t, len(partitions), interval)
    return [q for part in partitions[:m] for q in part]


# -- feedback sources ------------------------------------------------------------------------

def query_key(query: Query) -> str:
    return query.qid or query.to_sql()


class CostSource:
    """Estimated C_out cost, with the DP baseline cached per query."""

    kind = "cost"

    def __init__(self, catalog: Catalog) -> None:
        self.catalog = catalog
        self._models: dict[str, CardinalityModel] = {}
        self._dp: dict[str, tuple[Plan, Feedback]] = {}

    def model(self, query: Query) -> CardinalityModel:
        key = query_key(query)
        m = self._models.get(key)
        if m is None:
            m = self._models[key] = CardinalityModel(query, self.catalog)
        return m

    def dp_plan(self, query: Query) -> tuple[Plan, Feedback]:
        key = query_key(query)
        hit = self._dp.get(key)
        if hit is None:
            hit = self._dp[key] = dp_optimal(query, self.catalog, self.model(query))
        return hit

    def dp(self, query: Query) -> Feedback:
        return self.dp_plan(query)[1]

    def feedback(self, query: Query, plan: Plan) -> Feedback:
        return estimate_cost(plan, query, self.catalog, self.model(query))


class LatencyPool:
    """Insert-once memo of observed latencies keyed by (query id, canonical plan text)."""

    def __init__(self) -> None:
        self._store: dict[tuple[str, str], Feedback] = {}

    def __len__(self) -> int:
        return len(self._store)

    def get(self, qid: str, plan_text: str) -> Feedback | None:
        return self._store.get((qid, plan_text))

    def put(self, qid: str, plan_text: str, fb: Feedback) -> None:
        key = (qid, plan_text)
        if key in self._store:
            raise KeyError(f"latency for {key} already recorded")
        self._store[key] = fb


class LatencySource:
    """Simulated latency with pooling and a timeout at TIMEOUT_FACTOR x the worst training DP latency."""

    kind = "latency"

    def __init__(self, catalog: Catalog, lm: LatencyModel, costs: CostSource | None = None) -> None:
        self.catalog = catalog
        self.lm = lm
        self.costs = costs or CostSource(catalog)
        self.pool = LatencyPool()
        self.timeout: float | None = None
        self.simulator_calls = 0
        self._true: dict[str, CardinalityModel] = {}
        self._dp: dict[str, Feedback] = {}

    def _true_model(self, query: Query) -> CardinalityModel:
        key = query_key(query)
        m = self._true.get(key)
        if m is None:
            m = self._true[key] = CardinalityModel(query, self.catalog, self.lm.correlation)
        return m

    def simulate(self, query: Query, plan: Plan) -> Feedback:
        self.simulator_calls += 1
        return simulate_latency(plan, query, self.catalog, self.lm, self._true_model(query))

    def dp(self, query: Query) -> Feedback:
        """Latency of the plan the cost-based DP would pick."""
        key = query_key(query)
        fb = self._dp.get(key)
        if fb is None:
            fb = self._dp[key] = self.simulate(query, self.costs.dp_plan(query)[0])
        return fb

    def set_timeout(self, train: Sequence[Query]) -> float:
        self.timeout = TIMEOUT_FACTOR * max(self.dp(q).value for q in train)
        return self.timeout

    def feedback(self, query: Query, plan: Plan) -> Feedback:
        qid, text = query_key(query), canonical_text(plan)
        fb = self.pool.get(qid, text)
        if fb is None:
            fb = self.simulate(query, plan)
            if self.timeout is not None and fb.value > self.timeout:
                fb = Feedback(self.timeout, "latency", timed_out=True)
            self.pool.put(qid, text, fb)
        return fb


# -- episodes ----------------------------------------------------------------------------------

def run_episode(query: Query, agent: Agent, source, epsilon: float, store: bool = True,
                rng: np.random.Generator | None = None) -> tuple[Plan, list[Transition], Feedback]:
    """Build one plan action by action; only the final transition carries the reward."""
    rng = agent.rng if rng is None else rng
    ctx = agent.context(query)
    forest = agent.encoder.initial_forest(ctx)
    mask = action_mask(query, forest, agent.catalog)
    state = agent.state_vector(ctx, forest)
    transitions: list[Transition] = []
    pending: tuple | None = None
    while not mask.terminal:
        a = select_action(state, mask, epsilon, rng, agent.net)
        forest = agent.step(query, ctx, forest, mask, a)
        next_mask = action_mask(query, forest, agent.catalog)
        if next_mask.terminal:
            pending = (state, a, mask.vector)
        else:
            next_state = agent.state_vector(ctx, forest)
            transitions.append(Transition(state, a, 0.0, next_state, next_mask.vector, mask.vector))
            state = next_state
        mask = next_mask
    plan = forest.trees[0].plan
    fb = source.feedback(query, plan)
    if pending is not None:
        s, a, m = pending
        transitions.append(Transition(s, a, reward(source.dp(query), fb), None, None, m))
    if store:
        for t in transitions:
            agent.memory.push(t)
    return plan, transitions, fb


def evaluate(agent: Agent, queries: Sequence[Query], costs: CostSource,
             latency: LatencySource | None = None) -> list[EvalRecord]:
    """Greedy plans scored against the DP baseline. Latency is simulated without the timeout clamp."""
    records = []
    for q in queries:
        plan = agent.greedy_plan(q)
        records.append(_record(q, plan, costs, latency))
    return records


def _record(q: Query, plan: Plan, costs: CostSource, latency: LatencySource | None) -> EvalRecord:
    al = dl = None
    if latency is not None:
        al = simulate_latency(plan, q, latency.catalog, latency.lm, latency._true_model(q)).value
        dl = latency.dp(q).value
    return EvalRecord(q.qid, q.template, costs.feedback(q, plan).value, costs.dp(q).value, al, dl)


def random_policy_records(agent: Agent, queries: Sequence[Query], costs: CostSource, seed: int,
                          latency: LatencySource | None = None) -> list[EvalRecord]:
    """The same episode harness with every action drawn uniformly from the valid set."""
    rng = np.random.default_rng([seed, 7])
    records = []
    for q in queries:
        plan, _, _ = run_episode(q, agent, costs, 1.0, store=False, rng=rng)
        records.append(_record(q, plan, costs, latency))
    return records


# -- phases ------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    episodes_cost: int = 5000
    episodes_latency: int = 2000
    eval_every: int = 500
    n_test: int = 20
    tune_eps_start: float = 0.2
    tune_eps_end: float = 0.05


@dataclass
class LogRow:
    episode: int
    phase: str
    loss: float | None
    epsilon: float
    mrc: float | None = None
    gmrl: float | None = None
    active_partitions: int = 1

    def as_csv(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [str(self.episode), self.phase, fmt(self.loss), repr(float(self.epsilon)), fmt(self.mrc),
                fmt(self.gmrl), str(self.active_partitions)]


def write_log(rows: Sequence[LogRow], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow(r.as_csv())


def _learn(agent: Agent) -> float | None:
    if len(agent.memory) < agent.cfg.batch_size:
        return None
    losses = [agent.learn() for _ in range(agent.cfg.updates_per_episode)]
    return float(np.mean(losses))


def train_cost_phase(train: Sequence[Query], test: Sequence[Query], agent: Agent, run: RunConfig,
                     curriculum: CurriculumConfig | None = None, ckpt_dir: str | Path | None = None,
                     costs: CostSource | None = None, ckpt_extra: dict | None = None) -> list[LogRow]:
    curriculum = curriculum or CurriculumConfig()
    costs = costs or CostSource(agent.catalog)
    episodes = run.episodes_cost
    if episodes == 0:
        return []
    for q in train:
        costs.dp(q)
    partitions = curriculum_partitions(train, curriculum.k) if curriculum.enabled else [list(train)]
    interval = curriculum.resolve_interval(episodes)
    rng = np.random.default_rng([run.seed, 2])
    rows = []
    for t in range(1, episodes + 1):
        n_active = active_partitions(t, len(partitions), interval)
        pool = active_dataset(t, partitions, interval)
        q = pool[int(rng.integers(len(pool)))]
        eps = agent.cfg.epsilon(agent.episode)
        run_episode(q, agent, costs, eps)
        loss = _learn(agent)
        agent.episode += 1
        if agent.episode % agent.cfg.target_sync_period == 0:
            agent.sync_target()
        row = LogRow(agent.episode, "cost", loss, eps, active_partitions=n_active)
        if (run.eval_every and t % run.eval_every == 0) or t == episodes:
            if test:
                row.mrc = mrc(evaluate(agent, test, costs))
            if ckpt_dir is not None:
                agent.save(Path(ckpt_dir) / f"{agent.episode}.json", ckpt_extra)
        rows.append(row)
    return rows


def tune_latency_phase(train: Sequence[Query], test: Sequence[Query], agent: Agent, lm: LatencyModel,
                       run: RunConfig, ckpt_dir: str | Path | None = None,
                       latency: LatencySource | None = None, ckpt_extra: dict | None = None) -> list[LogRow]:
    """Continue training on latency feedback over the whole training set, starting from fresh replay."""
    latency = latency or LatencySource(agent.catalog, lm)
    episodes = run.episodes_latency
    if episodes == 0:
        return []
    latency.set_timeout(train)
    agent.memory = type(agent.memory)(agent.cfg.replay_capacity)
    schedule = replace(agent.cfg, eps_start=run.tune_eps_start, eps_end=run.tune_eps_end,
                       eps_decay_episodes=max(1, int(round(0.6 * episodes))))
    rng = np.random.default_rng([run.seed, 3])
    rows = []
    for t in range(1, episodes + 1):
        q = train[int(rng.integers(len(train)))]
        eps = schedule.epsilon(t - 1)
        run_episode(q, agent, latency, eps)
        loss = _learn(agent)
        agent.episode += 1
        if agent.episode % agent.cfg.target_sync_period == 0:
            agent.sync_target()
        row = LogRow(agent.episode, "latency", loss, eps, active_partitions=0)
        if (run.eval_every and t % run.eval_every == 0) or t == episodes:
            if test:
                recs = evaluate(agent, test, latency.costs, latency)
                row.mrc, row.gmrl = mrc(recs), gmrl(recs)
            if ckpt_dir is not None:
                agent.save(Path(ckpt_dir) / f"{agent.episode}.json", ckpt_extra)
        rows.append(row)
    return rows

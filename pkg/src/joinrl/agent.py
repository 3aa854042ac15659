"""Dueling / vanilla DQN over table-pair actions with masking, replay and a target network."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import AdamState, Tape, Tensor, adam_step, gradients, init_param, params_from_json, params_to_json
from .catalog import Catalog
from .encoders.model import Encoder, EncoderConfig, JoinForest, QueryContext
from .environment import Feedback, Plan
from .query import JoinPredicate, Query

REWARD_CLAMP = 3.0


class InvalidActionError(ValueError):
    pass


# -- action space ------------------------------------------------------------------

def n_actions(n: int) -> int:
    return n * (n - 1) // 2


def pair_index(i: int, j: int, n: int) -> int:
    """Row-major index of (i, j), i < j, in the upper triangle of an n x n matrix."""
    if not 0 <= i < j < n:
        raise ValueError(f"need 0 <= i < j < n, got ({i}, {j}) with n={n}")
    return i * n - i * (i + 1) // 2 + (j - i - 1)


def index_pair(index: int, n: int) -> tuple[int, int]:
    i = 0
    while index >= n - 1 - i:
        index -= n - 1 - i
        i += 1
    return i, i + 1 + index


@dataclass(frozen=True)
class ActionMask:
    n: int
    bits: np.ndarray  # (n, n) int8, only the upper triangle is ever set

    @property
    def vector(self) -> np.ndarray:
        """Boolean mask over the flat pair index space."""
        iu = np.triu_indices(self.n, k=1)
        return self.bits[iu].astype(bool)

    @property
    def terminal(self) -> bool:
        return not self.bits.any()

    def valid_pairs(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.bits))]


def action_mask(query: Query, forest: JoinForest, catalog: Catalog) -> ActionMask:
    """(i, j) is legal when a join predicate links tables i and j and they sit in different trees."""
    n = len(catalog.tables)
    bits = np.zeros((n, n), dtype=np.int8)
    owner = forest.tree_of()
    for jp in query.joins:
        a, b = jp.tables
        if owner[a] != owner[b]:
            i, j = sorted((catalog.table_index(a), catalog.table_index(b)))
            bits[i, j] = 1
    return ActionMask(n, bits)


def connecting_predicate(query: Query, left: frozenset[str], right: frozenset[str]) -> JoinPredicate | None:
    for jp in query.sorted_joins():
        a, b = jp.tables
        if (a in left and b in right) or (a in right and b in left):
            return jp
    return None


def apply_action(forest: JoinForest, action: int, query: Query, catalog: Catalog, encoder: Encoder,
                 ctx: QueryContext, tape: Tape, mask: ActionMask | None = None) -> JoinForest:
    """Merge the tree holding table i (left) with the tree holding table j (right)."""
    mask = mask or action_mask(query, forest, catalog)
    if not 0 <= action < n_actions(mask.n) or not mask.vector[action]:
        raise InvalidActionError(f"action {action} is not legal in this state")
    i, j = index_pair(action, mask.n)
    owner = forest.tree_of()
    li, ri = owner[catalog.tables[i].name], owner[catalog.tables[j].name]
    left, right = forest.trees[li], forest.trees[ri]
    pred = connecting_predicate(query, left.plan.tables, right.plan.tables)
    merged = encoder.join_trees(left, right, pred, ctx, tape)
    trees = [merged if k == li else t for k, t in enumerate(forest.trees) if k != ri]
    return JoinForest(tuple(trees))


# -- Q network -----------------------------------------------------------------------

@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.9
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_episodes: int = 3000
    lr: float = 1e-3
    batch_size: int = 32
    replay_capacity: int = 50_000
    target_sync_period: int = 50
    updates_per_episode: int = 1
    trunk: tuple[int, ...] = (128,)
    dueling: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if min(self.batch_size, self.replay_capacity, self.target_sync_period) < 1 or self.eps_decay_episodes < 0:
            raise ValueError("batch_size, replay_capacity and target_sync_period must be positive")
        object.__setattr__(self, "trunk", tuple(int(h) for h in self.trunk))

    def epsilon(self, episode: int) -> float:
        """Linear decay from eps_start to eps_end over the first eps_decay_episodes episodes."""
        if self.eps_decay_episodes == 0 or episode >= self.eps_decay_episodes:
            return self.eps_end
        frac = episode / self.eps_decay_episodes
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk"] = list(self.trunk)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "AgentConfig":
        return cls(**doc)


class QNetwork:
    """Affine+tanh trunk, then either value/advantage heads (dueling) or one direct head."""

    def __init__(self, in_dim: int, n_out: int, cfg: AgentConfig, seed: int, prefix: str = "q") -> None:
        self.in_dim, self.n_out, self.dueling, self.prefix = in_dim, n_out, cfg.dueling, prefix
        self.params: dict[str, Tensor] = {}
        width = in_dim
        self.n_trunk = len(cfg.trunk)
        for k, h in enumerate(cfg.trunk):
            self._affine(seed, f"trunk{k}", width, h)
            width = h
        if self.dueling:
            self._affine(seed, "value", width, 1)
            self._affine(seed, "advantage", width, n_out)
        else:
            self._affine(seed, "head", width, n_out)

    def _affine(self, seed: int, name: str, rows: int, cols: int) -> None:
        w, b = f"{self.prefix}/{name}/W", f"{self.prefix}/{name}/b"
        self.params[w] = init_param(seed, w, rows, cols)
        self.params[b] = init_param(seed, b, 1, cols, fan_in=rows)

    def _apply(self, tape: Tape, x: Tensor, name: str) -> Tensor:
        p = self.params
        return tape.add(tape.matmul(x, p[f"{self.prefix}/{name}/W"]), p[f"{self.prefix}/{name}/b"])

    def heads(self, tape: Tape, states: Tensor) -> tuple[Tensor | None, Tensor]:
        """(V, A) for dueling, (None, Q) for vanilla; rows are batch entries."""
        x = states
        for k in range(self.n_trunk):
            x = tape.tanh(self._apply(tape, x, f"trunk{k}"))
        if self.dueling:
            return self._apply(tape, x, "value"), self._apply(tape, x, "advantage")
        return None, self._apply(tape, x, "head")

    def forward(self, tape: Tape, states: Tensor, masks: np.ndarray) -> Tensor:
        """Q for every action; dueling centers A on the mean over each row's valid actions."""
        masks = np.asarray(masks, dtype=float).reshape(states.shape[0], self.n_out)
        value, adv = self.heads(tape, states)
        if value is None:
            return adv
        counts = masks.sum(axis=1, keepdims=True)
        if (counts == 0).any():
            raise InvalidActionError("Q-values requested for a terminal state")
        mean_valid = tape.mul(tape.sum(tape.mul(adv, Tensor(masks)), axis=1), Tensor(1.0 / counts))
        return tape.add(value, tape.sub(adv, mean_valid))

    def copy_from(self, other: "QNetwork") -> None:
        for name, p in other.params.items():
            self.params[name].data[...] = p.data


def q_values(state: np.ndarray, mask: ActionMask | np.ndarray, net: QNetwork) -> np.ndarray:
    """Q over the flat action space with -inf at invalid actions."""
    vec = mask.vector if isinstance(mask, ActionMask) else np.asarray(mask, dtype=bool)
    if not vec.any():
        raise InvalidActionError("terminal state has no Q-values")
    q = net.forward(Tape(record=False), Tensor(np.asarray(state).reshape(1, -1)), vec[None, :]).data[0]
    return np.where(vec, q, -np.inf)


def select_action(state: np.ndarray, mask: ActionMask | np.ndarray, epsilon: float, rng: np.random.Generator,
                  net: QNetwork) -> int:
    vec = mask.vector if isinstance(mask, ActionMask) else np.asarray(mask, dtype=bool)
    valid = np.flatnonzero(vec)
    if len(valid) == 0:
        raise InvalidActionError("terminal state has no actions")
    if rng.random() < epsilon:
        return int(valid[rng.integers(len(valid))])
    return int(np.argmax(q_values(state, vec, net)))  # first maximum = smallest index


def reward(dp_feedback: Feedback, agent_feedback: Feedback) -> float:
    """Base-10 log of DP feedback over agent feedback, clamped to [-3, 3]."""
    if dp_feedback.kind != agent_feedback.kind:
        raise ValueError(f"feedback kinds differ: {dp_feedback.kind} vs {agent_feedback.kind}")
    r = math.log10(dp_feedback.value / agent_feedback.value)
    return max(-REWARD_CLAMP, min(REWARD_CLAMP, r))


# -- replay ----------------------------------------------------------------------------

@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray | None  # None marks a terminal transition
    next_mask: np.ndarray | None
    mask: np.ndarray

    def __post_init__(self) -> None:
        if not self.mask[self.action]:
            raise InvalidActionError(f"transition records invalid action {self.action}")
        if self.next_state is not None and self.reward != 0.0:
            raise ValueError("non-terminal transitions carry zero reward")
        if self.next_state is not None and (self.next_mask is None or not self.next_mask.any()):
            raise ValueError("non-terminal transition needs a non-empty next mask")

    @property
    def terminal(self) -> bool:
        return self.next_state is None


class ReplayMemory:
    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._buf: list[Transition] = []
        self._head = 0

    def __len__(self) -> int:
        return len(self._buf)

    def push(self, t: Transition) -> None:
        if len(self._buf) < self.capacity:
            self._buf.append(t)
        else:
            self._buf[self._head] = t
            self._head = (self._head + 1) % self.capacity

    def items(self) -> list[Transition]:
        """Oldest first."""
        return self._buf[self._head:] + self._buf[:self._head]

    def sample(self, k: int, rng: np.random.Generator) -> list[Transition]:
        if k > len(self._buf):
            raise ValueError(f"cannot sample {k} of {len(self._buf)} transitions")
        return [self._buf[i] for i in rng.choice(len(self._buf), size=k, replace=False)]


def td_targets(batch: Sequence[Transition], target: QNetwork, gamma: float) -> np.ndarray:
    y = np.array([t.reward for t in batch], dtype=float)
    live = [k for k, t in enumerate(batch) if not t.terminal]
    if live:
        states = np.stack([batch[k].next_state for k in live])
        masks = np.stack([batch[k].next_mask for k in live]).astype(bool)
        q = target.forward(Tape(record=False), Tensor(states), masks).data
        y[live] += gamma * np.where(masks, q, -np.inf).max(axis=1)
    return y


def td_loss(tape: Tape, batch: Sequence[Transition], net: QNetwork, y: np.ndarray) -> Tensor:
    states = Tensor(np.stack([t.state for t in batch]))
    masks = np.stack([t.mask for t in batch])
    q = net.forward(tape, states, masks)
    onehot = np.zeros((len(batch), net.n_out))
    onehot[np.arange(len(batch)), [t.action for t in batch]] = 1.0
    q_sa = tape.sum(tape.mul(q, Tensor(onehot)), axis=1)
    return tape.mean(tape.square(tape.sub(q_sa, Tensor(y.reshape(-1, 1)))))


def train_step(memory: ReplayMemory, net: QNetwork, target: QNetwork, cfg: AgentConfig, adam: AdamState,
               rng: np.random.Generator) -> float:
    """One minibatch MSE step toward r + gamma * max_valid Q_target(s', a')."""
    if len(memory) < cfg.batch_size:
        raise ValueError(f"replay holds {len(memory)} transitions, batch needs {cfg.batch_size}")
    batch = memory.sample(cfg.batch_size, rng)
    y = td_targets(batch, target, cfg.gamma)
    tape = Tape()
    loss = td_loss(tape, batch, net, y)
    adam_step(net.params, gradients(tape, loss, net.params), adam)
    return loss.item()


# -- agent bundle -------------------------------------------------------------------------

META_VERSION = 1


class Agent:
    """Encoder + predict/target Q networks + replay + optimizer state."""

    def __init__(self, catalog: Catalog, cfg: AgentConfig | None = None, enc_cfg: EncoderConfig | None = None,
                 schema_emb=None) -> None:
        self.catalog = catalog
        self.cfg = cfg or AgentConfig()
        self.encoder = Encoder(catalog, enc_cfg, self.cfg.seed, schema_emb)
        self.n = len(catalog.tables)
        self.n_out = n_actions(self.n)
        in_dim = 2 * self.encoder.hs
        self.net = QNetwork(in_dim, self.n_out, self.cfg, self.cfg.seed)
        self.target = QNetwork(in_dim, self.n_out, self.cfg, self.cfg.seed)
        self.target.copy_from(self.net)
        self.adam = AdamState(lr=self.cfg.lr)
        self.memory = ReplayMemory(self.cfg.replay_capacity)
        self.rng = np.random.default_rng([self.cfg.seed, 1])
        self.episode = 0
        self._contexts: dict[Query, QueryContext] = {}

    @property
    def dueling(self) -> bool:
        return self.cfg.dueling

    # encoders are not updated by the TD step, so per-query contexts stay valid
    def context(self, query: Query) -> QueryContext:
        ctx = self._contexts.get(query)
        if ctx is None:
            ctx = self._contexts[query] = self.encoder.context(query, Tape(record=False))
        return ctx

    def state_vector(self, ctx: QueryContext, forest: JoinForest) -> np.ndarray:
        return self.encoder.state(ctx, forest, Tape(record=False)).data[0].copy()

    def step(self, query: Query, ctx: QueryContext, forest: JoinForest, mask: ActionMask, action: int) -> JoinForest:
        return apply_action(forest, action, query, self.catalog, self.encoder, ctx, Tape(record=False), mask)

    def greedy_plan(self, query: Query) -> Plan:
        ctx = self.context(query)
        forest = self.encoder.initial_forest(ctx)
        while len(forest) > 1:
            mask = action_mask(query, forest, self.catalog)
            a = int(np.argmax(q_values(self.state_vector(ctx, forest), mask, self.net)))
            forest = self.step(query, ctx, forest, mask, a)
        return forest.trees[0].plan

    def sync_target(self) -> None:
        self.target.copy_from(self.net)

    def learn(self) -> float:
        return train_step(self.memory, self.net, self.target, self.cfg, self.adam, self.rng)

    # -- persistence ---------------------------------------------------------------------
    def all_params(self) -> dict[str, Tensor]:
        out = dict(self.encoder.params)
        out.update(self.net.params)
        out.update({f"target/{k}": v for k, v in self.target.params.items()})
        return out

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(params_to_json(self.all_params()), sort_keys=True, separators=(",", ":")))
        meta = {
            "meta_version": META_VERSION,
            "config": {"agent": self.cfg.to_dict(), "encoder": self.encoder.cfg.to_dict()},
            "episode": self.episode,
            "epsilon": self.cfg.epsilon(self.episode),
            "dueling": self.dueling,
            "catalog": self.catalog.to_dict(),
            "schema_emb": {t: v.reshape(-1).tolist() for t, v in sorted(self.encoder.schema_emb.items())},
        }
        meta.update(extra or {})
        meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> tuple["Agent", dict]:
        path = Path(path)
        meta = json.loads(meta_path(path).read_text())
        if meta.get("meta_version") != META_VERSION:
            raise ValueError(f"unsupported agent sidecar version {meta.get('meta_version')!r}")
        catalog = Catalog.from_dict(meta["catalog"])
        cfg = AgentConfig.from_dict(meta["config"]["agent"])
        enc_cfg = EncoderConfig.from_dict(meta["config"]["encoder"])
        schema_emb = {t: np.array(v) for t, v in meta["schema_emb"].items()}
        agent = cls(catalog, cfg, enc_cfg, schema_emb)
        arrays = params_from_json(json.loads(path.read_text()))
        params = agent.all_params()
        if set(arrays) != set(params):
            raise ValueError("checkpoint parameters do not match the model layout")
        for name, arr in arrays.items():
            if arr.shape != params[name].shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {params[name].shape}")
            params[name].data[...] = arr
        agent.episode = int(meta["episode"])
        agent._contexts.clear()
        return agent, meta


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def with_decay(cfg: AgentConfig, total_episodes: int, fraction: float = 0.6) -> AgentConfig:
    return replace(cfg, eps_decay_episodes=max(1, int(round(fraction * total_episodes))))

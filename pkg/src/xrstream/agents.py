"""Bitrate-selection policies.

Every policy maps the streaming history (and, for the perfect-knowledge
greedy baseline only, the current channel and energy queue) to a 1-based
ladder index. The learned policies are deep Q-learning agents with an
epsilon-greedy behaviour policy, uniform replay and a lagged target
network; they differ only in how the history is encoded:

* ``lstm-dqn``: the last ``o`` (bitrate / V_M, failure flag) pairs, fed
  to the recurrent ``QNetwork``.
* ``fc-dqn``: the previous frame's (bitrate / V_M, QoE), fed to a
  dense-only ``MLPQNetwork``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np

from .allocator import LyapunovParams, VirtualQueue, allocate
from .channel import ChannelSample
from .neural import AdamState, MLPQNetwork, QNetwork, adam_step, network_from_dict, sync_target
from .qoe import BitrateLadder, QoEWeights

POLICY_KINDS = ("lstm-dqn", "fc-dqn", "simple", "greedy", "constant")


@dataclass
class DqnHyperparams:
    gamma: float = 0.95
    batch_size: int = 64
    replay_capacity: int = 50_000
    warmup_transitions: int = 1_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.02
    decay_frames: int = 30_000
    target_sync_period: int = 1_000
    learning_rate: float = 1e-4
    hidden: int = 64
    fc: int = 512
    fc_widths: tuple[int, ...] = (64, 512)
    dtype: str = "float32"

    def __post_init__(self):
        self.fc_widths = tuple(int(w) for w in self.fc_widths)
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.batch_size < 1 or self.batch_size > self.replay_capacity:
            raise ValueError("need 1 <= batch_size <= replay_capacity")
        if self.epsilon_end > self.epsilon_start:
            raise ValueError("epsilon_end must not exceed epsilon_start")
        if self.target_sync_period < 1:
            raise ValueError("target_sync_period must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DqnHyperparams":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


class History:
    """What the edge server knows after each frame: chosen levels and outcomes.

    Cold start fills the window with (lowest level, success) pairs.
    """

    def __init__(self, ladder: BitrateLadder, window: int):
        if window < 1:
            raise ValueError("observation window must be >= 1")
        self.ladder = ladder
        self.window = window
        self.reset()

    def reset(self) -> None:
        v1 = self.ladder.levels[0]
        self.entries: deque[tuple[float, int]] = deque(
            [(v1 / self.ladder.top, 0)] * self.window, maxlen=self.window)
        self.last_level = 1
        self.last_x = 0
        self.last_q = v1 / self.ladder.frame_rate
        self.frames = 0

    def push(self, level: int, x: int, q: float) -> None:
        self.entries.append((self.ladder.bitrate(level) / self.ladder.top, int(x)))
        self.last_level = level
        self.last_x = int(x)
        self.last_q = q
        self.frames += 1

    def observation(self) -> np.ndarray:
        """The ``(o, 2)`` observation window, oldest entry first."""
        return np.array(self.entries, dtype=float)


def check_observation(obs: np.ndarray, window: int) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (window, 2):
        raise ValueError(f"observation must have shape ({window}, 2), got {obs.shape}")
    if np.any(obs[:, 0] <= 0) or np.any(obs[:, 0] > 1):
        raise ValueError("normalized bitrates must lie in (0, 1]")
    if np.any((obs[:, 1] != 0) & (obs[:, 1] != 1)):
        raise ValueError("success indicators must be 0 or 1")
    return obs


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray


class ReplayMemory:
    """Fixed-capacity ring buffer of transitions, evicting the oldest first."""

    def __init__(self, capacity: int, state_shape: tuple[int, ...]):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.state_shape = tuple(state_shape)
        self.states = np.zeros((capacity,) + self.state_shape)
        self.next_states = np.zeros((capacity,) + self.state_shape)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def push(self, t: Transition) -> None:
        k = self.inserted % self.capacity
        self.states[k] = t.state
        self.next_states[k] = t.next_state
        self.actions[k] = t.action
        self.rewards[k] = t.reward
        self.inserted += 1

    def items(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        n = len(self)
        start = self.inserted - n
        out = []
        for j in range(start, self.inserted):
            k = j % self.capacity
            out.append(Transition(self.states[k].copy(), int(self.actions[k]),
                                  float(self.rewards[k]), self.next_states[k].copy()))
        return out

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, len(self), size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = self.sample_indices(batch_size, rng)
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx]


def push(memory: ReplayMemory, t: Transition) -> None:
    memory.push(t)


# Policies -----------------------------------------------------------------

class Policy:
    kind = "policy"
    needs_oracle = False
    learns = False

    def __init__(self, ladder: BitrateLadder):
        self.ladder = ladder

    def reset(self) -> None:
        pass

    def act(self, history: History, oracle: "OracleContext | None" = None) -> int:
        raise NotImplementedError


@dataclass
class OracleContext:
    v_prev_mbit: float | None
    sample: ChannelSample
    queue: VirtualQueue


class ConstantPolicy(Policy):
    kind = "constant"

    def __init__(self, ladder: BitrateLadder, level: int = 1):
        super().__init__(ladder)
        ladder.bitrate(level)
        self.level = level

    def act(self, history, oracle=None) -> int:
        return self.level


def baseline_simple_act(last_level: int, last_x: int, M: int) -> int:
    if last_x == 0:
        return min(last_level + 1, M)
    return max(last_level - 1, 1)


class SimpleBaseline(Policy):
    """Step up one level after a delivered frame, down one after a loss."""

    kind = "simple"

    def act(self, history, oracle=None) -> int:
        return baseline_simple_act(history.last_level, history.last_x, self.ladder.M)


def greedy_oracle_act(v_prev_mbit: float | None, sample: ChannelSample, queue: VirtualQueue,
                      weights: QoEWeights, lp: LyapunovParams, ladder: BitrateLadder) -> int:
    """Traverse the ladder and pick the level with the lowest per-frame objective.

    Ties go to the higher bitrate. With no previous frame, each candidate
    is scored without a variation penalty.
    """
    best_level, best_score = 0, math.inf
    for m in range(ladder.M, 0, -1):
        v_bits = ladder.levels[m - 1] / ladder.frame_rate * 1e6
        v_prev = v_bits / 1e6 if v_prev_mbit is None else v_prev_mbit
        score = allocate(v_bits, v_prev, sample, queue, weights, lp).objective
        if score < best_score:
            best_level, best_score = m, score
    return best_level


class GreedyOracle(Policy):
    kind = "greedy"
    needs_oracle = True

    def __init__(self, ladder: BitrateLadder, weights: QoEWeights, lp: LyapunovParams):
        super().__init__(ladder)
        self.weights = weights
        self.lp = lp

    def act(self, history, oracle=None) -> int:
        if oracle is None:
            raise ValueError("greedy oracle needs the channel and queue context")
        return greedy_oracle_act(oracle.v_prev_mbit, oracle.sample, oracle.queue,
                                 self.weights, self.lp, self.ladder)


def _argmax_lowest(values: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest index on ties.
    return int(np.argmax(values)) + 1


class DqnAgent(Policy):
    """Deep Q-learning bitrate agent (recurrent or dense value network)."""

    learns = True

    def __init__(self, kind: str, ladder: BitrateLadder, window: int = 10,
                 hp: DqnHyperparams | None = None, seed: int = 0,
                 rng: np.random.Generator | None = None, net=None):
        if kind not in ("lstm-dqn", "fc-dqn"):
            raise ValueError(f"unknown agent kind {kind!r}")
        super().__init__(ladder)
        self.kind = kind
        self.window = window
        self.hp = hp or DqnHyperparams()
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        if net is None:
            init_rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
            if kind == "lstm-dqn":
                net = QNetwork(window, ladder.M, self.hp.hidden, self.hp.fc,
                               rng=init_rng, dtype=self.hp.dtype)
            else:
                net = MLPQNetwork(2, ladder.M, self.hp.fc_widths, rng=init_rng,
                                  dtype=self.hp.dtype)
        if net.n_actions != ladder.M:
            raise ValueError("network output width must equal the ladder size")
        if kind == "lstm-dqn" and net.window != window:
            raise ValueError("network window differs from the observation window")
        self.net = net
        self.target = net.copy()
        self.optim = AdamState(lr=self.hp.learning_rate)
        self.memory = ReplayMemory(self.hp.replay_capacity, self.state_shape)
        self.training = False
        self.epsilon = 0.0
        self.train_steps = 0
        self.frames_seen = 0

    @property
    def state_shape(self) -> tuple[int, ...]:
        return (self.window, 2) if self.kind == "lstm-dqn" else (2,)

    def encode(self, history: History) -> np.ndarray:
        if self.kind == "lstm-dqn":
            return history.observation()
        return np.array([history.ladder.bitrate(history.last_level) / history.ladder.top,
                         history.last_q])

    def epsilon_at(self, frame: int, horizon: int | None = None) -> float:
        """Linear schedule from epsilon_start to epsilon_end over ``horizon`` frames."""
        hp = self.hp
        span = hp.decay_frames if horizon is None else horizon
        if span <= 0 or frame >= span:
            return hp.epsilon_end
        return hp.epsilon_start + (hp.epsilon_end - hp.epsilon_start) * frame / span

    def greedy_action(self, state: np.ndarray) -> int:
        return _argmax_lowest(self.net.q_values(state))

    def act(self, history, oracle=None) -> int:
        state = self.encode(history)
        if self.training and self.rng.random() < self.epsilon:
            return int(self.rng.integers(1, self.ladder.M + 1))
        return self.greedy_action(state)

    def remember(self, state, action: int, reward: float, next_state) -> None:
        self.memory.push(Transition(state, action, reward, next_state))

    def ready(self) -> bool:
        return len(self.memory) >= max(self.hp.batch_size, self.hp.warmup_transitions)

    def checkpoint(self) -> dict:
        return {
            "policy": self.kind,
            "window_o": self.window,
            "ladder": {"levels": self.ladder.levels, "frame_rate": self.ladder.frame_rate},
            "hyperparams": self.hp.to_dict(),
            "network": self.net.to_dict(),
        }

    @classmethod
    def from_checkpoint(cls, doc: dict[str, Any], ladder: BitrateLadder | None = None,
                        seed: int = 0) -> "DqnAgent":
        stored = BitrateLadder(doc["ladder"]["levels"], doc["ladder"]["frame_rate"])
        if ladder is not None and (ladder.levels != stored.levels
                                   or ladder.frame_rate != stored.frame_rate):
            raise ValueError("checkpoint ladder differs from the configured ladder")
        hp = DqnHyperparams.from_dict(doc["hyperparams"])
        net = network_from_dict(doc["network"])
        return cls(doc["policy"], ladder or stored, doc["window_o"], hp, seed=seed, net=net)


def baseline_fc_dqn_act(state2: np.ndarray, net: MLPQNetwork) -> int:
    state2 = np.asarray(state2, dtype=float)
    if state2.shape != (2,):
        raise ValueError("fc-dqn state is (previous normalized bitrate, previous QoE)")
    return _argmax_lowest(net.q_values(state2))


def act(policy: Policy, observation: History, context: OracleContext | None = None) -> int:
    if context is not None and not policy.needs_oracle:
        raise ValueError(f"{policy.kind} policy must not receive oracle context")
    level = policy.act(observation, context if policy.needs_oracle else None)
    if not 1 <= level <= policy.ladder.M:
        raise AssertionError(f"policy returned level {level} outside the ladder")
    return level


def td_targets(rewards: np.ndarray, next_values: np.ndarray, gamma: float) -> np.ndarray:
    """Bootstrapped targets ``r + gamma * max_a' Q_target(s', a')``; no terminal states."""
    return rewards + gamma * next_values.max(axis=1)


def train_step(agent: DqnAgent, memory: ReplayMemory | None = None,
               hp: DqnHyperparams | None = None) -> float:
    """One minibatch update of the online network; returns the minibatch loss."""
    memory = memory if memory is not None else agent.memory
    hp = hp or agent.hp
    need = max(hp.batch_size, hp.warmup_transitions)
    if len(memory) < need:
        raise ValueError(f"replay memory holds {len(memory)} transitions, need {need}")
    s, a, r, s2 = memory.sample(hp.batch_size, agent.rng)
    next_q, _ = agent.target.forward(s2)
    y = td_targets(r, next_q.astype(float), hp.gamma)
    loss, grads = agent.net.loss_and_grads(s, a - 1, y)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at train step {agent.train_steps}")
    agent.optim.lr = hp.learning_rate
    adam_step(agent.net.params(), grads, agent.optim)
    agent.train_steps += 1
    if agent.train_steps % hp.target_sync_period == 0:
        sync_target(agent.net, agent.target)
    return loss


def make_policy(kind: str, ladder: BitrateLadder, weights: QoEWeights, lp: LyapunovParams,
                window: int = 10, hp: DqnHyperparams | None = None, seed: int = 0,
                level: int = 1) -> Policy:
    if kind == "simple":
        return SimpleBaseline(ladder)
    if kind == "greedy":
        return GreedyOracle(ladder, weights, lp)
    if kind == "constant":
        return ConstantPolicy(ladder, level)
    if kind in ("lstm-dqn", "fc-dqn"):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        return DqnAgent(kind, ladder, window, hp, seed=seed, rng=rng)
    raise ValueError(f"unknown policy {kind!r}; choose from {POLICY_KINDS}")

"""Energy virtual queue and per-frame subchannel allocation.

The long-term energy budget is enforced through a virtual queue ``Q``
that accumulates overspend. Each frame minimizes the drift-plus-penalty
score ``-beta * q + Q * E`` over the number of subchannels; because a
frame either arrives within one frame interval or is worthless, only two
candidates matter: the fewest subchannels meeting the deadline, or none.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .channel import ChannelSample
from .qoe import QoEWeights, frame_qoe


class UndefinedDelay(ValueError):
    """Delay requested for zero subchannels or a dead channel."""


@dataclass
class LyapunovParams:
    beta: float = 1.0
    e_budget: float = 0.03
    delta_t: float = 1.0 / 60.0
    power_w: float = 0.2
    clamp_queue: bool = True

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.e_budget >= 0:
            raise ValueError("e_budget must be non-negative")
        if not self.delta_t > 0:
            raise ValueError("delta_t must be positive")

    @property
    def tau(self) -> float:
        # Delay threshold equals the frame interval.
        return self.delta_t


@dataclass
class VirtualQueue:
    q_j: float = 0.0


@dataclass(frozen=True)
class AllocationDecision:
    n_sc: int
    delay_s: float
    energy_j: float
    x: int
    q: float
    objective: float

    @property
    def transmitted(self) -> bool:
        return self.n_sc > 0


def frame_delay(v_bits: float, r_sc: float, n_sc: int) -> float:
    if n_sc <= 0 or r_sc <= 0:
        raise UndefinedDelay(f"delay undefined for n_sc={n_sc}, r_sc={r_sc}")
    return v_bits / (r_sc * n_sc)


def frame_energy(p_w: float, n_sc: int, delay_s: float, delta_t: float) -> float:
    if n_sc == 0:
        return 0.0
    return p_w * n_sc * min(delay_s, delta_t)


def min_channels(v_bits: float, r_sc: float, delta_t: float) -> int | float:
    """Fewest subchannels with ``frame_delay <= delta_t``; ``inf`` on a dead channel.

    The ceiling is corrected against ``frame_delay`` itself so that the
    answer agrees with the deadline test bit for bit.
    """
    if r_sc <= 0:
        return math.inf
    n = max(1, math.ceil(v_bits / (r_sc * delta_t)))
    while n > 1 and v_bits / (r_sc * (n - 1)) <= delta_t:
        n -= 1
    while v_bits / (r_sc * n) > delta_t:
        n += 1
    return n


def drift_plus_penalty(q: float, energy_j: float, queue: VirtualQueue | float,
                       beta: float) -> float:
    qj = queue.q_j if isinstance(queue, VirtualQueue) else queue
    return -beta * q + qj * energy_j


def allocate(v_bits: float, v_prev_mbit: float, sample: ChannelSample,
             queue: VirtualQueue | float, weights: QoEWeights,
             lp: LyapunovParams) -> AllocationDecision:
    qj = queue.q_j if isinstance(queue, VirtualQueue) else queue
    v_mbit = v_bits / 1e6
    q_drop = -weights.mu2
    drop = AllocationDecision(0, math.nan, 0.0, 1, q_drop,
                              drift_plus_penalty(q_drop, 0.0, qj, lp.beta))
    n = min_channels(v_bits, sample.r_sc, lp.delta_t)
    if n > sample.n_max:
        return drop
    delay = frame_delay(v_bits, sample.r_sc, n)
    energy = frame_energy(lp.power_w, n, delay, lp.delta_t)
    q_tx = frame_qoe(v_mbit, v_prev_mbit, 0, weights)
    score = drift_plus_penalty(q_tx, energy, qj, lp.beta)
    if score <= drop.objective:
        return AllocationDecision(n, delay, energy, 0, q_tx, score)
    return drop


def queue_update(queue: VirtualQueue | float, energy_j: float, e_budget: float,
                 clamp: bool = True) -> VirtualQueue:
    qj = queue.q_j if isinstance(queue, VirtualQueue) else queue
    nxt = qj + energy_j - e_budget
    return VirtualQueue(max(nxt, 0.0) if clamp else nxt)

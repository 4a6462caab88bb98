"""Bitrate ladder, frame sizes, per-frame QoE and run-level metrics.

Frame sizes and QoE are expressed in megabits, so a 6 Mbps stream at
60 fps contributes 0.1 to the quality term of a successful frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class BitrateLadder:
    levels: list[float] = field(default_factory=lambda: [float(m) for m in range(1, 21)])
    frame_rate: float = 60.0
    # Multiplicative frame-size jitter (std of a lognormal factor); 0 disables it.
    size_jitter: float = 0.0

    def __post_init__(self):
        self.levels = [float(v) for v in self.levels]
        if not self.levels:
            raise ValueError("ladder needs at least one level")
        if any(v <= 0 for v in self.levels):
            raise ValueError("bitrates must be positive")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("bitrates must be strictly increasing")
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")
        if self.size_jitter < 0:
            raise ValueError("size_jitter must be non-negative")

    @property
    def M(self) -> int:
        return len(self.levels)

    @property
    def delta_t(self) -> float:
        return 1.0 / self.frame_rate

    @property
    def top(self) -> float:
        return self.levels[-1]

    def bitrate(self, level_index: int) -> float:
        if not 1 <= level_index <= self.M:
            raise IndexError(f"level index {level_index} outside [1, {self.M}]")
        return self.levels[level_index - 1]


@dataclass
class QoEWeights:
    mu1: float = 0.1
    mu2: float = 1.0

    def __post_init__(self):
        for name in ("mu1", "mu2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")


@dataclass
class FrameOutcome:
    frame_index: int
    v_mbit: float
    x: int
    q: float
    energy_j: float
    n_sc: int


@dataclass
class Metrics:
    avg_qoe: float
    avg_quality_mbps: float
    avg_quality_variation_mbps: float
    success_rate: float
    avg_energy_j: float
    frames: int = 0

    def as_dict(self) -> dict:
        return {
            "avg_qoe": self.avg_qoe,
            "avg_quality_mbps": self.avg_quality_mbps,
            "avg_quality_variation_mbps": self.avg_quality_variation_mbps,
            "success_rate": self.success_rate,
            "avg_energy_j": self.avg_energy_j,
            "frames": self.frames,
        }


METRIC_NAMES = ("avg_qoe", "avg_quality_mbps", "avg_quality_variation_mbps",
                "success_rate", "avg_energy_j")


def frame_size(level_index: int, ladder: BitrateLadder,
               rng: np.random.Generator | None = None) -> float:
    """Frame size in megabits for a 1-based ladder index, ``V_m / F``.

    With ``ladder.size_jitter > 0`` and an ``rng``, the size is scaled by a
    unit-mean lognormal factor.
    """
    v = ladder.bitrate(level_index) / ladder.frame_rate
    if ladder.size_jitter > 0 and rng is not None:
        s = ladder.size_jitter
        v *= float(rng.lognormal(-0.5 * s * s, s))
    return v


def frame_qoe(v_mbit: float, v_prev_mbit: float, x: int, w: QoEWeights) -> float:
    return (1 - x) * (v_mbit - w.mu1 * abs(v_mbit - v_prev_mbit)) - w.mu2 * x


def aggregate(outcomes: Sequence[FrameOutcome], ladder: BitrateLadder) -> Metrics:
    n = len(outcomes)
    if n == 0:
        raise ValueError("cannot aggregate an empty run")
    q = np.fromiter((o.q for o in outcomes), float, n)
    v = np.fromiter((o.v_mbit for o in outcomes), float, n)
    x = np.fromiter((o.x for o in outcomes), float, n)
    e = np.fromiter((o.energy_j for o in outcomes), float, n)
    var = float(np.mean(np.abs(np.diff(v)))) * ladder.frame_rate if n > 1 else 0.0
    return Metrics(
        avg_qoe=float(np.mean(q)),
        avg_quality_mbps=float(np.mean(v * ladder.frame_rate)),
        avg_quality_variation_mbps=var,
        success_rate=float(np.mean(1.0 - x)),
        avg_energy_j=float(np.mean(e)),
        frames=n,
    )

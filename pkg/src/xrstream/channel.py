"""Per-frame channel realizations and the per-subchannel achievable rate.

Three sources are supported: a fixed SNR, i.i.d. Rayleigh block fading
(exponentially distributed SNR per frame) and replay of a CSV trace.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Thermal noise floor, -174 dBm/Hz.
DEFAULT_NOISE_PSD = 10 ** (-174 / 10) * 1e-3

CHANNEL_MODES = ("fixed", "rayleigh", "trace")
TRACE_HEADER = ("frame", "n_max", "snr_db")


class TraceError(ValueError):
    """Raised for malformed trace rows; carries the offending line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TraceExhausted(RuntimeError):
    """A non-looping trace ran out of samples."""


@dataclass
class ChannelParams:
    bandwidth_hz: float = 180e3
    power_w: float = 0.2
    noise_psd: float = DEFAULT_NOISE_PSD
    mean_snr_db: float = 20.0
    n_max: int = 10
    mode: str = "rayleigh"
    trace_path: str | None = None
    trace_loop: bool = False

    def __post_init__(self):
        if not self.bandwidth_hz > 0:
            raise ValueError("bandwidth_hz must be positive")
        if not self.power_w > 0:
            raise ValueError("power_w must be positive")
        if not self.noise_psd > 0:
            raise ValueError("noise_psd must be positive")
        if self.n_max < 0:
            raise ValueError("n_max must be non-negative")
        if self.mode not in CHANNEL_MODES:
            raise ValueError(f"mode must be one of {CHANNEL_MODES}, got {self.mode!r}")

    @property
    def noise_power_w(self) -> float:
        return self.noise_psd * self.bandwidth_hz


@dataclass(frozen=True)
class ChannelSample:
    frame_index: int
    h: float
    r_sc: float
    n_max: int


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def linear_to_db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else -math.inf


def snr_from_h(h: float, params: ChannelParams) -> float:
    return params.power_w * h * h / params.noise_power_w


def h_from_snr(snr: float, params: ChannelParams) -> float:
    """Channel coefficient giving linear SNR ``snr`` under ``params``."""
    if snr < 0:
        raise ValueError("SNR must be non-negative")
    return math.sqrt(snr * params.noise_power_w / params.power_w)


def rate_from_snr(snr: float, bandwidth_hz: float) -> float:
    return bandwidth_hz * math.log2(1.0 + snr)


def snr_from_rate(rate_bps: float, bandwidth_hz: float) -> float:
    return 2.0 ** (rate_bps / bandwidth_hz) - 1.0


def subchannel_rate(h: float, params: ChannelParams) -> float:
    """Shannon rate of one subchannel, ``B_w * log2(1 + p h^2 / (N0 B_w))`` in bits/s."""
    return rate_from_snr(snr_from_h(h, params), params.bandwidth_hz)


def _sample_from_snr(frame: int, snr: float, n_max: int, params: ChannelParams,
                     rate: float | None = None) -> ChannelSample:
    h = h_from_snr(snr, params)
    if rate is None:
        # Computed from SNR directly so the rate does not pick up the
        # round-off of the SNR -> h -> SNR trip.
        rate = rate_from_snr(snr, params.bandwidth_hz)
    if h == 0.0 or rate == 0.0:
        h, rate = 0.0, 0.0
    return ChannelSample(frame_index=frame, h=h, r_sc=rate, n_max=int(n_max))


class ChannelGenerator:
    """Stateful per-frame channel source.

    ``rng`` is only consumed in rayleigh mode; fixed and trace modes are
    deterministic. A generator is owned by one simulation loop.
    """

    def __init__(self, params: ChannelParams, rng: np.random.Generator | None = None,
                 trace: Sequence[ChannelSample] | None = None):
        self.params = params
        self.rng = rng if rng is not None else np.random.default_rng()
        self.frame = 0
        self._mean_snr = db_to_linear(params.mean_snr_db)
        self._trace = None
        if params.mode == "trace":
            if trace is None:
                if params.trace_path is None:
                    raise ValueError("trace mode requires a trace or trace_path")
                trace = load_trace(params.trace_path, params)
            self._trace = list(trace)
            self._pos = 0
        elif params.mode == "fixed":
            self._fixed = _sample_from_snr(0, self._mean_snr, params.n_max, params)

    def next_sample(self) -> ChannelSample:
        f = self.frame
        mode = self.params.mode
        if mode == "fixed":
            s = self._fixed
            sample = ChannelSample(f, s.h, s.r_sc, s.n_max)
        elif mode == "rayleigh":
            snr = self._mean_snr * float(self.rng.exponential(1.0))
            sample = _sample_from_snr(f, snr, self.params.n_max, self.params)
        else:
            if self._pos >= len(self._trace):
                if not self.params.trace_loop or not self._trace:
                    raise TraceExhausted(f"trace exhausted after {self._pos} frames")
                self._pos = 0
            s = self._trace[self._pos]
            self._pos += 1
            sample = ChannelSample(f, s.h, s.r_sc, s.n_max)
        self.frame += 1
        return sample

    def samples(self, count: int) -> list[ChannelSample]:
        return [self.next_sample() for _ in range(count)]


def _parse_float(text: str, line: int, name: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise TraceError(line, f"{name} is not a number: {text!r}") from None


def load_trace(path: str | Path, params: ChannelParams | None = None) -> list[ChannelSample]:
    """Read a channel trace CSV (``frame,n_max,snr_db[,rate_bps]``).

    ``rate_bps`` overrides the rate computed from ``snr_db`` when present.
    """
    params = params or ChannelParams(mode="trace")
    samples: list[ChannelSample] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if header is None:
                header = [c.strip() for c in row]
                if tuple(header[:3]) != TRACE_HEADER or len(header) > 4 or (
                        len(header) == 4 and header[3] != "rate_bps"):
                    # Headerless files are accepted if the first row is numeric.
                    try:
                        [float(c) for c in row]
                    except ValueError:
                        raise TraceError(line, f"bad header {row!r}") from None
                    header = list(TRACE_HEADER) + (["rate_bps"] if len(row) == 4 else [])
                else:
                    continue
            if len(row) != len(header):
                raise TraceError(line, f"expected {len(header)} fields, got {len(row)}")
            frame = _parse_float(row[0], line, "frame")
            n_max = _parse_float(row[1], line, "n_max")
            snr_db = _parse_float(row[2], line, "snr_db")
            if frame < 0 or frame != int(frame):
                raise TraceError(line, f"frame must be a non-negative integer, got {row[0]!r}")
            if n_max < 0 or n_max != int(n_max):
                raise TraceError(line, f"n_max must be a non-negative integer, got {row[1]!r}")
            if math.isnan(snr_db) or snr_db == math.inf:
                raise TraceError(line, f"snr_db must be finite or -inf, got {row[2]!r}")
            rate = None
            if len(row) == 4:
                rate = _parse_float(row[3], line, "rate_bps")
                if not rate >= 0 or math.isinf(rate):
                    raise TraceError(line, f"rate_bps must be finite and non-negative, got {row[3]!r}")
            snr = db_to_linear(snr_db) if snr_db != -math.inf else 0.0
            if rate is not None and snr_db == -math.inf and rate > 0:
                snr = snr_from_rate(rate, params.bandwidth_hz)
            samples.append(_sample_from_snr(int(frame), snr, int(n_max), params, rate))
    return samples


def write_trace(path: str | Path, samples: Iterable[ChannelSample],
                params: ChannelParams | None = None, with_rate: bool = True) -> None:
    """Write samples in the trace schema; SNR is recovered from ``h``."""
    params = params or ChannelParams(mode="trace")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(TRACE_HEADER) + (["rate_bps"] if with_rate else []))
        for s in samples:
            snr_db = linear_to_db(snr_from_h(s.h, params))
            row = [s.frame_index, s.n_max, repr(snr_db)]
            if with_rate:
                row.append(repr(float(s.r_sc)))
            w.writerow(row)

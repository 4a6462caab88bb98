"""Simulation loop, training and evaluation campaigns, sweeps and trace conversion."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .agents import (DqnAgent, DqnHyperparams, History, OracleContext, Policy,
                     make_policy, train_step)
from .allocator import LyapunovParams, VirtualQueue, allocate, queue_update
from .channel import (ChannelGenerator, ChannelParams, TraceExhausted, load_trace,
                      snr_from_rate, linear_to_db)
from .qoe import METRIC_NAMES, BitrateLadder, FrameOutcome, Metrics, QoEWeights, aggregate

log = logging.getLogger(__name__)

# Sub-stream tags for np.random.SeedSequence([seed, tag]).
STREAM_TRAIN_CHANNEL = 1
STREAM_EVAL_CHANNEL = 2
STREAM_AGENT = 3
STREAM_FRAME_SIZE = 5


class ChannelExhausted(RuntimeError):
    pass


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _from_dict(cls, d: Mapping):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


@dataclass
class SimConfig:
    ladder: BitrateLadder = field(default_factory=BitrateLadder)
    weights: QoEWeights = field(default_factory=QoEWeights)
    lyapunov: LyapunovParams = field(default_factory=LyapunovParams)
    channel: ChannelParams = field(default_factory=ChannelParams)
    window_o: int = 10
    eval_frames: int = 10_000
    train_frames: int = 40_000
    episode_length: int = 1_000
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    hyperparams: DqnHyperparams = field(default_factory=DqnHyperparams)

    def __post_init__(self):
        # Delay threshold and scheduling period are the frame interval;
        # the allocator's transmit power is the channel's.
        self.lyapunov.delta_t = self.ladder.delta_t
        self.lyapunov.power_w = self.channel.power_w
        if self.window_o < 1:
            raise ValueError("window_o must be >= 1")
        if self.eval_frames < 1:
            raise ValueError("eval_frames must be >= 1")
        if self.train_frames < 0 or self.episode_length < 1:
            raise ValueError("train_frames must be >= 0 and episode_length >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def to_dict(self) -> dict:
        return {
            "ladder": asdict(self.ladder),
            "weights": asdict(self.weights),
            "lyapunov": {"beta": self.lyapunov.beta, "e_budget": self.lyapunov.e_budget,
                         "clamp_queue": self.lyapunov.clamp_queue},
            "channel": asdict(self.channel),
            "window_o": self.window_o,
            "eval_frames": self.eval_frames,
            "train_frames": self.train_frames,
            "episode_length": self.episode_length,
            "seeds": list(self.seeds),
            "hyperparams": self.hyperparams.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        d = dict(d)
        kw = {}
        if "ladder" in d:
            kw["ladder"] = _from_dict(BitrateLadder, d.pop("ladder"))
        if "weights" in d:
            kw["weights"] = _from_dict(QoEWeights, d.pop("weights"))
        if "lyapunov" in d:
            ly = {k: v for k, v in d.pop("lyapunov").items() if k not in ("delta_t", "power_w")}
            kw["lyapunov"] = _from_dict(LyapunovParams, ly)
        if "channel" in d:
            kw["channel"] = _from_dict(ChannelParams, d.pop("channel"))
        if "hyperparams" in d:
            kw["hyperparams"] = DqnHyperparams.from_dict(d.pop("hyperparams"))
        for name in ("window_o", "eval_frames", "train_frames", "episode_length", "seeds"):
            if name in d:
                kw[name] = d.pop(name)
        if d:
            raise ValueError(f"unknown config fields: {sorted(d)}")
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    def with_channel(self, **kw) -> "SimConfig":
        return replace(self, channel=replace(self.channel, **kw),
                       lyapunov=replace(self.lyapunov))

    def with_budget(self, e_budget: float) -> "SimConfig":
        return replace(self, lyapunov=replace(self.lyapunov, e_budget=e_budget),
                       channel=replace(self.channel))


@dataclass
class FrameRecord(FrameOutcome):
    level: int = 0
    delay_s: float = math.nan
    queue_j: float = 0.0
    r_sc: float = 0.0
    n_max: int = 0


RUNLOG_COLUMNS = ("frame", "level", "v_mbit", "x", "q", "energy_j", "n_sc", "delay_s",
                  "queue_j", "r_sc", "n_max")


@dataclass
class RunLog:
    config: dict
    seed: int
    policy: str
    records: list[FrameRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def metrics(self, ladder: BitrateLadder) -> Metrics:
        return aggregate(self.records, ladder)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUNLOG_COLUMNS)
        for r in self.records:
            w.writerow([r.frame_index, r.level, repr(r.v_mbit), r.x, repr(r.q), repr(r.energy_j),
                        r.n_sc, repr(r.delay_s), repr(r.queue_j), repr(r.r_sc), r.n_max])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read_csv(cls, path: str | Path, config: dict | None = None, seed: int = -1,
                 policy: str = "") -> "RunLog":
        out = cls(config or {}, seed, policy)
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                out.records.append(FrameRecord(
                    frame_index=int(row["frame"]), v_mbit=float(row["v_mbit"]), x=int(row["x"]),
                    q=float(row["q"]), energy_j=float(row["energy_j"]), n_sc=int(row["n_sc"]),
                    level=int(row["level"]), delay_s=float(row["delay_s"]),
                    queue_j=float(row["queue_j"]), r_sc=float(row["r_sc"]),
                    n_max=int(row["n_max"])))
        return out


def run_episode(policy: Policy, channel: ChannelGenerator, config: SimConfig, frames: int,
                training: bool = False, seed: int = 0,
                size_rng: np.random.Generator | None = None,
                frame_offset: int = 0) -> RunLog:
    """Simulate ``frames`` frames: observe, choose a bitrate, allocate, score, update Q.

    With ``training`` set (learning policies only) each frame pushes one
    transition and, once the replay memory is warm, runs one train step.
    ``frame_offset`` is the number of training frames already seen, used
    for the exploration schedule.
    """
    ladder, weights, lp = config.ladder, config.weights, config.lyapunov
    history = History(ladder, config.window_o)
    policy.reset()
    learner = training and policy.learns
    if learner:
        policy.training = True
        horizon = min(policy.hp.decay_frames, max(config.train_frames, 1))
    elif policy.learns:
        policy.training = False
    queue = VirtualQueue(0.0)
    runlog = RunLog(config.to_dict(), seed, policy.kind)
    records = runlog.records
    v_prev = None
    jitter = ladder.size_jitter > 0
    for f in range(frames):
        try:
            sample = channel.next_sample()
        except TraceExhausted as exc:
            raise ChannelExhausted(f"channel ran out at frame {f} of {frames}") from exc
        if learner:
            policy.epsilon = policy.epsilon_at(frame_offset + f, horizon)
            state = policy.encode(history)
        ctx = OracleContext(v_prev, sample, queue) if policy.needs_oracle else None
        level = policy.act(history, ctx)
        v_mbit = ladder.levels[level - 1] / ladder.frame_rate
        if jitter and size_rng is not None:
            s = ladder.size_jitter
            v_mbit *= float(size_rng.lognormal(-0.5 * s * s, s))
        v_bits = v_mbit * 1e6
        # Log exactly the size the allocator scored.
        v_mbit = v_bits / 1e6
        dec = allocate(v_bits, v_mbit if v_prev is None else v_prev, sample, queue, weights, lp)
        queue = queue_update(queue, dec.energy_j, lp.e_budget, lp.clamp_queue)
        history.push(level, dec.x, dec.q)
        records.append(FrameRecord(
            frame_index=f, v_mbit=v_mbit, x=dec.x, q=dec.q, energy_j=dec.energy_j,
            n_sc=dec.n_sc, level=level, delay_s=dec.delay_s, queue_j=queue.q_j,
            r_sc=sample.r_sc, n_max=sample.n_max))
        v_prev = v_mbit
        if learner:
            policy.remember(state, level, dec.q, policy.encode(history))
            if policy.ready():
                train_step(policy)
    if learner:
        policy.training = False
    return runlog


def recompute_qoe(runlog: RunLog, weights: QoEWeights) -> list[float]:
    """Per-frame QoE recomputed from the logged (v, v_prev, x)."""
    from .qoe import frame_qoe
    out = []
    prev = None
    for r in runlog.records:
        out.append(frame_qoe(r.v_mbit, r.v_mbit if prev is None else prev, r.x, weights))
        prev = r.v_mbit
    return out


@dataclass
class TrainResult:
    agent: DqnAgent
    curve: list[float]
    seed: int

    def checkpoint(self, config: SimConfig) -> dict:
        doc = self.agent.checkpoint()
        doc["seed"] = self.seed
        doc["learning_curve"] = self.curve
        doc["config"] = config.to_dict()
        return doc


def train(config: SimConfig, kind: str = "lstm-dqn", seed: int | None = None,
          progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train one agent for ``config.train_frames`` frames.

    Training proceeds in episodes of ``episode_length`` frames; the virtual
    queue and observation window reset each episode while the channel
    process runs on. The curve holds each episode's mean reward.
    """
    seed = config.seeds[0] if seed is None else seed
    agent = make_policy(kind, config.ladder, config.weights, config.lyapunov,
                        config.window_o, config.hyperparams, seed=seed)
    if not isinstance(agent, DqnAgent):
        raise ValueError(f"{kind} is not a trainable policy")
    channel = ChannelGenerator(config.channel, _rng(seed, STREAM_TRAIN_CHANNEL))
    size_rng = _rng(seed, STREAM_FRAME_SIZE)
    curve = []
    done = 0
    while done < config.train_frames:
        n = min(config.episode_length, config.train_frames - done)
        runlog = run_episode(agent, channel, config, n, training=True, seed=seed,
                             size_rng=size_rng, frame_offset=done)
        done += n
        mean_r = float(np.mean([r.q for r in runlog.records]))
        curve.append(mean_r)
        if progress is not None:
            progress(done, mean_r)
    agent.epsilon = agent.hp.epsilon_end
    return TrainResult(agent, curve, seed)


def save_checkpoint(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path, config: SimConfig | None = None) -> DqnAgent:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return agent_from_checkpoint(doc, config)


def agent_from_checkpoint(doc: dict, config: SimConfig | None = None) -> DqnAgent:
    if config is not None:
        if doc["window_o"] != config.window_o and doc["policy"] == "lstm-dqn":
            raise ValueError(f"checkpoint window o={doc['window_o']} differs from config "
                             f"o={config.window_o}")
        if len(doc["ladder"]["levels"]) != config.ladder.M:
            raise ValueError("checkpoint ladder size differs from config")
    agent = DqnAgent.from_checkpoint(doc, config.ladder if config else None,
                                     seed=doc.get("seed", 0))
    return agent


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    mean = float(statistics.fmean(values))
    std = float(statistics.stdev(values)) if len(values) > 1 else 0.0
    return mean, std


@dataclass
class SummaryReport:
    """Metrics per policy per seed, with cross-seed mean and sample std."""

    results: dict[str, dict[int, Metrics]] = field(default_factory=lambda: defaultdict(dict))
    runlogs: dict[str, dict[int, RunLog]] = field(default_factory=lambda: defaultdict(dict))

    def add(self, policy: str, seed: int, metrics: Metrics, runlog: RunLog | None = None):
        self.results[policy][seed] = metrics
        if runlog is not None:
            self.runlogs[policy][seed] = runlog

    def merge(self, other: "SummaryReport") -> "SummaryReport":
        out = SummaryReport()
        for src in (self, other):
            for p, per_seed in src.results.items():
                for s, m in per_seed.items():
                    out.add(p, s, m, src.runlogs.get(p, {}).get(s))
        return out

    def policies(self) -> list[str]:
        return list(self.results)

    def values(self, policy: str, metric: str) -> list[float]:
        per_seed = self.results[policy]
        return [getattr(per_seed[s], metric) for s in sorted(per_seed)]

    def mean(self, policy: str, metric: str = "avg_qoe") -> float:
        return _mean_std(self.values(policy, metric))[0]

    def std(self, policy: str, metric: str = "avg_qoe") -> float:
        return _mean_std(self.values(policy, metric))[1]

    def to_dict(self) -> dict:
        out = {}
        for p, per_seed in self.results.items():
            out[p] = {
                "per_seed": {str(s): per_seed[s].as_dict() for s in sorted(per_seed)},
                "mean": {m: self.mean(p, m) for m in METRIC_NAMES},
                "std": {m: self.std(p, m) for m in METRIC_NAMES},
            }
        return out


PolicySource = Policy | Mapping[int, Policy] | Callable[[int], Policy]


def _policy_for(source: PolicySource, seed: int) -> Policy:
    if isinstance(source, Policy):
        return source
    if isinstance(source, Mapping):
        return source[seed]
    return source(seed)


def evaluate(source: PolicySource, config: SimConfig, name: str | None = None,
             keep_logs: bool = True) -> SummaryReport:
    """Evaluate greedily (no exploration) for ``eval_frames`` frames per seed."""
    report = SummaryReport()
    for seed in config.seeds:
        policy = _policy_for(source, seed)
        if policy.learns:
            _check_agent(policy, config)
        channel = ChannelGenerator(config.channel, _rng(seed, STREAM_EVAL_CHANNEL))
        runlog = run_episode(policy, channel, config, config.eval_frames, training=False,
                             seed=seed, size_rng=_rng(seed, STREAM_FRAME_SIZE + 100))
        report.add(name or policy.kind, seed, runlog.metrics(config.ladder),
                   runlog if keep_logs else None)
    return report


def _check_agent(agent: DqnAgent, config: SimConfig) -> None:
    if agent.ladder.M != config.ladder.M:
        raise ValueError(f"agent has {agent.ladder.M} actions, config ladder has {config.ladder.M}")
    if agent.kind == "lstm-dqn" and agent.window != config.window_o:
        raise ValueError(f"agent window o={agent.window} differs from config o={config.window_o}")


def baseline_factory(kind: str, config: SimConfig, level: int = 1) -> Callable[[int], Policy]:
    def make(seed: int) -> Policy:
        return make_policy(kind, config.ladder, config.weights, config.lyapunov,
                           config.window_o, config.hyperparams, seed=seed, level=level)
    return make


@dataclass
class SweepReport:
    e_grid: list[float]
    n_grid: list[int]
    # qoe[i][j] is the cross-seed mean QoE at (e_grid[i], n_grid[j]).
    qoe: list[list[float]]
    per_seed: dict[tuple[float, int], dict[int, Metrics]]

    def at(self, e: float, n: int) -> float:
        i = min(range(len(self.e_grid)), key=lambda k: abs(self.e_grid[k] - e))
        if abs(self.e_grid[i] - e) > 1e-12:
            raise KeyError(f"energy budget {e} not in grid")
        return self.qoe[i][self.n_grid.index(n)]

    def to_dict(self) -> dict:
        return {"e_grid": self.e_grid, "n_grid": self.n_grid, "avg_qoe": self.qoe,
                "cells": [{"e_budget": e, "n_max": n,
                           "per_seed": {str(s): m.as_dict() for s, m in sorted(per.items())}}
                          for (e, n), per in self.per_seed.items()]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["e_budget"] + [f"n_max={n}" for n in self.n_grid])
        for e, row in zip(self.e_grid, self.qoe):
            w.writerow([repr(e)] + [repr(v) for v in row])
        return buf.getvalue()

    def to_gnuplot(self) -> str:
        """Blank-line separated blocks for ``splot ... with pm3d``."""
        lines = ["# e_budget n_max avg_qoe"]
        for e, row in zip(self.e_grid, self.qoe):
            for n, v in zip(self.n_grid, row):
                lines.append(f"{e!r} {n} {v!r}")
            lines.append("")
        return "\n".join(lines) + "\n"


def sweep(config: SimConfig, e_grid: Iterable[float], n_grid: Iterable[int],
          policy: str | PolicySource = "greedy") -> SweepReport:
    e_grid = [float(e) for e in e_grid]
    n_grid = [int(n) for n in n_grid]
    if not e_grid or not n_grid:
        raise ValueError("sweep grids must be non-empty")
    qoe = []
    per_seed = {}
    for e in e_grid:
        row = []
        for n in n_grid:
            cell = config.with_budget(e).with_channel(n_max=n)
            source = baseline_factory(policy, cell) if isinstance(policy, str) else policy
            rep = evaluate(source, cell, name="cell", keep_logs=False)
            per_seed[(e, n)] = dict(rep.results["cell"])
            row.append(rep.mean("cell"))
        qoe.append(row)
    return SweepReport(e_grid, n_grid, qoe, per_seed)


@dataclass
class WindowStudy:
    o_values: list[int]
    report: SummaryReport
    curves: dict[int, dict[int, list[float]]]

    def mean_qoe(self, o: int) -> float:
        return self.report.mean(f"o={o}")

    def rows(self) -> list[dict]:
        return [{"o": o, "mean_qoe": self.report.mean(f"o={o}"),
                 "std_qoe": self.report.std(f"o={o}")} for o in self.o_values]


def window_study(config: SimConfig, o_values: Iterable[int], kind: str = "lstm-dqn",
                 trained: Mapping[tuple[int, int], DqnAgent] | None = None) -> WindowStudy:
    """Train and evaluate one agent per (o, seed).

    ``trained`` may supply already-trained agents keyed by (o, seed).
    """
    o_values = [int(o) for o in o_values]
    if any(o < 1 for o in o_values):
        raise ValueError("observation windows must be >= 1")
    report = SummaryReport()
    curves: dict[int, dict[int, list[float]]] = {}
    for o in o_values:
        cfg = replace(config, window_o=o, lyapunov=replace(config.lyapunov))
        agents = {}
        curves[o] = {}
        for seed in cfg.seeds:
            if trained is not None and (o, seed) in trained:
                agents[seed] = trained[(o, seed)]
            else:
                res = train(cfg, kind, seed)
                agents[seed] = res.agent
                curves[o][seed] = res.curve
        report = report.merge(evaluate(agents, cfg, name=f"o={o}", keep_logs=False))
    return WindowStudy(o_values, report, curves)


# Trace conversion -----------------------------------------------------------

RAW_HEADER = ("time_s", "n_rb", "rate_bps")


@dataclass
class ConversionReport:
    rows_in: int
    rows_out: int
    gaps: list[int]

    def to_dict(self) -> dict:
        return {"rows_in": self.rows_in, "rows_out": self.rows_out,
                "gap_frames": self.gaps, "gap_count": len(self.gaps)}


def trace_convert(src: str | Path, dst: str | Path, frame_rate: float = 60.0,
                  bandwidth_hz: float = 180e3) -> ConversionReport:
    """Convert a raw capture (``time_s,n_rb,rate_bps``) to the channel trace schema.

    Rows are bucketed into frame intervals ``floor((t - t0) * F)``. Within an
    interval, ``n_max`` is the smallest resource-block count seen and the
    per-block rate is the mean of the rows. Intervals with no rows are gaps:
    they are written with ``n_max = 0`` and zero rate, and listed in the report.
    """
    from .channel import TraceError

    buckets: dict[int, list[tuple[int, float]]] = defaultdict(list)
    rows_in = 0
    t0 = t_last = None
    with open(src, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if tuple(c.strip() for c in row) == RAW_HEADER:
                continue
            if len(row) != 3:
                raise TraceError(line, f"expected 3 fields (time_s,n_rb,rate_bps), got {len(row)}")
            try:
                t, n_rb, rate = float(row[0]), float(row[1]), float(row[2])
            except ValueError:
                raise TraceError(line, f"non-numeric field in {row!r}") from None
            if not all(map(math.isfinite, (t, n_rb, rate))) or t < 0 or n_rb < 0 or rate < 0 \
                    or n_rb != int(n_rb):
                raise TraceError(line, f"invalid values in {row!r}")
            if t0 is None:
                t0 = t_last = t
            if t < t_last:
                raise TraceError(line, "timestamps must be non-decreasing")
            t_last = t
            # Small epsilon guards against t*F landing just under an integer.
            k = int(math.floor((t - t0) * frame_rate + 1e-9))
            buckets[k].append((int(n_rb), rate))
            rows_in += 1
    if not buckets:
        raise ValueError(f"{src}: no capture rows, nothing to convert")
    last = max(buckets)
    gaps = []
    with open(dst, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "n_max", "snr_db", "rate_bps"])
        for k in range(last + 1):
            rows = buckets.get(k)
            if not rows:
                gaps.append(k)
                w.writerow([k, 0, "-inf", repr(0.0)])
                continue
            n_max = min(n for n, _ in rows)
            rate = float(np.mean([r for _, r in rows]))
            snr_db = linear_to_db(snr_from_rate(rate, bandwidth_hz))
            w.writerow([k, n_max, repr(snr_db), repr(rate)])
    return ConversionReport(rows_in, last + 1, gaps)

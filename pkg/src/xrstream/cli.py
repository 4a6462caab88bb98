"""Command line entry point: ``xrstream {train,eval,sweep,window,trace-convert}``.

On success one JSON line ``{"status": "ok", ...}`` goes to stdout; on failure
one JSON line ``{"status": "error", "error": ..., "message": ...}`` goes to
stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import report
from .agents import DqnAgent
from .harness import (SimConfig, baseline_factory, evaluate, load_checkpoint, save_checkpoint,
                      sweep, train, trace_convert, window_study)

log = logging.getLogger("xrstream")

EXIT_ERROR = 1
EXIT_USAGE = 2

POLICY_CHOICES = ("lstm-dqn", "fc-dqn", "simple", "greedy")
LEARNED = ("lstm-dqn", "fc-dqn")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _add_common(p: argparse.ArgumentParser, frames_help: str) -> None:
    p.add_argument("--config", type=Path, help="JSON file mirroring SimConfig")
    p.add_argument("--snr-db", type=float, help="mean SNR in dB")
    p.add_argument("--n-max", type=int, help="subchannel limit per frame")
    p.add_argument("--energy-budget", type=float, help="long-term energy budget e (J/frame)")
    p.add_argument("--frames", type=int, help=frames_help)
    p.add_argument("--seed", type=int, nargs="+", help="one or more seeds")
    p.add_argument("--trace", type=Path, help="replay this channel trace CSV")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--no-plots", action="store_true", help="write data files only")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xrstream", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a DQN agent per seed and save checkpoints")
    _add_common(p, "training frames per seed")
    p.add_argument("--policy", choices=LEARNED, default="lstm-dqn")
    p.add_argument("--window", type=int, help="observation window o")

    p = sub.add_parser("eval", help="evaluate a policy per seed")
    _add_common(p, "evaluation frames per seed")
    p.add_argument("--policy", choices=POLICY_CHOICES, default="greedy")
    p.add_argument("--checkpoint", type=Path, nargs="+",
                   help="checkpoint files for learned policies, one per seed or a directory")
    p.add_argument("--window", type=int, help="observation window o")

    p = sub.add_parser("sweep", help="average QoE over an energy x subchannel grid")
    _add_common(p, "evaluation frames per cell and seed")
    p.add_argument("--policy", choices=("simple", "greedy"), default="greedy")
    p.add_argument("--e-grid", type=_floats,
                   default=[round(0.01 * k, 2) for k in range(1, 13)], help="comma list (J)")
    p.add_argument("--n-grid", type=_ints, default=list(range(2, 15, 2)), help="comma list")

    p = sub.add_parser("window", help="train and evaluate across observation windows")
    _add_common(p, "training frames per agent")
    p.add_argument("--policy", choices=("lstm-dqn",), default="lstm-dqn")
    p.add_argument("--o-values", type=_ints, default=[1, 5, 10, 15], help="comma list")
    p.add_argument("--eval-frames", type=int, help="evaluation frames per seed")

    p = sub.add_parser("trace-convert", help="convert a raw capture to a channel trace")
    p.add_argument("input", type=Path, help="raw CSV: time_s,n_rb,rate_bps")
    p.add_argument("output", type=Path, help="trace CSV to write")
    p.add_argument("--config", type=Path, help="JSON config (frame rate and bandwidth)")
    p.add_argument("--out", type=Path, help="directory for the conversion report")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(args: argparse.Namespace, frames_field: str | None) -> SimConfig:
    cfg = SimConfig.load(args.config) if args.config else SimConfig()
    ch = {}
    if getattr(args, "snr_db", None) is not None:
        ch["mean_snr_db"] = args.snr_db
    if getattr(args, "n_max", None) is not None:
        ch["n_max"] = args.n_max
    if getattr(args, "trace", None) is not None:
        ch["mode"] = "trace"
        ch["trace_path"] = str(args.trace)
    if ch:
        cfg = cfg.with_channel(**ch)
    if getattr(args, "energy_budget", None) is not None:
        cfg = cfg.with_budget(args.energy_budget)
    kw = {}
    if frames_field and getattr(args, "frames", None) is not None:
        kw[frames_field] = args.frames
    if getattr(args, "seed", None):
        kw["seeds"] = list(args.seed)
    if getattr(args, "window", None) is not None:
        kw["window_o"] = args.window
    if getattr(args, "eval_frames", None) is not None:
        kw["eval_frames"] = args.eval_frames
    if kw:
        cfg = replace(cfg, lyapunov=replace(cfg.lyapunov), **kw)
    return cfg


def _progress(policy: str, seed: int):
    def cb(done: int, mean_r: float) -> None:
        log.info("%s seed %d: %d frames, episode reward %.4f", policy, seed, done, mean_r)
    return cb


def cmd_train(args) -> dict:
    cfg = load_config(args, "train_frames")
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")
    outputs, curves = [], {}
    for seed in cfg.seeds:
        res = train(cfg, args.policy, seed, progress=_progress(args.policy, seed))
        path = args.out / f"checkpoint_{args.policy}_seed{seed}.json"
        save_checkpoint(res.checkpoint(cfg), path)
        outputs.append(path)
        curves[f"seed{seed}"] = res.curve
    outputs += report.write_curves(curves, args.out, f"learning_curve_{args.policy}",
                                   plot=not args.no_plots)
    return {"outputs": [str(p) for p in outputs]}


def _checkpoint_paths(paths: list[Path], policy: str, seeds: list[int]) -> dict[int, Path]:
    if len(paths) == 1 and paths[0].is_dir():
        found = {s: paths[0] / f"checkpoint_{policy}_seed{s}.json" for s in seeds}
        missing = [str(p) for p in found.values() if not p.exists()]
        if missing:
            raise UsageError(f"missing checkpoints: {', '.join(missing)}")
        return found
    if len(paths) == 1:
        return {s: paths[0] for s in seeds}
    if len(paths) != len(seeds):
        raise UsageError(f"{len(paths)} checkpoints given for {len(seeds)} seeds")
    return dict(zip(seeds, paths))


def cmd_eval(args) -> dict:
    cfg = load_config(args, "eval_frames")
    if args.policy in LEARNED:
        if not args.checkpoint:
            raise UsageError(f"--checkpoint is required for {args.policy}")
        paths = _checkpoint_paths(args.checkpoint, args.policy, cfg.seeds)
        agents: dict[int, DqnAgent] = {s: load_checkpoint(p, cfg) for s, p in paths.items()}
        for s, agent in agents.items():
            if agent.kind != args.policy:
                raise UsageError(f"checkpoint for seed {s} holds {agent.kind}, not {args.policy}")
        rep = evaluate(agents, cfg, name=args.policy)
    else:
        rep = evaluate(baseline_factory(args.policy, cfg), cfg, name=args.policy)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")
    outputs = report.write_summary(rep, args.out, f"eval_{args.policy}", plot=not args.no_plots)
    outputs += report.write_runlogs(rep, args.out)
    return {"outputs": [str(p) for p in outputs],
            "mean": {k: rep.mean(args.policy, k) for k in ("avg_qoe", "success_rate",
                                                            "avg_energy_j")}}


def cmd_sweep(args) -> dict:
    cfg = load_config(args, "eval_frames")
    if not args.e_grid or not args.n_grid:
        raise UsageError("sweep grids must be non-empty")
    result = sweep(cfg, args.e_grid, args.n_grid, policy=args.policy)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")
    outputs = report.write_sweep(result, args.out, f"sweep_{args.policy}", plot=not args.no_plots)
    return {"outputs": [str(p) for p in outputs]}


def cmd_window(args) -> dict:
    cfg = load_config(args, "train_frames")
    study = window_study(cfg, args.o_values, kind=args.policy)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")
    outputs = report.write_window(study, args.out, plot=not args.no_plots)
    curves = {f"o{o}_seed{s}": c for o, per in study.curves.items() for s, c in per.items()}
    outputs += report.write_curves(curves, args.out, "window_learning_curves",
                                   plot=not args.no_plots)
    return {"outputs": [str(p) for p in outputs],
            "mean_qoe": {str(r["o"]): r["mean_qoe"] for r in study.rows()}}


def cmd_trace_convert(args) -> dict:
    cfg = SimConfig.load(args.config) if args.config else SimConfig()
    rep = trace_convert(args.input, args.output, frame_rate=cfg.ladder.frame_rate,
                        bandwidth_hz=cfg.channel.bandwidth_hz)
    outputs = [str(args.output)]
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        outputs.append(str(report.write_json(rep.to_dict(), args.out / "conversion_report.json")))
    return {"outputs": outputs, "report": rep.to_dict()}


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "window": cmd_window,
            "trace-convert": cmd_trace_convert}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"status": "error", "error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("usage", "invalid command line (see --help)", EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except (OSError, ValueError, KeyError, IndexError, RuntimeError, ArithmeticError) as exc:
        log.debug("command failed", exc_info=True)
        return _fail(type(exc).__name__, str(exc), EXIT_ERROR)
    print(json.dumps({"status": "ok", "command": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line experiment runner.

Subcommands: gen, train, eval, sweep, render, sizecalc. Every CSV starts with
``#`` comment lines echoing the effective configuration; the first non-comment
line is the column header.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, documented_keys, load_config
from .ddqn import NonFiniteLossError, Trainer
from .evaluation import (EvalReport, GreedyPolicy, QPolicy, RandomPolicy, monte_carlo_eval, run_episode,
                         sweep)
from .grid import DH, generate_scenario, load_map, load_scenario, save_scenario
from .observation import FlattenSizeError
from .qnet import CheckpointError, load_checkpoint, save_checkpoint
from .render import render_svg, trajectory_from_csv, trajectory_to_csv

METRICS_COLUMNS = ("step", "loss", "episode_reward", "episode_cr", "episode_crar", "episode_success")
EVAL_COLUMNS = ("episode", "seed", "success", "cr", "crar", "steps", "reward")
SWEEP_COLUMNS = ("proj", "port", "flatten_arch", "flatten_literal", "mean_crar", "mean_cr", "success_rate",
                 "agents")


class CommandError(RuntimeError):
    pass


def config_echo(cfg: RunConfig, extra: Sequence[tuple[str, object]] = ()) -> list[str]:
    lines = [f"armsim {__version__}"]
    lines += [f"{k} = {v}" for k, v in extra]
    lines += cfg.to_text().splitlines()
    return lines


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path: Path, echo: Sequence[str], columns: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in echo:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_num(v) for v in row])


def csv_body(path) -> str:
    """The CSV text without the leading ``#`` echo lines."""
    with open(path, encoding="utf-8") as fh:
        return "".join(line for line in fh if not line.startswith("#"))


def read_csv_rows(path) -> list[dict]:
    return list(csv.DictReader(io.StringIO(csv_body(path))))


# -- subcommands ---------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, out_path) -> Path:
    m = load_map(cfg.map)
    scenario = generate_scenario(m, cfg.scenario_config(), np.random.default_rng(cfg.seed))
    out_path = Path(out_path)
    save_scenario(scenario, out_path)
    return out_path


def checkpoint_name(step: int) -> str:
    return f"step_{step:08d}.qnet"


def cmd_train(cfg: RunConfig, out_dir, log=None) -> tuple[Path, Path]:
    """Train for ``total_steps``. Writes ``metrics.csv`` (one row per finished
    episode), ``config.cfg`` and checkpoints under ``checkpoints/``, starting with
    the untrained network at step 0. Returns (last checkpoint, metrics path)."""
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    m = load_map(cfg.map)
    arch, obs, train = cfg.arch(), cfg.obs(), cfg.train()
    trainer = Trainer(m, cfg.scenario_config(), obs, arch, train, cfg.reward(), cfg.channel())

    def checkpoint() -> Path:
        path = ckpt_dir / checkpoint_name(trainer.steps)
        save_checkpoint(path, trainer.theta, arch, obs, m.size)
        return path

    last = checkpoint()
    metrics_path = out_dir / "metrics.csv"
    interval = cfg.checkpoint_interval
    t0 = time.perf_counter()
    with open(metrics_path, "w", encoding="utf-8", newline="") as fh:
        for line in config_echo(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for _ in range(train.total_steps):
            try:
                entry = trainer.train_step()
            except NonFiniteLossError as exc:
                fh.flush()
                last = checkpoint()
                raise CommandError(f"training aborted: {exc}; last parameters saved to {last}") from exc
            if entry.episode_done:
                w.writerow([entry.step, _num(entry.episode_loss), _num(entry.episode_reward),
                            _num(entry.episode_cr), _num(entry.episode_crar), int(entry.episode_success)])
            if trainer.steps % interval == 0 or trainer.steps == train.total_steps:
                last = checkpoint()
                if log:
                    log(f"step {trainer.steps}/{train.total_steps} ({time.perf_counter() - t0:.0f}s) -> {last.name}")
    return last, metrics_path


def make_policy(kind: str, cfg: RunConfig, checkpoint=None):
    if kind == "random":
        return RandomPolicy()
    if kind == "greedy":
        return GreedyPolicy()
    if checkpoint is None:
        raise CommandError("a checkpoint is required unless --random-policy or --greedy-policy is given")
    m = load_map(cfg.map)
    try:
        params, _ = load_checkpoint(checkpoint, cfg.arch(), cfg.obs(), m.size)
    except CheckpointError as exc:
        raise CommandError(f"checkpoint {checkpoint} does not fit the config: {exc}") from exc
    return QPolicy(params, cfg.obs())


def eval_rows(report: EvalReport) -> list[list]:
    rows = [[i, e.seed, e.success, e.cr, e.crar, e.steps_used, e.reward_sum] for i, e in enumerate(report.episodes)]
    rows.append(["summary", "", report.success_rate, report.mean_cr, report.mean_crar,
                 float(np.mean([e.steps_used for e in report.episodes])),
                 float(np.mean([e.reward_sum for e in report.episodes]))])
    return rows


def cmd_eval(cfg: RunConfig, out_dir, checkpoint=None, n: Optional[int] = None, policy: str = "q") -> tuple[Path, EvalReport]:
    """Monte Carlo evaluation over ``n`` generated scenarios seeded by ``eval_seed``.
    Writes ``eval.csv``: one row per episode and a final summary row holding the
    success rate, mean CR and mean CRAR."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = cfg.eval_episodes if n is None else n
    pol = make_policy(policy, cfg, checkpoint)
    m = load_map(cfg.map)
    report = monte_carlo_eval(pol, m, cfg.scenario_config(), n, cfg.eval_seed, cfg.reward(), cfg.channel())
    echo = config_echo(cfg, [("policy", policy), ("checkpoint", checkpoint or "none"), ("episodes", n)])
    path = out_dir / "eval.csv"
    _write_csv(path, echo, EVAL_COLUMNS, eval_rows(report))
    return path, report


def cmd_sweep(cfg: RunConfig, out_dir, projs: Optional[Sequence[int]] = None,
              ports: Optional[Sequence[int]] = None, log=None) -> Path:
    """Train and evaluate agents for every (proj, port) pair. Wall-clock
    seconds per cell go into the echo header so the CSV body stays rerun-stable."""
    projs = list(projs) if projs is not None else cfg.int_list("sweep_projs")
    ports = list(ports) if ports is not None else cfg.int_list("sweep_ports")
    if not projs or not ports:
        raise CommandError("sweep needs nonempty proj and port lists")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m = load_map(cfg.map)
    rows = sweep(m, cfg.scenario_config(), projs, ports, cfg.arch(), cfg.train(), cfg.sweep_eval_episodes,
                 cfg.sweep_agents, cfg.reward(), cfg.channel(), cfg.eval_seed, progress=log)
    echo = config_echo(cfg, [("projs", " ".join(map(str, projs))), ("ports", " ".join(map(str, ports)))])
    echo += [f"wall_clock proj={r.proj} port={r.port} seconds={r.train_seconds:.1f}" for r in rows]
    path = out_dir / "sweep.csv"
    _write_csv(path, echo, SWEEP_COLUMNS,
               [[r.proj, r.port, r.flatten_arch, r.flatten_literal, r.mean_crar, r.mean_cr, r.success_rate, r.agents]
                for r in rows])
    return path


def cmd_render(scenario_path, trajectory, out_path, title: Optional[str] = None) -> Path:
    """Render a scenario and a trajectory (a list of steps or a trajectory CSV path) to SVG."""
    scenario = load_scenario(scenario_path)
    if isinstance(trajectory, (str, os.PathLike)):
        trajectory = trajectory_from_csv(Path(trajectory).read_text(encoding="utf-8"))
    out_path = Path(out_path)
    out_path.write_text(render_svg(scenario, trajectory or [], title), encoding="utf-8")
    return out_path


def rollout(cfg: RunConfig, scenario_path, policy: str, checkpoint=None):
    scenario = load_scenario(scenario_path)
    pol = make_policy(policy, cfg, checkpoint)
    _, steps = run_episode(pol, scenario, cfg.seed, cfg.reward(), cfg.channel(), record=True)
    return steps


def _flatten_parts(proj: int, port: int, size: int, n_c: int, n_k: int, trim: int):
    g = -(-(2 * size - 1) // port)
    return proj - n_k * trim, g - n_k * trim


def sizecalc_line(proj: int, port: int, size: int, n_c: int = 16, n_k: int = 2, s_k: int = 5) -> str:
    """One line comparing the literal flatten-width formula (trim s_k // 2 per
    layer) with the width the network really has (trim s_k - 1 per layer)."""
    head = f"proj={proj} port={port} C={size}: "
    local, glob = _flatten_parts(proj, port, size, n_c, n_k, s_k // 2)
    if local < 0 or glob < 0:
        literal = "n/a (negative side)"
    else:
        literal = f"{n_c * (local ** 2 + glob ** 2) + 1} (literal)"
        if local == 0:
            literal += " [local term 0]"
        if glob == 0:
            literal += " [global term 0]"
    local, glob = _flatten_parts(proj, port, size, n_c, n_k, s_k - 1)
    if local < 1 or glob < 1:
        arch = "n/a (conv stack removes a whole branch) (arch)"
    else:
        arch = f"{n_c}({local ** 2}+{glob ** 2})+1 = {n_c * (local ** 2 + glob ** 2) + 1} (arch)"
    return head + literal + " / " + arch


def cmd_sizecalc(cfg: RunConfig, projs: Optional[Sequence[int]] = None, ports: Optional[Sequence[int]] = None,
                 size: Optional[int] = None) -> str:
    projs = list(projs) if projs else cfg.int_list("sweep_projs")
    ports = list(ports) if ports else cfg.int_list("sweep_ports")
    size = size or load_map(cfg.map).size
    return "\n".join(sizecalc_line(p, q, size, cfg.n_c, cfg.n_k, cfg.s_k) for q in ports for p in projs) + "\n"


# -- argument parsing ----------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default=".", help="output directory")

    p = argparse.ArgumentParser(prog="armsim", description="Grid resource-management simulator and DDQN agent.")
    p.add_argument("--version", action="version", version=f"armsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a scenario file")
    g.add_argument("--name", default="scenario.txt", help="file name inside --out")

    sub.add_parser("train", parents=[common], help="train an agent; writes checkpoints and metrics.csv")

    e = sub.add_parser("eval", parents=[common], help="Monte Carlo evaluation; writes eval.csv")
    e.add_argument("--checkpoint")
    e.add_argument("-n", type=int, help="episodes (default: eval_episodes)")
    pol = e.add_mutually_exclusive_group()
    pol.add_argument("--random-policy", action="store_true", help="uniform random actions, no checkpoint")
    pol.add_argument("--greedy-policy", action="store_true", help="scripted nearest-goal policy, no checkpoint")

    s = sub.add_parser("sweep", parents=[common], help="(proj, port) sweep; writes sweep.csv")
    s.add_argument("--projs", type=_int_list)
    s.add_argument("--ports", type=_int_list)

    r = sub.add_parser("render", parents=[common], help="draw a scenario and trajectory as SVG")
    r.add_argument("--scenario", required=True)
    src = r.add_mutually_exclusive_group()
    src.add_argument("--trajectory", help="trajectory CSV to draw")
    src.add_argument("--checkpoint", help="roll out this agent on the scenario")
    src.add_argument("--random-policy", action="store_true")
    src.add_argument("--greedy-policy", action="store_true")
    src.add_argument("--empty", action="store_true", help="map and target only")
    r.add_argument("--name", default="render.svg", help="file name inside --out")

    z = sub.add_parser("sizecalc", parents=[common], help="print literal and real flatten widths")
    z.add_argument("--projs", type=_int_list)
    z.add_argument("--ports", type=_int_list)
    z.add_argument("--size", type=int, help="grid side (default: size of the configured map)")

    sub.add_parser("keys", help="list every config key with its default")
    return p


def _policy_kind(args) -> str:
    if getattr(args, "random_policy", False):
        return "random"
    if getattr(args, "greedy_policy", False):
        return "greedy"
    return "q"


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "keys":
        for key, default, doc in documented_keys():
            print(f"{key} = {default}    # {doc}")
        return 0

    def log(msg):
        print(msg, file=sys.stderr, flush=True)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        out = Path(args.out)
        if args.command == "gen":
            out.mkdir(parents=True, exist_ok=True)
            print(cmd_gen(cfg, out / args.name))
        elif args.command == "train":
            ckpt, metrics = cmd_train(cfg, out, log)
            print(f"checkpoint: {ckpt}\nmetrics: {metrics}")
        elif args.command == "eval":
            path, report = cmd_eval(cfg, out, args.checkpoint, args.n, _policy_kind(args))
            label = "CR" if cfg.mode == DH else "CRAR"
            value = report.mean_cr if cfg.mode == DH else report.mean_crar
            print(f"{path}: n={report.n} success={report.success_rate:.3f} {label}={value:.4f}")
        elif args.command == "sweep":
            print(cmd_sweep(cfg, out, args.projs, args.ports, log))
        elif args.command == "render":
            out.mkdir(parents=True, exist_ok=True)
            if args.trajectory:
                steps = args.trajectory
            elif args.empty:
                steps = []
            else:
                steps = rollout(cfg, args.scenario, _policy_kind(args), args.checkpoint)
                traj = out / (Path(args.name).stem + ".trajectory.csv")
                traj.write_text(trajectory_to_csv(steps, config_echo(cfg)), encoding="utf-8")
            print(cmd_render(args.scenario, steps, out / args.name))
        elif args.command == "sizecalc":
            sys.stdout.write(cmd_sizecalc(cfg, args.projs, args.ports, args.size))
    except (ConfigError, CommandError, CheckpointError, FlattenSizeError, OSError, ValueError) as exc:
        print(f"armsim {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

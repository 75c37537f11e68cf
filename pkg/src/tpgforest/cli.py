"""Command-line interface.

Subcommands: ``train``, ``eval``, ``sweep``, ``replay``, ``export-dot`` and
``validate-config``. Experiment configs are sectioned key/value files
(``[env]``, ``[evo]``, ``[trainer]``); ``--set section.key=value`` overrides
win over the file. Outputs go to ``--out`` (default ``$TPGFOREST_OUT`` or
``./out``) and are written to a temporary name first, then renamed, so an
interrupted run never leaves half-written files.

Exit codes: 0 success, 2 config/usage error, 3 runtime error, 4 validation
or mismatch failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import tempfile
from pathlib import Path

from .env import Trajectory, forest_array, replay
from .errors import ConfigError, MismatchError, ParseError, PlacementInfeasible, ValidationError
from .io import export_dot, load_graph, render_trajectory, save_graph
from .trainer import (
    ExperimentConfig, evaluate, eval_seed_base, rollout, scenario_seeds, sweep, sweep_table,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_INVALID = 4

OUT_ENV_VAR = "TPGFOREST_OUT"

log = logging.getLogger("tpgforest")


def write_atomic(path: Path, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def read_bytes(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        try:
            cfg = ExperimentConfig.from_text(read_bytes(args.config).decode("utf-8"))
        except ConfigError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    if args.set:
        cfg = cfg.with_overrides(args.set)
    trainer = cfg.trainer
    if getattr(args, "seed", None) is not None:
        trainer = dataclasses.replace(trainer, master_seed=args.seed)
    if getattr(args, "workers", None) is not None:
        trainer = dataclasses.replace(trainer, workers=args.workers)
    return dataclasses.replace(cfg, trainer=trainer)


def out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV_VAR) or "out")


# ---------------------------------------------------------------------------
# subcommands

def cmd_validate_config(args) -> int:
    cfg = load_config(args)
    text = cfg.to_text()
    sys.stdout.write(text)
    if args.out:
        write_atomic(out_dir(args) / "config.cfg", text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = out_dir(args)

    def progress(s):
        log.info("gen %d  best %.2f  median %.2f  teams %d", s.generation, s.best, s.median,
                 s.n_teams)

    result = train(cfg, progress=progress if args.verbose else None)
    report = evaluate(result.champion, cfg)
    write_atomic(out / "config.cfg", cfg.to_text())
    write_atomic(out / "champion.graph", save_graph(result.champion))
    write_atomic(out / "generations.tsv", result.generation_log())
    write_atomic(out / "timing.tsv", result.timing_log())
    write_atomic(out / "selection_report.tsv", result.selection_report.to_text())
    write_atomic(out / "eval_report.tsv", report.to_text())
    print(f"champion team {result.champion_id}: {report.summary()}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    graph = load_graph(read_bytes(args.champion))
    base = args.scenario_base if args.scenario_base is not None else eval_seed_base(cfg.master_seed)
    report = evaluate(graph, cfg, scenario_seed_base=base, root=args.root)
    print(report.summary())
    if args.out or os.environ.get(OUT_ENV_VAR):
        out = out_dir(args)
        write_atomic(out / "config.cfg", cfg.to_text())
        write_atomic(out / "eval_report.tsv", report.to_text())
        if args.trajectories:
            for i, seed in enumerate(scenario_seeds(base, cfg.trainer.eval_scenarios)):
                traj = rollout(graph, cfg, seed, root=report.champion_id)
                write_atomic(out / "trajectories" / f"scenario_{i:03d}.traj", traj.to_text())
        print(f"wrote {out}")
    return EXIT_OK


def parse_grid(items: list[str]) -> dict[str, list[str]]:
    grid: dict[str, list[str]] = {}
    for item in items or []:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise ConfigError(f"grid entry {item!r} is not key=v1,v2,...")
        grid[key.strip()] = [v.strip() for v in values.split(",")]
    return grid


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    raw = parse_grid(args.grid)
    # coerce the values through the config layer so bad keys/values fail up front
    grid = {}
    for key, values in raw.items():
        grid[key] = [getattr(cfg.with_values({"evo": {key: v}}).evo, key) for v in values]
    keys = sorted(grid)

    def progress(row):
        status = row.report.summary() if row.report else row.error
        log.info("sweep point %s: %s", row.point, status)

    rows = sweep(cfg, grid, progress=progress if args.verbose else None)
    human, tsv = sweep_table(rows, keys)
    out = out_dir(args)
    write_atomic(out / "config.cfg", cfg.to_text())
    write_atomic(out / "sweep.txt", human)
    write_atomic(out / "sweep.tsv", tsv)
    sys.stdout.write(human)
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = load_config(args)
    text = read_bytes(args.trajectory).decode("utf-8")
    traj = Trajectory.from_text(text)
    fresh = replay(cfg.env, traj)
    forest = forest_array(cfg.env, traj.seed)
    png = render_trajectory(fresh, forest, cfg.env, dpi=args.dpi)
    target = Path(args.image) if args.image else out_dir(args) / (Path(args.trajectory).stem + ".png")
    write_atomic(target, png)
    print(f"replayed {len(fresh.records)} steps ({fresh.terminal.label}), wrote {target}")
    return EXIT_OK


def cmd_export_dot(args) -> int:
    graph = load_graph(read_bytes(args.champion))
    cfg = load_config(args)
    highlight = None
    if args.trajectory:
        from .env import DroneForestEnv
        from .tpg import CompiledGraph
        traj = Trajectory.from_text(read_bytes(args.trajectory).decode("utf-8"))
        if not 1 <= args.step <= len(traj.records):
            raise ConfigError(f"--step must be in [1, {len(traj.records)}]")
        env = DroneForestEnv(cfg.env, traj.mode)
        obs = env.reset(traj.seed)
        if env.trajectory.forest_digest != traj.forest_digest:
            raise MismatchError("trajectory does not match the configured forest")
        for a in traj.actions[:args.step - 1]:
            obs = env.step(a).observation
        root = args.root if args.root is not None else graph.roots[0]
        action, highlight = CompiledGraph(graph).trace(root, obs)
        if action != traj.records[args.step - 1].action:
            raise MismatchError("graph does not reproduce the logged action at that step")
    dot = export_dot(graph, highlight=highlight, config=cfg.env)
    if args.dot:
        write_atomic(Path(args.dot), dot)
    else:
        sys.stdout.write(dot)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file ([env]/[evo]/[trainer])")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (overrides trainer.master_seed)")
    common.add_argument("--workers", type=int, help="evaluation threads (0 = all cores)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR} or ./out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tpgforest",
                                     description="Tangled program graphs for drone forest navigation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="evolve a champion and evaluate it")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a champion graph file")
    p.add_argument("--champion", required=True, help="graph file")
    p.add_argument("--root", type=int, help="root team id (default: the graph's only root)")
    p.add_argument("--scenario-base", type=int,
                   help="scenario seed base (default: derived from the master seed)")
    p.add_argument("--trajectories", action="store_true",
                   help="also write one trajectory log per scenario")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="hyperparameter grid over [evo] keys")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2,...",
                   help="one evolution parameter and its values (repeatable)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", parents=[common], help="re-run a trajectory log and render it")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--image", help="PNG path (default: <out>/<trajectory name>.png)")
    p.add_argument("--dpi", type=int, default=100)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("export-dot", parents=[common], help="write Graphviz DOT for a graph")
    p.add_argument("--champion", required=True)
    p.add_argument("--dot", help="output path (default: stdout)")
    p.add_argument("--trajectory", help="highlight the decision taken at --step of this log")
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--root", type=int)
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("validate-config", parents=[common],
                       help="check a config and print the resolved values")
    p.set_defaults(func=cmd_validate_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, ValidationError, MismatchError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (PlacementInfeasible, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

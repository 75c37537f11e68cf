"""Training and evaluation harness.

Seed discipline: everything descends from ``master_seed`` through labelled
child streams (see :mod:`tpgforest.rng`):

==========================  ===============================================
``init``                    initial population
``episodes/g/i``            forest of training episode ``i`` in generation
                            ``g`` (shared by every root of that generation)
``mutation/g``              selection + cloning after generation ``g``
``champion-selection``      scenarios used to pick the champion
``eval-scenarios``          scenario base for the reported evaluation;
                            scenario ``i`` uses ``child_seed(base, i)``
``sweep-point/p``           master seed of sweep grid point ``p``
==========================  ===============================================

Root evaluation runs whole episodes inside one jitted kernel. Roots are split
into contiguous chunks that threads process independently; results are put
back in root order, so the worker count affects wall time only.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import itertools
import logging
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import config as cfgtext
from .env import (
    GOAL_REACHED, MODE_PPO, MODE_TPG, RUNNING, DroneForestEnv, EnvConfig, Trajectory,
    beam_directions, forest_array, scan_kernel, step_kernel, training_reward,
)
from .errors import ConfigError, PlacementInfeasible
from .evo import EvolutionParams, RootFitness, init_population, next_generation, rank_roots
from .rng import child_seed, make_rng
from .tpg import BANK_OBS, CompiledGraph, TpgGraph, traverse_kernel, validate

log = logging.getLogger(__name__)

FITNESS_MODES = ("sum", "horizon", "final", "distance")


@dataclass(frozen=True)
class TrainerSettings:
    n_generations: int = 100
    eval_scenarios: int = 100
    master_seed: int = 1
    reward_mode: str = "tpg"
    fitness: str = "horizon"
    workers: int = 0  # 0: use every available core
    label: str = "experiment"

    def __post_init__(self):
        if self.n_generations < 1:
            raise ConfigError("n_generations must be >= 1")
        if self.eval_scenarios < 1:
            raise ConfigError("eval_scenarios must be >= 1")
        if self.reward_mode not in ("tpg", "ppo"):
            raise ConfigError(f"reward_mode must be tpg or ppo, got {self.reward_mode!r}")
        if self.fitness not in FITNESS_MODES:
            raise ConfigError(f"fitness must be one of {FITNESS_MODES}")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    evo: EvolutionParams = field(default_factory=EvolutionParams)
    trainer: TrainerSettings = field(default_factory=TrainerSettings)

    SECTIONS = ("env", "evo", "trainer")

    @property
    def master_seed(self) -> int:
        return self.trainer.master_seed

    def to_text(self) -> str:
        parts = []
        for name in self.SECTIONS:
            parts.append(f"[{name}]\n" + cfgtext.dump_flat(getattr(self, name)))
        return "\n".join(parts)

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        sections = cfgtext.parse_sections(text, cls.SECTIONS)
        return cls().with_values(sections)

    def with_values(self, sections: dict[str, dict[str, str]]) -> ExperimentConfig:
        parts = {name: getattr(self, name) for name in self.SECTIONS}
        for name, values in sections.items():
            if name not in parts:
                raise ConfigError(f"unknown section [{name}]")
            parts[name] = cfgtext.update_dataclass(parts[name], values, name)
        return ExperimentConfig(**parts)

    def with_overrides(self, overrides: list[str]) -> ExperimentConfig:
        """Apply ``section.key=value`` strings."""
        sections: dict[str, dict[str, str]] = {}
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not section.key=value")
            sections.setdefault(section, {})[name] = value
        return self.with_values(sections)

    def digest(self) -> str:
        """Hash of everything that can change results (the worker count cannot)."""
        canon = dataclasses.replace(self, trainer=dataclasses.replace(self.trainer, workers=0))
        return hashlib.sha256(canon.to_text().encode()).hexdigest()[:16]


def resolve_workers(workers: int) -> int:
    return workers if workers > 0 else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# episode kernels

@njit(cache=True, nogil=True)
def run_episode(root, forest, params, dirs, mode, team_start, edge_dest, prog_start,
                code, consts, bank, visited, path):
    """Run one greedy episode.

    Returns (summed reward, last reward, final y, terminal code, step count).
    """
    trees = forest.copy()
    state = np.zeros(6)
    obs = np.empty(dirs.shape[0])
    max_range = params[8]
    y_goal = params[2]
    scan_kernel(state[0], state[1], trees, dirs, max_range, obs)
    total = 0.0
    step = 0
    while True:
        action, _ = traverse_kernel(root, obs, team_start, edge_dest, prog_start, code,
                                    consts, bank, visited, path)
        y_prev = state[1]
        step += 1
        term = step_kernel(state, trees, action, params, step)
        r = training_reward(term, state[1], y_prev, y_goal, mode)
        total += r
        if term != RUNNING:
            return total, r, state[1], term, step
        scan_kernel(state[0], state[1], trees, dirs, max_range, obs)


@njit(cache=True, nogil=True)
def run_batch(roots, forests, params, dirs, mode, team_start, edge_dest, prog_start,
              code, consts, totals, finals, ys, terms, steps):
    n_teams = team_start.shape[0] - 1
    bank = np.zeros(BANK_OBS + dirs.shape[0])
    visited = np.zeros(max(n_teams, 1), dtype=np.bool_)
    path = np.zeros(max(n_teams, 1), dtype=np.int64)
    for i in range(roots.shape[0]):
        for j in range(forests.shape[0]):
            t, f, y, term, n = run_episode(roots[i], forests[j], params, dirs, mode, team_start,
                                        edge_dest, prog_start, code, consts, bank, visited, path)
            totals[i, j] = t
            finals[i, j] = f
            ys[i, j] = y
            terms[i, j] = term
            steps[i, j] = n


@dataclass
class BatchResult:
    totals: np.ndarray  # summed training reward, (n_roots, n_episodes)
    finals: np.ndarray  # reward of the terminal step
    ys: np.ndarray  # final y
    terminals: np.ndarray
    steps: np.ndarray


def forests_for(env: EnvConfig, seeds: list[int]) -> np.ndarray:
    out = np.zeros((len(seeds), env.n_trees, 6))
    for k, s in enumerate(seeds):
        try:
            out[k] = forest_array(env, s)
        except PlacementInfeasible as exc:
            exc.seed = s
            raise
    return out


def run_roots(compiled: CompiledGraph, roots: list[int], env: EnvConfig, forests: np.ndarray,
              mode: str = "tpg", workers: int = 1) -> BatchResult:
    """Every root in ``roots`` on every forest, in parallel chunks."""
    n, m = len(roots), forests.shape[0]
    res = BatchResult(np.zeros((n, m)), np.zeros((n, m)), np.zeros((n, m)),
                      np.zeros((n, m), dtype=np.int64), np.zeros((n, m), dtype=np.int64))
    idx = np.array([compiled.index[r] for r in roots], dtype=np.int64)
    params = env.kernel_params()
    dirs = beam_directions(env.lidar_n_beams)
    mode_code = MODE_TPG if mode == "tpg" else MODE_PPO
    arrays = compiled.arrays()

    def work(lo, hi):
        run_batch(idx[lo:hi], forests, params, dirs, mode_code, *arrays,
                  res.totals[lo:hi], res.finals[lo:hi], res.ys[lo:hi], res.terminals[lo:hi], res.steps[lo:hi])

    workers = max(1, min(resolve_workers(workers), n))
    if workers == 1:
        work(0, n)
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, bounds[:-1], bounds[1:]))
    return res


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    avg_distance: float
    accuracy: float
    scores: list[float]
    terminals: list[int]
    champion_id: int
    config_digest: str
    scenario_seed_base: int

    @property
    def n_scenarios(self) -> int:
        return len(self.scores)

    @classmethod
    def from_outcomes(cls, ys, terms, champion_id, config_digest, base) -> EvalReport:
        scores = [float(y) for y in ys]
        terms = [int(t) for t in terms]
        goals = sum(t == GOAL_REACHED for t in terms)
        return cls(
            avg_distance=math.fsum(scores) / len(scores),
            accuracy=100.0 * goals / len(scores),
            scores=scores, terminals=terms, champion_id=champion_id,
            config_digest=config_digest, scenario_seed_base=base,
        )

    def to_text(self) -> str:
        from .env import Terminal
        buf = io.StringIO()
        buf.write(f"avg_distance\t{self.avg_distance!r}\n")
        buf.write(f"accuracy\t{self.accuracy!r}\n")
        buf.write(f"n_scenarios\t{self.n_scenarios}\n")
        buf.write(f"champion_id\t{self.champion_id}\n")
        buf.write(f"config_digest\t{self.config_digest}\n")
        buf.write(f"scenario_seed_base\t{self.scenario_seed_base}\n")
        buf.write("\nscenario\tscore\tterminal\n")
        for i, (s, t) in enumerate(zip(self.scores, self.terminals)):
            buf.write(f"{i}\t{s!r}\t{Terminal(t).label}\n")
        return buf.getvalue()

    def summary(self) -> str:
        return (f"avg distance {self.avg_distance:.2f} m, accuracy {self.accuracy:.2f}% "
                f"over {self.n_scenarios} scenarios")


def scenario_seeds(base: int, n: int) -> list[int]:
    return [child_seed(base, i) for i in range(n)]


def eval_seed_base(master_seed: int) -> int:
    return child_seed(master_seed, "eval-scenarios")


def evaluate(champion: TpgGraph, config: ExperimentConfig, scenario_seed_base: int | None = None,
             root: int | None = None, workers: int | None = None) -> EvalReport:
    """Greedy evaluation of one root over ``eval_scenarios`` seeded scenarios."""
    env = config.env
    if champion.n_actions != env.n_actions or champion.n_inputs != env.lidar_n_beams:
        raise ConfigError(
            f"graph expects {champion.n_inputs} beams / {champion.n_actions} actions, "
            f"config has {env.lidar_n_beams} / {env.n_actions}")
    problems = validate(champion)
    if problems:
        raise ValueError("champion graph is invalid: " + "; ".join(problems))
    if root is None:
        roots = champion.roots
        if len(roots) != 1:
            raise ValueError(f"champion graph has {len(roots)} roots; pass root=")
        root = roots[0]
    if scenario_seed_base is None:
        scenario_seed_base = eval_seed_base(config.master_seed)
    seeds = scenario_seeds(scenario_seed_base, config.trainer.eval_scenarios)
    forests = forests_for(env, seeds)
    if workers is None:
        workers = config.trainer.workers
    res = run_roots(CompiledGraph(champion), [root], env, forests, "tpg", workers)
    return EvalReport.from_outcomes(res.ys[0], res.terminals[0], root, config.digest(),
                                    scenario_seed_base)


def evaluate_policy(policy, config: ExperimentConfig, scenario_seed_base: int) -> EvalReport:
    """Evaluate an arbitrary ``policy(observation) -> action id`` callable."""
    env = DroneForestEnv(config.env)
    ys, terms = [], []
    for s in scenario_seeds(scenario_seed_base, config.trainer.eval_scenarios):
        obs = env.reset(s)
        while True:
            res = env.step(policy(obs))
            obs = res.observation
            if res.terminal:
                break
        ys.append(res.y_uav)
        terms.append(int(res.terminal))
    return EvalReport.from_outcomes(ys, terms, -1, config.digest(), scenario_seed_base)


def random_policy(n_actions: int, seed: int):
    rng = make_rng(seed, "random-policy")
    return lambda obs: int(rng.integers(n_actions))


# ---------------------------------------------------------------------------
# training

GENERATION_LOG_COLUMNS = ("generation", "best_fitness", "median_fitness", "worst_fitness",
                          "n_teams", "n_programs")


@dataclass
class GenerationStats:
    generation: int
    best: float
    median: float
    worst: float
    n_teams: int
    n_programs: int
    wall_time: float = 0.0


@dataclass
class TrainResult:
    champion: TpgGraph
    champion_id: int
    generations: list[GenerationStats]
    best_so_far: list[float]
    selection_report: EvalReport
    graph: TpgGraph

    def generation_log(self) -> str:
        lines = ["\t".join(GENERATION_LOG_COLUMNS)]
        for g in self.generations:
            lines.append(f"{g.generation}\t{g.best!r}\t{g.median!r}\t{g.worst!r}\t"
                         f"{g.n_teams}\t{g.n_programs}")
        return "\n".join(lines) + "\n"

    def timing_log(self) -> str:
        lines = ["generation\twall_time_s"]
        lines += [f"{g.generation}\t{g.wall_time:.3f}" for g in self.generations]
        return "\n".join(lines) + "\n"


def episode_fitness(res: BatchResult, mode: str, max_steps: int) -> np.ndarray:
    """Per-episode fitness under one of ``FITNESS_MODES``.

    ``sum``: rewards summed over the steps actually taken. ``horizon``: summed
    over a fixed ``max_steps`` horizon on which the terminal state absorbs,
    i.e. the terminal reward repeats for every step left after the episode
    ends. ``final``: the reward of the terminal step alone. ``distance``: the
    final y, i.e. the evaluation score.
    """
    if mode == "sum":
        return res.totals
    if mode == "horizon":
        return res.totals + res.finals * (max_steps - res.steps)
    if mode == "distance":
        return res.ys
    return res.finals


def root_fitness(res: BatchResult, roots: list[int], mode: str,
                 max_steps: int) -> list[RootFitness]:
    per_episode = episode_fitness(res, mode, max_steps)
    means = per_episode.mean(axis=1)
    return [RootFitness(r, float(f)) for r, f in zip(roots, means)]


def train(config: ExperimentConfig, progress=None) -> TrainResult:
    """Evolve a population and return the champion with its generation log.

    ``progress`` is an optional callable receiving each :class:`GenerationStats`.
    """
    env, evo, ts = config.env, config.evo, config.trainer
    master = ts.master_seed
    graph = init_population(evo, env.n_actions, env.lidar_n_beams, child_seed(master, "init"))
    stats: list[GenerationStats] = []
    best_so_far: list[float] = []
    # snapshot of every root that set a new training-fitness record
    records: dict[int, TpgGraph] = {}
    for g in range(ts.n_generations):
        t0 = time.perf_counter()
        seeds = [child_seed(master, "episodes", g, i) for i in range(evo.episodes_per_evaluation)]
        forests = forests_for(env, seeds)
        roots = graph.roots
        res = run_roots(CompiledGraph(graph), roots, env, forests, ts.reward_mode, ts.workers)
        fitness = root_fitness(res, roots, ts.fitness, env.max_steps)
        values = [f.fitness for f in fitness]
        leader = rank_roots(fitness)[0]
        if not best_so_far or leader.fitness > best_so_far[-1]:
            records[leader.root] = graph.subgraph(leader.root)
        if g + 1 < ts.n_generations:
            next_generation(graph, fitness, evo, child_seed(master, "mutation", g))
        row = GenerationStats(g, max(values), statistics.median(values), min(values),
                              len(graph.teams), graph.program_count(), time.perf_counter() - t0)
        stats.append(row)
        best_so_far.append(max(values) if not best_so_far else max(best_so_far[-1], max(values)))
        log.info("generation %d: best %.3f median %.3f worst %.3f (%d teams, %.1fs)",
                 g, row.best, row.median, row.worst, row.n_teams, row.wall_time)
        if progress is not None:
            progress(row)

    champion, selection = select_champion(graph, config, records)
    return TrainResult(champion, selection.champion_id, stats, best_so_far, selection, graph)


def select_champion(graph: TpgGraph, config: ExperimentConfig,
                    records: dict[int, TpgGraph] | None = None) -> tuple[TpgGraph, EvalReport]:
    """Candidate with the best (accuracy, avg distance) on the selection scenarios.

    Candidates are the roots of ``graph`` plus the ``records`` snapshots
    (root id -> subgraph) of earlier generations. Ties keep the first.
    """
    base = child_seed(config.master_seed, "champion-selection")
    seeds = scenario_seeds(base, config.trainer.eval_scenarios)
    forests = forests_for(config.env, seeds)
    workers = config.trainer.workers
    roots = graph.roots
    pools = [(graph, roots)]
    pools += [(sub, [r]) for r, sub in sorted((records or {}).items()) if r not in roots]
    best = None
    for g, rs in pools:
        res = run_roots(CompiledGraph(g), rs, config.env, forests, "tpg", workers)
        for k, r in enumerate(rs):
            rep = EvalReport.from_outcomes(res.ys[k], res.terminals[k], r, config.digest(), base)
            key = (rep.accuracy, rep.avg_distance)
            if best is None or key > best[0]:
                best = (key, g, rep)
    _, g, rep = best
    return g.subgraph(rep.champion_id), rep


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class SweepRow:
    point: dict
    report: EvalReport | None
    error: str | None = None
    best: bool = False


def grid_points(grid: dict[str, list]) -> list[dict]:
    keys = sorted(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def sweep(base: ExperimentConfig, grid: dict[str, list], progress=None) -> list[SweepRow]:
    """Train and evaluate one experiment per grid point.

    Rows come back sorted by accuracy, then average distance (best first);
    failed points sort last and carry their error message.
    """
    evo_fields = {f.name for f in dataclasses.fields(EvolutionParams)}
    for key in grid:
        if key not in evo_fields:
            raise ConfigError(f"sweep key {key!r} is not an evolution parameter")
    rows = []
    for p, point in enumerate(grid_points(grid)):
        seed = child_seed(base.master_seed, "sweep-point", p)
        try:
            cfg = dataclasses.replace(
                base, evo=dataclasses.replace(base.evo, **point),
                trainer=dataclasses.replace(base.trainer, master_seed=seed))
            result = train(cfg)
            report = evaluate(result.champion, cfg)
            rows.append(SweepRow(point, report))
        except Exception as exc:  # noqa: BLE001 - per-point failures are recorded
            log.warning("sweep point %s failed: %s", point, exc)
            rows.append(SweepRow(point, None, f"{type(exc).__name__}: {exc}"))
        if progress is not None:
            progress(rows[-1])
    rows.sort(key=lambda r: (r.report is None,
                             -(r.report.accuracy if r.report else 0.0),
                             -(r.report.avg_distance if r.report else 0.0)))
    if rows and rows[0].report is not None:
        rows[0].best = True
    return rows


def sweep_table(rows: list[SweepRow], keys: list[str]) -> tuple[str, str]:
    """(human-readable table, tab-separated table)."""
    header = list(keys) + ["avg_distance_m", "accuracy_pct", "status"]
    tsv = ["\t".join(header)]
    human = []
    for r in rows:
        vals = [cfgtext.format_value(r.point[k]) for k in keys]
        if r.report is not None:
            vals += [f"{r.report.avg_distance:.2f}", f"{r.report.accuracy:.2f}",
                     "best" if r.best else "ok"]
        else:
            vals += ["", "", "error: " + (r.error or "")]
        tsv.append("\t".join(vals))
        human.append(vals)
    widths = [max(len(h), *(len(v[i]) for v in human)) if human else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    for vals in human:
        mark = "*" if vals[-1] == "best" else " "
        lines.append("  ".join(v.rjust(w) for v, w in zip(vals, widths)) + f" {mark}")
    return "\n".join(lines) + "\n", "\n".join(tsv) + "\n"


# ---------------------------------------------------------------------------
# recorded rollouts

def rollout(champion: TpgGraph, config: ExperimentConfig, seed: int,
            root: int | None = None) -> Trajectory:
    """One greedy episode on scenario ``seed`` through the stepping API.

    Follows the same kernels as :func:`evaluate`, so the final y equals the
    corresponding per-scenario score.
    """
    if root is None:
        root = champion.roots[0]
    policy = CompiledGraph(champion)
    scratch = policy.scratch()
    env = DroneForestEnv(config.env, config.trainer.reward_mode)
    obs = env.reset(seed)
    while not env.done:
        obs = env.step(policy.act(root, obs, scratch)).observation
    return env.trajectory

"""Generational evolution of a TPG population.

One generation: rank the root teams by fitness, drop the worst share of them
(and anything no longer reachable), then refill the root population with
mutated clones of randomly chosen survivors. A clone's new or re-targeted
edges may point at pre-existing teams, which is how surviving roots turn into
internal vertices and the graph deepens over time.

Hyperparameter names follow the usual GEGELATI spelling (``pEdgeAddition``,
``nbRoots``...) so experiment configs can use them verbatim.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import config as cfgtext
from .errors import ConfigError
from .rng import make_rng
from .tpg import N_CONSTANTS, N_OPCODES, N_REGISTERS, Edge, Program, TpgGraph


@dataclass(frozen=True)
class EvolutionParams:
    # program mutation
    maxConstValue: float = 50.0
    maxProgramSize: int = 96
    minConstValue: float = -20.0
    pAdd: float = 0.5
    pConstantMutation: float = 0.5
    pDelete: float = 0.5
    pMutate: float = 0.7
    pSwap: float = 0.7
    # graph mutation
    maxInitOutEdges: int = 3
    maxOutEdges: int = 5
    nbRoots: int = 288
    pEdgeAddition: float = 0.7
    pEdgeDeletion: float = 0.7
    pEdgeDestChange: float = 0.1
    pEdgeDestIsAction: float = 0.5
    pProgramMutation: float = 0.2
    # not part of the hyperparameter table
    ratio_deleted_roots: float = 0.5
    episodes_per_evaluation: int = 10

    def __post_init__(self):
        problems = []
        for name in ("pAdd", "pConstantMutation", "pDelete", "pMutate", "pSwap",
                     "pEdgeAddition", "pEdgeDeletion", "pEdgeDestChange",
                     "pEdgeDestIsAction", "pProgramMutation"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must be a probability")
        if not self.minConstValue < self.maxConstValue:
            problems.append("need minConstValue < maxConstValue")
        if self.maxProgramSize < 1:
            problems.append("maxProgramSize must be >= 1")
        if not 1 <= self.maxInitOutEdges <= self.maxOutEdges:
            problems.append("need 1 <= maxInitOutEdges <= maxOutEdges")
        if self.maxOutEdges < 2:
            problems.append("maxOutEdges must be >= 2")
        if self.nbRoots < 2:
            problems.append("nbRoots must be >= 2")
        if not 0.0 < self.ratio_deleted_roots < 1.0:
            problems.append("ratio_deleted_roots must be in (0, 1)")
        if self.episodes_per_evaluation < 1:
            problems.append("episodes_per_evaluation must be >= 1")
        if problems:
            raise ConfigError("invalid EvolutionParams: " + "; ".join(problems))

    def to_text(self) -> str:
        return cfgtext.dump_flat(self)

    @property
    def n_deleted(self) -> int:
        return math.floor(self.ratio_deleted_roots * self.nbRoots)


@dataclass(frozen=True)
class RootFitness:
    root: int
    fitness: float


# ---------------------------------------------------------------------------
# random material

def random_operand(rng: np.random.Generator, n_inputs: int) -> tuple[int, int]:
    src = int(rng.integers(3))
    size = (N_REGISTERS, n_inputs, N_CONSTANTS)[src]
    return src, int(rng.integers(size))


def random_instruction(rng: np.random.Generator, n_inputs: int) -> list[int]:
    op = int(rng.integers(N_OPCODES))
    dest = int(rng.integers(N_REGISTERS))
    sa, ia = random_operand(rng, n_inputs)
    sb, ib = random_operand(rng, n_inputs)
    return [op, dest, sa, ia, sb, ib]


def random_program(rng: np.random.Generator, params: EvolutionParams, n_inputs: int) -> Program:
    length = int(rng.integers(1, params.maxProgramSize + 1))
    code = np.empty((length, 6), dtype=np.int64)
    code[:, 0] = rng.integers(N_OPCODES, size=length)
    code[:, 1] = rng.integers(N_REGISTERS, size=length)
    src = rng.integers(3, size=(length, 2))
    code[:, [2, 4]] = src
    code[:, [3, 5]] = rng.integers(0, np.array([N_REGISTERS, n_inputs, N_CONSTANTS])[src])
    consts = rng.uniform(params.minConstValue, params.maxConstValue, N_CONSTANTS)
    return Program(code, consts)


def random_destination(rng: np.random.Generator, params: EvolutionParams, n_actions: int,
                       candidates: list[int]) -> tuple[bool, int]:
    """``(to_action, dest)`` for a new or re-targeted edge."""
    if not candidates or rng.random() < params.pEdgeDestIsAction:
        return True, int(rng.integers(n_actions))
    return False, int(candidates[rng.integers(len(candidates))])


# ---------------------------------------------------------------------------
# operators

def init_population(params: EvolutionParams, n_actions: int, n_inputs: int,
                    seed: int) -> TpgGraph:
    if n_actions < 2:
        raise ValueError("need at least two actions")
    rng = make_rng(seed, "init")
    graph = TpgGraph(n_actions, n_inputs)
    k_max = min(max(2, params.maxInitOutEdges), params.maxOutEdges)
    for _ in range(params.nbRoots):
        k = int(rng.integers(2, k_max + 1))
        actions = rng.integers(n_actions, size=k)
        while len(set(actions.tolist())) < 2:
            actions = rng.integers(n_actions, size=k)
        edges = [Edge(random_program(rng, params, n_inputs), True, int(a)) for a in actions]
        graph.add_team(edges)
    return graph


def mutate_program(program: Program, params: EvolutionParams, n_inputs: int,
                   rng: np.random.Generator) -> Program:
    """Mutated copy of ``program``; never identical to the input."""
    rows = program.code.tolist()
    consts = program.constants.copy()
    while True:
        if rng.random() < params.pAdd and len(rows) < params.maxProgramSize:
            rows.insert(int(rng.integers(len(rows) + 1)), random_instruction(rng, n_inputs))
        if rng.random() < params.pDelete and len(rows) > 1:
            del rows[int(rng.integers(len(rows)))]
        if rng.random() < params.pSwap and len(rows) >= 2:
            i, j = rng.choice(len(rows), size=2, replace=False)
            rows[i], rows[j] = rows[j], rows[i]
        if rng.random() < params.pMutate:
            row = rows[int(rng.integers(len(rows)))]
            part = int(rng.integers(4))
            if part == 0:
                row[0] = int(rng.integers(N_OPCODES))
            elif part == 1:
                row[1] = int(rng.integers(N_REGISTERS))
            elif part == 2:
                row[2], row[3] = random_operand(rng, n_inputs)
            else:
                row[4], row[5] = random_operand(rng, n_inputs)
        if rng.random() < params.pConstantMutation:
            consts[int(rng.integers(N_CONSTANTS))] = rng.uniform(params.minConstValue,
                                                                 params.maxConstValue)
        out = Program(np.array(rows, dtype=np.int64).reshape(-1, 6), consts)
        if out != program:
            return out
        consts = consts.copy()


def clone_and_mutate(graph: TpgGraph, survivor: int, params: EvolutionParams,
                     rng: np.random.Generator, candidates: list[int] | None = None) -> int:
    """Add a mutated copy of team ``survivor`` as a new root; return its id.

    ``candidates`` are the teams new edges may point at (default: every team
    currently in the graph). The new team itself is never a candidate.
    """
    if candidates is None:
        candidates = sorted(graph.teams)
    n_actions = graph.n_actions
    edges = [Edge(e.program.copy(), e.to_action, e.dest) for e in graph.teams[survivor].edges]
    n_action_edges = sum(e.to_action for e in edges)
    changed = False
    while not changed:
        if rng.random() < params.pEdgeDeletion and len(edges) > 2:
            eligible = [k for k, e in enumerate(edges) if not (e.to_action and n_action_edges == 1)]
            k = eligible[int(rng.integers(len(eligible)))]
            n_action_edges -= edges[k].to_action
            del edges[k]
            changed = True
        if rng.random() < params.pEdgeAddition and len(edges) < params.maxOutEdges:
            to_action, dest = random_destination(rng, params, n_actions, candidates)
            edges.append(Edge(random_program(rng, params, graph.n_inputs), to_action, dest))
            n_action_edges += to_action
            changed = True
        for e in edges:
            if rng.random() < params.pEdgeDestChange:
                to_action, dest = random_destination(rng, params, n_actions, candidates)
                if e.to_action and not to_action and n_action_edges == 1:
                    continue
                if (to_action, dest) != (e.to_action, e.dest):
                    n_action_edges += int(to_action) - int(e.to_action)
                    e.to_action, e.dest = to_action, dest
                    changed = True
        for e in edges:
            if rng.random() < params.pProgramMutation:
                e.program = mutate_program(e.program, params, graph.n_inputs, rng)
                changed = True
    return graph.add_team(edges)


def rank_roots(fitness: list[RootFitness]) -> list[RootFitness]:
    """Best first; equal fitness ordered by lower team id."""
    return sorted(fitness, key=lambda f: (-f.fitness, f.root))


def select_survivors(graph: TpgGraph, fitness: list[RootFitness],
                     params: EvolutionParams) -> list[int]:
    """Delete the worst roots and every team left unreachable; return survivors."""
    roots = set(graph.roots)
    if {f.root for f in fitness} != roots or len(fitness) != len(roots):
        raise ValueError("fitness must cover each current root exactly once")
    for f in fitness:
        if not math.isfinite(f.fitness):
            raise ValueError(f"non-finite fitness for root {f.root}")
    ranked = rank_roots(fitness)
    n_delete = min(params.n_deleted, len(ranked) - 1)
    survivors = [f.root for f in ranked[:len(ranked) - n_delete]]
    keep = graph.reachable_from(survivors)
    for tid in list(graph.teams):
        if tid not in keep:
            del graph.teams[tid]
    return sorted(survivors)


def next_generation(graph: TpgGraph, fitness: list[RootFitness], params: EvolutionParams,
                    seed: int) -> TpgGraph:
    """Selection plus refill, applied to ``graph`` in place (also returned)."""
    rng = make_rng(seed, "mutation")
    survivors = select_survivors(graph, fitness, params)
    candidates = sorted(graph.teams)
    roots = set(survivors)
    while len(roots) < params.nbRoots:
        parent = survivors[int(rng.integers(len(survivors)))]
        new = clone_and_mutate(graph, parent, params, rng, candidates)
        roots.add(new)
        for e in graph.teams[new].edges:
            if not e.to_action:
                roots.discard(e.dest)
    return graph

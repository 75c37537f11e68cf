"""Tangled program graph model and execution.

Programs are linear register-machine code. Each instruction row is
``(opcode, dest, a_source, a_index, b_source, b_index)`` where a source is a
register, an observation entry, or one of the program's constants. Registers
start at zero on every execution and the bid is register 0.

A graph is a set of teams; each team owns an ordered list of edges, and each
edge carries a program and points at another team or an action leaf.
Traversal starts at a root team and repeatedly follows the highest-bidding
edge whose destination team has not been visited yet, until an action edge
wins. Every team keeps at least one action edge, so an eligible edge always
exists.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit

N_REGISTERS = 8
N_CONSTANTS = 8
PROTECT_EPS = 1e-9
EXP_CLAMP = 64.0
REGISTER_LIMIT = 1e100


class Opcode(enum.IntEnum):
    ADD = 0
    SUB = 1
    MUL = 2
    DIV = 3  # protected
    EXP = 4  # protected
    LN = 5  # protected
    COS = 6
    MIN = 7
    MAX = 8
    NEG = 9

    @property
    def unary(self) -> bool:
        return self in _UNARY


_UNARY = frozenset({Opcode.EXP, Opcode.LN, Opcode.COS, Opcode.NEG})
N_OPCODES = len(Opcode)


class Source(enum.IntEnum):
    REGISTER = 0
    OBSERVATION = 1
    CONSTANT = 2


class OperandRef(NamedTuple):
    source: Source
    index: int


class Instruction(NamedTuple):
    opcode: Opcode
    dest: int
    a: OperandRef
    b: OperandRef = OperandRef(Source.REGISTER, 0)

    def row(self) -> tuple[int, ...]:
        return (int(self.opcode), self.dest, int(self.a.source), self.a.index,
                int(self.b.source), self.b.index)


@dataclass(eq=False)
class Program:
    code: np.ndarray  # (n, 6) int64
    constants: np.ndarray  # (N_CONSTANTS,) float64

    @classmethod
    def from_instructions(cls, instructions, constants=None) -> Program:
        code = np.array([ins.row() for ins in instructions], dtype=np.int64).reshape(-1, 6)
        if constants is None:
            constants = np.zeros(N_CONSTANTS)
        consts = np.zeros(N_CONSTANTS)
        consts[:len(constants)] = constants
        return cls(code, consts)

    @property
    def instructions(self) -> list[Instruction]:
        return [Instruction(Opcode(op), d, OperandRef(Source(sa), ia), OperandRef(Source(sb), ib))
                for op, d, sa, ia, sb, ib in self.code.tolist()]

    def __len__(self) -> int:
        return self.code.shape[0]

    def copy(self) -> Program:
        return Program(self.code.copy(), self.constants.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Program):
            return NotImplemented
        return (np.array_equal(self.code, other.code)
                and np.array_equal(self.constants, other.constants))

    def problems(self, n_inputs: int) -> list[str]:
        out = []
        code = self.code
        if code.ndim != 2 or code.shape[1] != 6:
            return ["malformed code array"]
        if len(code) == 0:
            out.append("empty program")
        if self.constants.shape != (N_CONSTANTS,):
            out.append(f"expected {N_CONSTANTS} constants")
        elif not np.all(np.isfinite(self.constants)):
            out.append("non-finite constant")
        limits = np.array([N_REGISTERS, n_inputs, N_CONSTANTS])
        if len(code) and code.min() >= 0 and code[:, 0].max() < N_OPCODES \
                and code[:, 1].max() < N_REGISTERS and code[:, [2, 4]].max() <= 2 \
                and np.all(code[:, [3, 5]] < limits[code[:, [2, 4]]]):
            return out  # fast path: every instruction is well formed
        op, dest, sa, ia, sb, ib = code.T
        for k in np.flatnonzero((op < 0) | (op >= N_OPCODES)).tolist():
            out.append(f"instruction {k}: bad opcode {op[k]}")
        for k in np.flatnonzero((dest < 0) | (dest >= N_REGISTERS)).tolist():
            out.append(f"instruction {k}: bad destination register {dest[k]}")
        limits = np.array([N_REGISTERS, n_inputs, N_CONSTANTS])
        for name, src, idx in (("a", sa, ia), ("b", sb, ib)):
            bad_src = (src < 0) | (src > 2)
            lim = limits[np.where(bad_src, 0, src)]
            for k in np.flatnonzero(bad_src | (idx < 0) | (idx >= lim)).tolist():
                if bad_src[k]:
                    out.append(f"instruction {k}: bad operand {name} source {src[k]}")
                else:
                    out.append(f"instruction {k}: operand {name} index {idx[k]} out of range")
        return out


@dataclass(eq=False)
class Edge:
    program: Program
    to_action: bool
    dest: int  # action id or team id

    def same_destination(self, other: Edge) -> bool:
        return self.to_action == other.to_action and self.dest == other.dest


@dataclass
class Team:
    id: int
    edges: list[Edge] = field(default_factory=list)

    def action_edge_count(self) -> int:
        return sum(1 for e in self.edges if e.to_action)


@dataclass
class TpgGraph:
    n_actions: int
    n_inputs: int
    teams: dict[int, Team] = field(default_factory=dict)
    next_id: int = 0

    def add_team(self, edges: list[Edge]) -> int:
        tid = self.next_id
        self.next_id += 1
        self.teams[tid] = Team(tid, edges)
        return tid

    def in_degree(self) -> dict[int, int]:
        deg = {tid: 0 for tid in self.teams}
        for team in self.teams.values():
            for e in team.edges:
                if not e.to_action and e.dest in deg:
                    deg[e.dest] += 1
        return deg

    @property
    def roots(self) -> list[int]:
        return sorted(tid for tid, d in self.in_degree().items() if d == 0)

    def reachable_from(self, roots) -> set[int]:
        seen = set()
        stack = list(roots)
        while stack:
            tid = stack.pop()
            if tid in seen or tid not in self.teams:
                continue
            seen.add(tid)
            stack.extend(e.dest for e in self.teams[tid].edges if not e.to_action)
        return seen

    def subgraph(self, root: int) -> TpgGraph:
        """Standalone copy holding ``root`` and every team reachable from it."""
        keep = self.reachable_from([root])
        g = TpgGraph(self.n_actions, self.n_inputs, next_id=self.next_id)
        for tid in sorted(keep):
            g.teams[tid] = Team(tid, [Edge(e.program.copy(), e.to_action, e.dest)
                                      for e in self.teams[tid].edges])
        return g

    def program_count(self) -> int:
        return sum(len(t.edges) for t in self.teams.values())


def validate(graph: TpgGraph, params=None, teams=None) -> list[str]:
    """Every structural violation in ``graph``; an empty list means valid.

    With ``params`` (an ``EvolutionParams``) the evolution bounds are checked
    too: program length, out-degree and constant range. ``teams`` limits the
    per-team checks to the given ids, for incremental checking after an edit.
    """
    out = []
    checked = []  # (team id, edge position, program)
    for tid in sorted(graph.teams if teams is None else teams):
        team = graph.teams[tid]
        if team.id != tid:
            out.append(f"team {tid}: id field is {team.id}")
        n = len(team.edges)
        if n < 1:
            out.append(f"team {tid}: no out-edges")
        if params is not None and n > params.maxOutEdges:
            out.append(f"team {tid}: {n} out-edges exceeds maxOutEdges={params.maxOutEdges}")
        if n and team.action_edge_count() == 0:
            out.append(f"team {tid}: no action edge")
        for k, e in enumerate(team.edges):
            if e.to_action:
                if not 0 <= e.dest < graph.n_actions:
                    out.append(f"team {tid} edge {k}: action {e.dest} out of range")
            elif e.dest == tid:
                out.append(f"team {tid} edge {k}: self-loop")
            elif e.dest not in graph.teams:
                out.append(f"team {tid} edge {k}: dangling destination team {e.dest}")
            checked.append((tid, k, e.program))
    if checked and not _programs_ok([p for *_, p in checked], graph.n_inputs, params):
        for tid, k, prog in checked:
            where = f"team {tid} edge {k}"
            out.extend(f"{where}: {p}" for p in prog.problems(graph.n_inputs))
            if params is not None:
                if len(prog) > params.maxProgramSize:
                    out.append(f"{where}: program length {len(prog)} exceeds "
                               f"maxProgramSize={params.maxProgramSize}")
                c = prog.constants
                if np.any(c < params.minConstValue) or np.any(c > params.maxConstValue):
                    out.append(f"{where}: constant outside [{params.minConstValue}, "
                               f"{params.maxConstValue}]")
    if graph.teams and graph.next_id <= max(graph.teams):
        out.append("next_id collides with an existing team id")
    return out


def _programs_ok(programs: list[Program], n_inputs: int, params) -> bool:
    """Batch check of every program at once; False means "look closer"."""
    try:
        code = np.concatenate([p.code for p in programs])
        consts = np.stack([p.constants for p in programs])
    except ValueError:
        return False
    if code.ndim != 2 or code.shape[1] != 6 or consts.shape[1] != N_CONSTANTS:
        return False
    if min(len(p.code) for p in programs) < 1 or not np.all(np.isfinite(consts)):
        return False
    if params is not None:
        if max(len(p.code) for p in programs) > params.maxProgramSize:
            return False
        if consts.min() < params.minConstValue or consts.max() > params.maxConstValue:
            return False
    if code.min() < 0 or code[:, 0].max() >= N_OPCODES or code[:, 1].max() >= N_REGISTERS \
            or code[:, [2, 4]].max() > 2:
        return False
    limits = np.array([N_REGISTERS, n_inputs, N_CONSTANTS])
    return bool(np.all(code[:, [3, 5]] < limits[code[:, [2, 4]]]))


# ---------------------------------------------------------------------------
# execution kernels

# Compiled programs address one flat "bank" per execution:
# registers at [0, 8), constants at [8, 16), observation from 16 on.
BANK_CONST = N_REGISTERS
BANK_OBS = N_REGISTERS + N_CONSTANTS
_BANK_OFFSET = np.array([0, BANK_OBS, BANK_CONST], dtype=np.int64)  # by Source


_UNARY_CODES = np.zeros(N_OPCODES, dtype=bool)
_UNARY_CODES[[int(op) for op in _UNARY]] = True


def effective_rows(code: np.ndarray) -> np.ndarray:
    """Mask of the instructions that can influence register 0 at the end.

    The others (introns) only write registers that are overwritten or never
    read afterwards, so dropping them leaves the bid bit-for-bit unchanged.
    """
    rows = np.asarray(code).tolist()
    keep = np.zeros(len(rows), dtype=bool)
    live = {0}
    for k in range(len(rows) - 1, -1, -1):
        op, dest, sa, ia, sb, ib = rows[k]
        if dest not in live:
            continue
        keep[k] = True
        live.discard(dest)
        if sa == Source.REGISTER:
            live.add(ia)
        if sb == Source.REGISTER and not _UNARY_CODES[op]:
            live.add(ib)
    return keep


def flat_code(code: np.ndarray) -> np.ndarray:
    """``(op, dest, a_bank_index, b_bank_index)`` rows for the kernels."""
    code = np.asarray(code, dtype=np.int64).reshape(-1, 6)
    out = np.empty((len(code), 4), dtype=np.int64)
    out[:, 0] = code[:, 0]
    out[:, 1] = code[:, 1]
    out[:, 2] = _BANK_OFFSET[code[:, 2]] + code[:, 3]
    out[:, 3] = _BANK_OFFSET[code[:, 4]] + code[:, 5]
    return out


@njit(cache=True, nogil=True)
def run_span(code, start, stop, consts, row, bank):
    """Execute flat ``code[start:stop]`` with constants ``consts[row]``.

    ``bank[BANK_OBS:]`` must already hold the observation. Returns the bid.
    """
    for k in range(N_REGISTERS):
        bank[k] = 0.0
    for k in range(N_CONSTANTS):
        bank[BANK_CONST + k] = consts[row, k]
    for k in range(start, stop):
        op = code[k, 0]
        a = bank[code[k, 2]]
        b = bank[code[k, 3]]
        if op == 0:
            res = a + b
        elif op == 1:
            res = a - b
        elif op == 2:
            res = a * b
        elif op == 3:
            res = a if abs(b) < PROTECT_EPS else a / b
        elif op == 4:
            res = math.exp(min(max(a, -EXP_CLAMP), EXP_CLAMP))
        elif op == 5:
            res = math.log(max(abs(a), PROTECT_EPS))
        elif op == 6:
            res = math.cos(a)
        elif op == 7:
            res = b if b < a else a
        elif op == 8:
            res = b if b > a else a
        else:
            res = -a
        if res != res:
            res = 0.0
        elif res > REGISTER_LIMIT:
            res = REGISTER_LIMIT
        elif res < -REGISTER_LIMIT:
            res = -REGISTER_LIMIT
        bank[code[k, 1]] = res
    return bank[0]


@njit(cache=True, nogil=True)
def traverse_kernel(root, obs, team_start, edge_dest, prog_start, code, consts,
                    bank, visited, path_edges):
    """Greedy-bid walk on a compiled graph.

    ``edge_dest`` holds a compiled team index (>= 0) or ``-(action + 1)``.
    Winning edge indices are written to ``path_edges``; returns
    ``(action, path_length)``.
    """
    for k in range(obs.shape[0]):
        bank[BANK_OBS + k] = obs[k]
    visited[:] = False
    t = root
    visited[t] = True
    n = 0
    while True:
        best_e = -1
        best = 0.0
        for e in range(team_start[t], team_start[t + 1]):
            dest = edge_dest[e]
            if dest >= 0 and visited[dest]:
                continue
            bid = run_span(code, prog_start[e], prog_start[e + 1], consts, e, bank)
            if best_e < 0 or bid > best:
                best = bid
                best_e = e
        path_edges[n] = best_e
        n += 1
        dest = edge_dest[best_e]
        if dest < 0:
            return -dest - 1, n
        visited[dest] = True
        t = dest


class CompiledGraph:
    """Flat-array snapshot of a graph for the jitted traversal.

    The snapshot does not follow later mutations of the source graph.
    """

    def __init__(self, graph: TpgGraph):
        self.team_ids = sorted(graph.teams)
        self.index = {tid: i for i, tid in enumerate(self.team_ids)}
        starts = [0]
        dests, pstarts, codes, consts = [], [0], [], []
        self.edge_refs = []  # (team id, position in team) per compiled edge
        for tid in self.team_ids:
            for k, e in enumerate(graph.teams[tid].edges):
                dests.append(-(e.dest + 1) if e.to_action else self.index[e.dest])
                live = e.program.code[effective_rows(e.program.code)]
                codes.append(live)
                pstarts.append(pstarts[-1] + len(live))
                consts.append(e.program.constants)
                self.edge_refs.append((tid, k))
            starts.append(len(dests))
        self.team_start = np.array(starts, dtype=np.int64)
        self.edge_dest = np.array(dests, dtype=np.int64)
        self.prog_start = np.array(pstarts, dtype=np.int64)
        self.code = flat_code(np.concatenate(codes) if codes else np.zeros((0, 6)))
        self.consts = np.array(consts, dtype=np.float64).reshape(-1, N_CONSTANTS)
        self.n_teams = len(self.team_ids)
        self.n_inputs = graph.n_inputs

    def arrays(self):
        return self.team_start, self.edge_dest, self.prog_start, self.code, self.consts

    def scratch(self):
        return (np.zeros(BANK_OBS + self.n_inputs), np.zeros(max(self.n_teams, 1), dtype=np.bool_),
                np.zeros(max(self.n_teams, 1), dtype=np.int64))

    def act(self, root: int, observation: np.ndarray, scratch=None) -> int:
        bank, visited, path = scratch or self.scratch()
        action, _ = traverse_kernel(self.index[root], np.asarray(observation, dtype=np.float64),
                                    *self.arrays(), bank, visited, path)
        return int(action)

    def trace(self, root: int, observation: np.ndarray) -> tuple[int, list[tuple[int, int]]]:
        """Action plus the winning ``(team id, edge position)`` at each hop."""
        bank, visited, path = self.scratch()
        action, n = traverse_kernel(self.index[root], np.asarray(observation, dtype=np.float64),
                                    *self.arrays(), bank, visited, path)
        return int(action), [self.edge_refs[e] for e in path[:n]]


def execute_program(program: Program, observation) -> float:
    obs = np.asarray(observation, dtype=np.float64)
    bank = np.zeros(BANK_OBS + len(obs))
    bank[BANK_OBS:] = obs
    return float(run_span(flat_code(program.code), 0, len(program),
                          program.constants.reshape(1, -1), 0, bank))


def traverse(graph: TpgGraph, root: int, observation) -> int:
    return CompiledGraph(graph).act(root, observation)


def traverse_path(graph: TpgGraph, root: int, observation) -> tuple[int, list[tuple[int, int]]]:
    return CompiledGraph(graph).trace(root, observation)

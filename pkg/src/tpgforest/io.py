"""Graph files, DOT export and trajectory pictures.

Graph file grammar (UTF-8, one record per line, single spaces)::

    tpgforest-graph 1 n_actions=<int> n_inputs=<int> next_id=<int>
    team <id> <n_edges>
    edge <position> action <action id> <n_instructions>
    edge <position> team <team id> <n_instructions>
    const <c0> ... <c7>
    ins <opcode> <dest> <a_source> <a_index> <b_source> <b_index>
    ...
    roots <id> <id> ...
    end

Teams appear in increasing id order, each followed by its edges in position
order; each edge is followed by its constants line and its instructions.
Constants are written with ``repr`` so they round-trip exactly. The ``roots``
line must equal the set of in-degree-0 teams.
"""

from __future__ import annotations

import io as _io

import numpy as np

from .env import Action, EnvConfig, Terminal, Trajectory, forest_digest
from .errors import MismatchError, ParseError, ValidationError
from .tpg import N_CONSTANTS, Edge, Program, Team, TpgGraph, validate

FORMAT_VERSION = 1
MAGIC = "tpgforest-graph"


def save_graph(graph: TpgGraph) -> bytes:
    problems = validate(graph)
    if problems:
        raise ValidationError(problems)
    out = [f"{MAGIC} {FORMAT_VERSION} n_actions={graph.n_actions} "
           f"n_inputs={graph.n_inputs} next_id={graph.next_id}"]
    for tid in sorted(graph.teams):
        team = graph.teams[tid]
        out.append(f"team {tid} {len(team.edges)}")
        for k, e in enumerate(team.edges):
            kind = "action" if e.to_action else "team"
            out.append(f"edge {k} {kind} {e.dest} {len(e.program)}")
            out.append("const " + " ".join(repr(float(c)) for c in e.program.constants))
            for row in e.program.code.tolist():
                out.append("ins " + " ".join(str(v) for v in row))
    out.append(" ".join(["roots"] + [str(r) for r in graph.roots]))
    out.append("end")
    return ("\n".join(out) + "\n").encode("utf-8")


class _Lines:
    def __init__(self, text: str):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0

    def next(self, keyword: str) -> list[str]:
        if self.pos >= len(self.lines):
            raise ParseError(f"unexpected end of file, expected {keyword!r}", self.pos + 1)
        parts = self.lines[self.pos].split(" ")
        self.pos += 1
        if parts[0] != keyword:
            raise ParseError(f"expected {keyword!r}, found {parts[0]!r}", self.pos)
        return parts[1:]

    def ints(self, fields: list[str], n: int) -> list[int]:
        if len(fields) != n:
            raise ParseError(f"expected {n} fields, found {len(fields)}", self.pos)
        try:
            return [int(f) for f in fields]
        except ValueError:
            raise ParseError("expected integers", self.pos) from None


def _header_value(field: str, name: str, lineno: int) -> int:
    key, _, value = field.partition("=")
    if key != name:
        raise ParseError(f"expected {name}=<int>", lineno)
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"bad value for {name}", lineno) from None


def load_graph(data: bytes) -> TpgGraph:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise ParseError("not UTF-8") from None
    lines = _Lines(text)
    head = lines.next(MAGIC)
    if len(head) != 4:
        raise ParseError("malformed header", 1)
    if head[0] != str(FORMAT_VERSION):
        raise ParseError(f"unsupported format version {head[0]!r}", 1)
    graph = TpgGraph(_header_value(head[1], "n_actions", 1), _header_value(head[2], "n_inputs", 1))
    next_id = _header_value(head[3], "next_id", 1)

    while lines.pos < len(lines.lines) and lines.lines[lines.pos].startswith("team "):
        tid, n_edges = lines.ints(lines.next("team"), 2)
        if tid in graph.teams:
            raise ParseError(f"duplicate team {tid}", lines.pos)
        if graph.teams and tid < max(graph.teams):
            raise ParseError("teams out of order", lines.pos)
        edges = []
        for k in range(n_edges):
            fields = lines.next("edge")
            if len(fields) != 4 or fields[1] not in ("action", "team"):
                raise ParseError("malformed edge line", lines.pos)
            pos, dest, n_ins = lines.ints([fields[0], fields[2], fields[3]], 3)
            if pos != k:
                raise ParseError(f"edge position {pos}, expected {k}", lines.pos)
            consts = lines.next("const")
            if len(consts) != N_CONSTANTS:
                raise ParseError(f"expected {N_CONSTANTS} constants", lines.pos)
            try:
                cvals = np.array([float(c) for c in consts])
            except ValueError:
                raise ParseError("bad constant", lines.pos) from None
            code = np.array([lines.ints(lines.next("ins"), 6) for _ in range(n_ins)],
                            dtype=np.int64).reshape(-1, 6)
            edges.append(Edge(Program(code, cvals), fields[1] == "action", dest))
        graph.teams[tid] = Team(tid, edges)
    fields = lines.next("roots")
    declared = lines.ints(fields, len(fields))
    lines.next("end")
    if lines.pos != len(lines.lines):
        raise ParseError("trailing content after 'end'", lines.pos + 1)
    graph.next_id = next_id

    problems = validate(graph)
    if not problems and declared != graph.roots:
        problems.append(f"declared roots {declared} differ from in-degree-0 teams {graph.roots}")
    if problems:
        raise ValidationError(problems)
    return graph


# ---------------------------------------------------------------------------
# DOT

def _action_label(action_id: int, n_actions: int, config: EnvConfig | None) -> str:
    n_levels = config.n_speed_levels if config else n_actions // 4
    v_max = config.v_max if config else EnvConfig().v_max
    if n_levels * 4 != n_actions:
        return f"action {action_id}"
    return Action.from_id(action_id, n_levels).describe(v_max, n_levels)


def export_dot(graph: TpgGraph, highlight: list[tuple[int, int]] | None = None,
               config: EnvConfig | None = None, name: str = "tpg") -> str:
    """Graphviz text for ``graph``.

    ``highlight`` is a traversal trace, the ``(team id, edge position)`` list
    returned by :func:`tpgforest.tpg.traverse_path`; its teams and edges are
    drawn in red.
    """
    highlight = highlight or []
    hot_teams = {tid for tid, _ in highlight}
    hot_edges = set(highlight)
    roots = set(graph.roots)
    out = [f'digraph "{name}" {{', "  rankdir=TB;"]
    for tid in sorted(graph.teams):
        attrs = [f'label="T{tid}"', "shape=ellipse"]
        if tid in roots:
            attrs.append("peripheries=2")
        if tid in hot_teams:
            attrs += ["color=red", "penwidth=2"]
        out.append(f"  T{tid} [{', '.join(attrs)}];")
    actions = sorted({e.dest for t in graph.teams.values() for e in t.edges if e.to_action})
    hot_actions = set()
    for tid, k in highlight:
        e = graph.teams[tid].edges[k]
        if e.to_action:
            hot_actions.add(e.dest)
    for a in actions:
        attrs = [f'label="{_action_label(a, graph.n_actions, config)}"', "shape=box"]
        if a in hot_actions:
            attrs += ["color=red", "penwidth=2"]
        out.append(f"  A{a} [{', '.join(attrs)}];")
    for tid in sorted(graph.teams):
        for k, e in enumerate(graph.teams[tid].edges):
            dest = f"A{e.dest}" if e.to_action else f"T{e.dest}"
            attrs = [f'label="{len(e.program)}"']
            if (tid, k) in hot_edges:
                attrs += ["color=red", "penwidth=2"]
            out.append(f"  T{tid} -> {dest} [{', '.join(attrs)}];")
    out.append("}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# rendering

def render_trajectory(trajectory: Trajectory, forest: np.ndarray, config: EnvConfig,
                      dpi: int = 100, size: tuple[float, float] = (5.0, 6.0)) -> bytes:
    """Top-down PNG of one episode over its initial forest."""
    if trajectory.config_digest != config.digest():
        raise MismatchError("trajectory was recorded under a different config")
    if forest_digest(forest) != trajectory.forest_digest:
        raise MismatchError("trajectory was recorded on a different forest")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.collections import LineCollection
    from matplotlib.patches import Circle as CirclePatch

    fig, ax = plt.subplots(figsize=size, dpi=dpi)
    try:
        for cx, cy, r, vx, lo, hi in forest.tolist():
            moving = vx != 0.0
            ax.add_patch(CirclePatch((cx, cy), r, color="tab:orange" if moving else "tab:green",
                                     alpha=0.8, lw=0))
            if moving:
                ax.plot([lo, hi], [cy, cy], color="tab:orange", lw=0.6, alpha=0.6)
                ax.plot([lo, lo], [cy - 0.15, cy + 0.15], color="tab:orange", lw=0.6)
                ax.plot([hi, hi], [cy - 0.15, cy + 0.15], color="tab:orange", lw=0.6)
        ax.axvline(config.x_min, color="k", lw=1)
        ax.axvline(config.x_max, color="k", lw=1)
        ax.axhline(config.y_goal, color="tab:blue", lw=1, ls="--")

        xs = [0.0] + [r.x for r in trajectory.records]
        ys = [0.0] + [r.y for r in trajectory.records]
        pts = np.column_stack([xs, ys])
        if len(pts) > 1:
            segs = np.stack([pts[:-1], pts[1:]], axis=1)
            lc = LineCollection(segs, cmap="viridis", lw=1.5)
            lc.set_array(np.arange(len(segs), dtype=float))
            ax.add_collection(lc)
        term = trajectory.terminal
        if term == Terminal.GOAL_REACHED:
            ax.plot(xs[-1], ys[-1], marker="*", color="gold", ms=14, mec="k")
        elif term in (Terminal.COLLISION, Terminal.OUT_OF_BOUNDS):
            ax.plot(xs[-1], ys[-1], marker="X", color="red", ms=10, mec="k")
        elif term == Terminal.TIMEOUT:
            ax.plot(xs[-1], ys[-1], marker="s", color="grey", ms=8, mec="k")

        ax.set_xlim(config.x_min - 0.5, config.x_max + 0.5)
        ax.set_ylim(min(-0.5, min(ys) - 0.5), max(config.y_goal + 1.0, max(ys) + 0.5))
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_title(f"seed {trajectory.seed}: {term.label}, y = {ys[-1]:.2f} m")
        buf = _io.BytesIO()
        fig.savefig(buf, format="png", metadata={"Software": None})
    finally:
        plt.close(fig)
    return buf.getvalue()


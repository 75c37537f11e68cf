import io
from pathlib import Path

import numpy as np
import pydot
import pytest
from matplotlib.image import imread

from tpgforest.env import Action, Direction, DroneForestEnv, EnvConfig, Terminal
from tpgforest.errors import MismatchError, ParseError, ValidationError
from tpgforest.evo import EvolutionParams, init_population
from tpgforest.io import export_dot, load_graph, render_trajectory, save_graph
from tpgforest.tpg import CompiledGraph, Edge, Opcode, Source, traverse_path

from graphs import random_graph, random_observation, random_program

GOLDEN = Path(__file__).parent / "data" / "golden.tpg"


def test_golden_file_loads_and_round_trips():
    data = GOLDEN.read_bytes()
    g = load_graph(data)
    assert (g.n_actions, g.n_inputs, g.next_id) == (40, 36, 3)
    assert sorted(g.teams) == [0, 2] and g.roots == [2]
    e = g.teams[0].edges[1]
    assert e.to_action and e.dest == 21
    assert e.program.instructions[0].opcode == Opcode.EXP
    assert e.program.instructions[0].a == (Source.OBSERVATION, 35)
    assert e.program.constants[2] == 0.1 + 0.2
    assert not g.teams[2].edges[0].to_action
    assert save_graph(g) == data


def test_random_graphs_round_trip():
    rng = np.random.default_rng(31)
    for _ in range(200):
        g = random_graph(rng)
        data = save_graph(g)
        h = load_graph(data)
        assert save_graph(h) == data
        a, b = CompiledGraph(g), CompiledGraph(h)
        for _ in range(10):
            obs = random_observation(rng, g.n_inputs)
            for root in g.teams:
                assert a.trace(root, obs) == b.trace(root, obs)


def test_distinct_graphs_serialize_differently():
    rng = np.random.default_rng(32)
    g = random_graph(rng)
    data = save_graph(g)
    g.teams[min(g.teams)].edges[0].program.constants[0] += 1e-12
    assert save_graph(g) != data


@pytest.mark.parametrize("cut", [0, 10, 60, 200, -5])
def test_truncated_file_raises_parse_error(cut):
    data = GOLDEN.read_bytes()
    with pytest.raises(ParseError):
        load_graph(data[:cut])


@pytest.mark.parametrize("old, new, fragment", [
    ("tpgforest-graph 1", "tpgforest-graph 2", "version"),
    ("ins 9 0 1 0 0 0", "ins 9 0 1 zero 0 0", "integers"),
    ("const -3.25", "const x", "bad constant"),
    ("edge 2 action 0 1", "edge 3 action 0 1", "position"),
])
def test_malformed_lines_report_location(old, new, fragment):
    text = GOLDEN.read_text().replace(old, new)
    with pytest.raises(ParseError, match=fragment) as info:
        load_graph(text.encode())
    assert info.value.line is not None


def test_invalid_graph_rejected_on_load():
    text = GOLDEN.read_text().replace("edge 0 team 0 1", "edge 0 team 7 1")
    with pytest.raises(ValidationError, match="dangling"):
        load_graph(text.encode())
    text = GOLDEN.read_text().replace("roots 2", "roots 0 2")
    with pytest.raises(ValidationError, match="declared roots"):
        load_graph(text.encode())


def test_dot_structure_for_small_population():
    g = init_population(EvolutionParams(nbRoots=3), 40, 36, 2)
    dot = export_dot(g)
    parsed = pydot.graph_from_dot_data(dot)[0]
    nodes = [n for n in parsed.get_nodes() if n.get_name() not in ("node", "edge", "graph")]
    ellipses = [n for n in nodes if n.get("shape") == "ellipse"]
    boxes = [n for n in nodes if n.get("shape") == "box"]
    edges = parsed.get_edges()
    assert len(ellipses) == 3
    assert len(edges) <= 9
    assert len(boxes) == len({e.dest for t in g.teams.values() for e in t.edges}) <= 9
    assert all("@" in n.get("label") and "m/s" in n.get("label") for n in boxes)


def test_dot_highlight_matches_trace():
    rng = np.random.default_rng(33)
    for _ in range(50):
        g = random_graph(rng, n_actions=40)
        root = min(g.teams)
        action, path = traverse_path(g, root, random_observation(rng, g.n_inputs))
        parsed = pydot.graph_from_dot_data(export_dot(g, highlight=path))[0]
        red_nodes = {n.get_name() for n in parsed.get_nodes() if n.get("color") == "red"}
        assert red_nodes == {f"T{t}" for t, _ in path} | {f"A{action}"}
        red_edges = [(e.get_source(), e.get_destination()) for e in parsed.get_edges()
                     if e.get("color") == "red"]
        expected = []
        for t, k in path:
            e = g.teams[t].edges[k]
            expected.append((f"T{t}", f"A{e.dest}" if e.to_action else f"T{e.dest}"))
        assert sorted(red_edges) == sorted(expected)


def test_dot_parses_for_fuzzed_graphs():
    rng = np.random.default_rng(34)
    for _ in range(100):
        g = random_graph(rng, n_actions=40)
        parsed = pydot.graph_from_dot_data(export_dot(g, config=EnvConfig()))
        assert parsed and len(parsed[0].get_edges()) == g.program_count()


def test_action_labels_are_human_readable():
    g = load_graph(GOLDEN.read_bytes())
    dot = export_dot(g)
    assert Action(Direction.FORWARD, 1).describe(1.0, 10) in dot
    assert 'label="right @ 1 m/s"' in dot


def run_episode(config, seed, action):
    env = DroneForestEnv(config)
    env.reset(seed)
    while not env.done:
        env.step(action)
    return env


def png_shape(data):
    return imread(io.BytesIO(data), format="png").shape


def test_render_goal_episode():
    cfg = EnvConfig(n_trees=0)
    env = run_episode(cfg, 0, Action(Direction.FORWARD, 10))
    assert env.trajectory.terminal == Terminal.GOAL_REACHED
    png = render_trajectory(env.trajectory, env.initial_forest, cfg, dpi=50, size=(4, 5))
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    assert png_shape(png)[:2] == (250, 200)
    assert png == render_trajectory(env.trajectory, env.initial_forest, cfg, dpi=50, size=(4, 5))


def test_render_collision_and_distinct_seeds():
    cfg = EnvConfig()
    pngs = []
    for seed in (1, 2):
        env = run_episode(cfg, seed, Action(Direction.FORWARD, 10))
        traj = env.trajectory
        if traj.terminal == Terminal.COLLISION:
            last = traj.records[-1]
            f = env.forest
            gap = np.hypot(f[:, 0] - last.x, f[:, 1] - last.y) - f[:, 2]
            assert gap.min() <= np.hypot(cfg.drone_half_width, cfg.drone_half_height)
        pngs.append(render_trajectory(traj, env.initial_forest, cfg, dpi=40))
    assert pngs[0] != pngs[1]


def test_render_rejects_mismatched_forest():
    cfg = EnvConfig()
    env = run_episode(cfg, 1, Action(Direction.FORWARD, 10))
    other = DroneForestEnv(cfg)
    other.reset(2)
    with pytest.raises(MismatchError):
        render_trajectory(env.trajectory, other.initial_forest, cfg)
    with pytest.raises(MismatchError):
        render_trajectory(env.trajectory, env.initial_forest, EnvConfig(v_max=2.0))

"""Random graph and program generators shared by several test modules."""

import numpy as np

from tpgforest.tpg import N_CONSTANTS, N_OPCODES, N_REGISTERS, Edge, Program, TpgGraph


def random_code(rng, length, n_inputs):
    code = np.empty((length, 6), dtype=np.int64)
    code[:, 0] = rng.integers(N_OPCODES, size=length)
    code[:, 1] = rng.integers(N_REGISTERS, size=length)
    for col in (2, 4):
        src = rng.integers(3, size=length)
        code[:, col] = src
        code[:, col + 1] = [rng.integers((N_REGISTERS, n_inputs, N_CONSTANTS)[s]) for s in src]
    return code


def random_program(rng, n_inputs, max_len=12, lo=-20.0, hi=50.0):
    length = int(rng.integers(1, max_len + 1))
    return Program(random_code(rng, length, n_inputs), rng.uniform(lo, hi, N_CONSTANTS))


def random_graph(rng, max_teams=6, n_inputs=6, n_actions=5, max_edges=5):
    """Valid graph with arbitrary (possibly cyclic) team-to-team edges."""
    n_teams = int(rng.integers(1, max_teams + 1))
    g = TpgGraph(n_actions, n_inputs)
    ids = [g.add_team([]) for _ in range(n_teams)]
    for tid in ids:
        k = int(rng.integers(1, max_edges + 1))
        edges = [Edge(random_program(rng, n_inputs), True, int(rng.integers(n_actions)))]
        others = [t for t in ids if t != tid]
        for _ in range(k - 1):
            if others and rng.random() < 0.6:
                edges.append(Edge(random_program(rng, n_inputs), False,
                                  int(others[rng.integers(len(others))])))
            else:
                edges.append(Edge(random_program(rng, n_inputs), True,
                                  int(rng.integers(n_actions))))
        order = rng.permutation(len(edges))
        g.teams[tid].edges = [edges[i] for i in order]
    return g


def random_observation(rng, n_inputs):
    obs = rng.uniform(0.0, 3.0, n_inputs)
    obs[rng.random(n_inputs) < 0.1] = 3.0
    return obs

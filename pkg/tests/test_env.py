import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpgforest.env import (
    COLLISION, GOAL_REACHED, MODE_PPO, MODE_TPG, RUNNING, TIMEOUT, Action, Direction,
    DroneForestEnv, EnvConfig, Terminal, Trajectory, beam_directions, evaluation_score,
    forest_array, generate_forest, replay, scan_kernel, training_reward, v_ppo, v_tpg,
)
from tpgforest.errors import ConfigError, EpisodeFinished, MismatchError, PlacementInfeasible

from oracles import march_scan

EMPTY = EnvConfig(n_trees=0)


def fwd(level=10, n_levels=10):
    return Action(Direction.FORWARD, level).id(n_levels)


# --- reward functions -------------------------------------------------------

@pytest.mark.parametrize("y, goal, expected", [(0.0, 22.0, -22.0), (22.0, 22.0, 0.0),
                                                (10.5, 22.0, -11.5)])
def test_v_tpg(y, goal, expected):
    assert v_tpg(y, goal) == expected


@pytest.mark.parametrize("yk, yk1, expected", [(1.2, 1.0, 1.2 - 1.0), (1.0, 1.2, 2 * (1.0 - 1.2)),
                                                (1.0, 1.0, 0.0)])
def test_v_ppo(yk, yk1, expected):
    assert v_ppo(yk, yk1) == expected


def test_v_ppo_rounded_examples():
    assert v_ppo(1.2, 1.0) == pytest.approx(0.2)
    assert v_ppo(1.0, 1.2) == pytest.approx(-0.4)


def test_training_reward_branches():
    assert training_reward(COLLISION, 7.3, 7.2, 22.0, MODE_TPG) == -25.0
    assert training_reward(GOAL_REACHED, 22.04, 21.95, 22.0, MODE_PPO) == 100.0
    assert training_reward(RUNNING, 5.0, 4.9, 22.0, MODE_TPG) == -17.0
    assert training_reward(TIMEOUT, 5.0, 4.9, 22.0, MODE_TPG) == -17.0
    assert training_reward(RUNNING, 1.0, 1.2, 22.0, MODE_PPO) == 2 * (1.0 - 1.2)


# --- actions and config -----------------------------------------------------

def test_action_encoding_covers_forty_ids():
    ids = {Action(d, lvl).id(10) for d in Direction for lvl in range(1, 11)}
    assert ids == set(range(40))
    for a in range(40):
        assert Action.from_id(a, 10).id(10) == a
    assert Action(Direction.LEFT, 3).target_speed(1.0, 10) == pytest.approx(0.3)
    assert Action.from_id(23, 10).describe(1.0, 10) == "backward @ 0.4 m/s"


def test_config_text_round_trip_and_unknown_key():
    cfg = EnvConfig(n_trees=100, dynamic_fraction=0.5)
    assert EnvConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError, match="unknown key"):
        EnvConfig.from_text("n_trees = 3\nbogus = 1\n")
    with pytest.raises(ConfigError):
        EnvConfig.from_text("n_trees = many\n")
    with pytest.raises(ConfigError):
        EnvConfig(y_spawn_max=30.0)


# --- forest generation ------------------------------------------------------

def test_forest_deterministic_per_seed():
    cfg = EnvConfig()
    a = forest_array(cfg, 1)
    assert a.tobytes() == forest_array(cfg, 1).tobytes()
    assert a.tobytes() != forest_array(cfg, 2).tobytes()
    assert generate_forest(cfg, 1) == generate_forest(cfg, 1)


@pytest.mark.parametrize("seed", range(5))
def test_forest_respects_placement_rules(seed):
    cfg = EnvConfig(n_trees=100)
    f = forest_array(cfg, seed)
    assert len(f) == 100
    assert np.all((f[:, 0] >= cfg.x_min) & (f[:, 0] <= cfg.x_max))
    assert np.all((f[:, 1] >= cfg.y_spawn_min) & (f[:, 1] <= cfg.y_spawn_max))
    assert np.all((f[:, 2] >= cfg.tree_radius_min) & (f[:, 2] <= cfg.tree_radius_max))
    assert np.all(np.hypot(f[:, 0], f[:, 1]) - f[:, 2] >= cfg.min_spare_distance)
    d = np.hypot(f[:, None, 0] - f[None, :, 0], f[:, None, 1] - f[None, :, 1])
    gaps = d - f[:, None, 2] - f[None, :, 2]
    np.fill_diagonal(gaps, np.inf)
    assert gaps.min() >= cfg.min_spare_distance
    assert np.all(f[:, 3] == 0.0)


def test_dynamic_fraction_splits_forest():
    cfg = EnvConfig(dynamic_fraction=0.5)
    f = forest_array(cfg, 3)
    mid = (cfg.y_spawn_min + cfg.y_spawn_max) / 2
    top, bottom = f[f[:, 1] >= mid], f[f[:, 1] < mid]
    assert np.all(bottom[:, 3] == 0.0)
    assert np.all(top[:, 3] != 0.0)
    assert np.all(np.abs(top[:, 3]) <= cfg.dynamic_speed_max)
    np.testing.assert_allclose(top[:, 4], cfg.x_min + top[:, 2])
    np.testing.assert_allclose(top[:, 5], cfg.x_max - top[:, 2])
    assert np.all((top[:, 4] <= top[:, 0]) & (top[:, 0] <= top[:, 5]))


def test_too_dense_forest_is_infeasible():
    cfg = EnvConfig(n_trees=2000)
    with pytest.raises(PlacementInfeasible) as info:
        forest_array(cfg, 4)
    assert info.value.seed == 4


# --- LiDAR ------------------------------------------------------------------

def test_lidar_empty_forest_reads_max_range():
    env = DroneForestEnv(EMPTY)
    obs = env.reset(0)
    assert obs.shape == (36,)
    assert np.all(obs == EMPTY.lidar_range)


def test_lidar_single_tree_ahead():
    env = DroneForestEnv(EMPTY)
    obs = env.reset(0, forest=[[0.0, 2.0, 0.5, 0.0, 0.0, 0.0]])
    assert obs[0] == 1.5
    assert obs[18] == EMPTY.lidar_range  # pointing backwards
    # beam 9 is 90 degrees counterclockwise from +y, i.e. towards -x
    obs = env.reset(0, forest=[[-2.0, 0.0, 0.5, 0.0, -2.0, -2.0]])
    assert obs[9] == pytest.approx(1.5)


def test_lidar_matches_marching_oracle():
    rng = np.random.default_rng(5)
    n_beams, max_range = 12, 3.0
    dirs = beam_directions(n_beams)
    out = np.empty(n_beams)
    for _ in range(1000):
        px, py = rng.uniform(-1, 1, 2)
        trees = []
        while len(trees) < 4:
            r = rng.uniform(0.2, 0.75)
            cx, cy = rng.uniform(-3.5, 3.5, 2)
            if math.hypot(cx - px, cy - py) > r + 0.01:
                trees.append([cx, cy, r, 0.0, cx, cx])
        forest = np.array(trees)
        scan_kernel(px, py, forest, dirs, max_range, out)
        ref = march_scan(px, py, forest, n_beams, max_range)
        np.testing.assert_allclose(out, ref, atol=2e-4, rtol=0)


# --- stepping ---------------------------------------------------------------

def test_collision_step():
    env = DroneForestEnv(EMPTY)
    env.reset(0, forest=[[0.0, 0.4, 0.25, 0.0, 0.0, 0.0]])
    res = env.step(fwd())
    while res.terminal == Terminal.RUNNING:
        res = env.step(fwd())
    assert res.terminal == Terminal.COLLISION
    assert res.reward == -25.0
    with pytest.raises(EpisodeFinished):
        env.step(fwd())


def test_goal_step():
    cfg = EnvConfig(n_trees=0, y_spawn_min=0.1, y_spawn_max=0.2, y_goal=0.5)
    env = DroneForestEnv(cfg)
    env.reset(0)
    rewards = []
    while not env.done:
        res = env.step(fwd())
        rewards.append(res.reward)
    assert res.terminal == Terminal.GOAL_REACHED
    assert res.reward == 100.0
    assert res.y_uav >= cfg.y_goal
    assert rewards[:-1] == [r for r in rewards[:-1] if r < 0]
    assert evaluation_score(env.trajectory) == res.y_uav


def test_running_reward_is_distance_to_goal():
    env = DroneForestEnv(EMPTY)
    env.reset(0)
    res = env.step(fwd())
    assert res.terminal == Terminal.RUNNING
    assert res.reward == res.y_uav - EMPTY.y_goal


def test_ppo_mode_running_reward():
    env = DroneForestEnv(EMPTY, mode="ppo")
    env.reset(0)
    y0 = 0.0
    for _ in range(20):
        res = env.step(fwd())
        assert res.reward == v_ppo(res.y_uav, y0)
        y0 = res.y_uav
    back = Action(Direction.BACKWARD, 10).id(10)
    for _ in range(20):
        res = env.step(back)
        assert res.reward == v_ppo(res.y_uav, y0)
        y0 = res.y_uav
    assert res.reward < 0


def test_leaving_horizontal_bounds_is_penalised():
    env = DroneForestEnv(EMPTY)
    env.reset(0)
    left = Action(Direction.LEFT, 10).id(10)
    while not env.done:
        res = env.step(left)
    assert res.terminal == Terminal.OUT_OF_BOUNDS
    assert res.reward == -25.0
    assert env.drone.position.x - EMPTY.drone_half_width < EMPTY.x_min


def test_timeout():
    cfg = EnvConfig(n_trees=0, max_steps=5)
    env = DroneForestEnv(cfg)
    env.reset(0)
    for _ in range(5):
        res = env.step(Action(Direction.RIGHT, 1))
    assert res.terminal == Terminal.TIMEOUT
    assert res.reward == res.y_uav - cfg.y_goal
    assert env.steps == 5


def test_speed_ramps_up_under_acceleration_limit():
    env = DroneForestEnv(EMPTY)
    env.reset(0)
    for k in range(1, 30):
        env.step(fwd())
        v = env.drone.velocity.norm()
        assert v == pytest.approx(min(k * EMPTY.a_max * EMPTY.dt, EMPTY.v_max))
    assert env.drone.commanded_velocity.y == EMPTY.v_max


def test_reset_is_deterministic():
    env = DroneForestEnv()
    a = env.reset(7)
    forest7 = env.forest
    assert env.drone.velocity.norm() == 0.0
    assert np.array_equal(a, env.reset(7))
    env.reset(8)
    assert not np.array_equal(forest7, env.forest)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 39), min_size=1, max_size=400), st.integers(0, 2**32))
def test_dynamics_bounds_hold(actions, seed):
    cfg = EnvConfig(dynamic_fraction=0.5)
    env = DroneForestEnv(cfg)
    env.reset(seed)
    prev = np.zeros(2)
    for a in actions:
        if env.done:
            break
        env.step(a)
        v = np.array([env.drone.velocity.x, env.drone.velocity.y])
        assert np.hypot(*v) <= cfg.v_max
        assert np.hypot(*(v - prev)) <= cfg.a_max * cfg.dt + 1e-9
        prev = v
        f = env.forest
        assert np.all((f[:, 4] <= f[:, 0]) & (f[:, 0] <= f[:, 5]))
    assert env.steps <= cfg.max_steps


def test_dynamic_trees_move_and_reflect():
    cfg = EnvConfig(n_trees=0, dynamic_fraction=0.5)
    env = DroneForestEnv(cfg)
    tree = [9.0, 15.0, 0.5, 0.3, -9.5, 9.5]
    env.reset(0, forest=[tree])
    right1 = Action(Direction.RIGHT, 1).id(10)
    xs = []
    for _ in range(40):
        env.step(right1)
        xs.append(env.forest[0, 0])
    assert max(xs) <= 9.5
    assert env.forest[0, 3] == -0.3  # reflected once
    assert xs[-1] < xs[20]


def test_trajectory_text_round_trip_and_replay():
    cfg = EnvConfig()
    env = DroneForestEnv(cfg)
    env.reset(3)
    rng = np.random.default_rng(0)
    while not env.done:
        env.step(int(rng.integers(40)))
    text = env.trajectory.to_text()
    traj = Trajectory.from_text(text)
    assert traj == env.trajectory
    assert replay(cfg, traj).to_text() == text
    with pytest.raises(MismatchError):
        replay(EnvConfig(n_trees=10), traj)
    tampered = Trajectory(traj.seed, traj.config_digest, traj.forest_digest, traj.mode,
                          traj.records[:-1] + [traj.records[-1].__class__(
                              *(list(traj.records[-1].__dict__.values())[:2]
                                + [traj.records[-1].y + 1.0]
                                + list(traj.records[-1].__dict__.values())[3:]))])
    with pytest.raises(MismatchError):
        replay(cfg, tampered)


def test_evaluation_score_requires_finished_episode():
    env = DroneForestEnv(EMPTY)
    env.reset(0)
    env.step(fwd())
    with pytest.raises(ValueError):
        evaluation_score(env.trajectory)

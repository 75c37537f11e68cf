"""Drone-forest environment.

A point-particle drone flies in the XY plane from the origin towards the goal
line ``y = y_goal`` through a field of circular trees, seeing the world only
through a ring of LiDAR beams. Trees in the upper part of the forest may move
horizontally, bouncing between fixed bounds at a per-episode constant speed.

The per-step physics, LiDAR and reward live in numba kernels that work on flat
arrays; :class:`DroneForestEnv` wraps them with a reset/step API and a
trajectory log. The training loop calls the same kernels directly.

Forest array layout (one row per tree): ``cx, cy, radius, vx, x_lo, x_hi``.
Drone state layout: ``px, py, vx, vy, cmd_vx, cmd_vy``.
"""

from __future__ import annotations

import enum
import hashlib
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import config as cfgtext
from .errors import ConfigError, EpisodeFinished, MismatchError, ParseError, PlacementInfeasible
from .geom import Circle, Vec2, ray_circle_distance, rect_circle_overlaps
from .rng import make_rng

COLLISION_REWARD = -25.0
GOAL_REWARD = 100.0
MAX_CONSECUTIVE_REJECTIONS = 100_000

# terminal codes shared with the kernels
RUNNING, COLLISION, GOAL_REACHED, OUT_OF_BOUNDS, TIMEOUT = range(5)

MODE_TPG, MODE_PPO = 0, 1

TREE_CX, TREE_CY, TREE_R, TREE_VX, TREE_XLO, TREE_XHI = range(6)
S_PX, S_PY, S_VX, S_VY, S_CVX, S_CVY = range(6)


class Terminal(enum.IntEnum):
    RUNNING = RUNNING
    COLLISION = COLLISION
    GOAL_REACHED = GOAL_REACHED
    OUT_OF_BOUNDS = OUT_OF_BOUNDS
    TIMEOUT = TIMEOUT

    @property
    def label(self) -> str:
        return self.name.lower()


class Direction(enum.IntEnum):
    FORWARD = 0
    LEFT = 1
    BACKWARD = 2
    RIGHT = 3

    @property
    def unit(self) -> tuple[float, float]:
        return _DIRECTION_UNITS[self]


_DIRECTION_UNITS = ((0.0, 1.0), (-1.0, 0.0), (0.0, -1.0), (1.0, 0.0))


@dataclass(frozen=True)
class EnvConfig:
    x_min: float = -10.0
    x_max: float = 10.0
    y_goal: float = 22.0
    y_spawn_min: float = 2.0
    y_spawn_max: float = 20.0
    n_trees: int = 50
    tree_radius_min: float = 0.2
    tree_radius_max: float = 0.75
    min_spare_distance: float = 0.75
    drone_half_width: float = 0.1
    drone_half_height: float = 0.1
    v_max: float = 1.0
    a_max: float = 0.6
    dt: float = 0.1
    max_steps: int = 600
    lidar_n_beams: int = 36
    lidar_range: float = 3.0
    n_speed_levels: int = 10
    dynamic_fraction: float = 0.0
    dynamic_speed_max: float = 0.3

    def __post_init__(self):
        problems = []
        if not self.x_min < 0 < self.x_max:
            problems.append("need x_min < 0 < x_max")
        if not 0 < self.y_spawn_min < self.y_spawn_max < self.y_goal:
            problems.append("need 0 < y_spawn_min < y_spawn_max < y_goal")
        if not 0 < self.tree_radius_min <= self.tree_radius_max:
            problems.append("need 0 < tree_radius_min <= tree_radius_max")
        if 2 * self.tree_radius_max >= self.x_max - self.x_min:
            problems.append("trees wider than the corridor")
        if self.min_spare_distance < 0:
            problems.append("min_spare_distance must be >= 0")
        if self.n_trees < 0:
            problems.append("n_trees must be >= 0")
        if not (self.drone_half_width > 0 and self.drone_half_height > 0):
            problems.append("drone half extents must be positive")
        for name in ("v_max", "a_max", "dt", "lidar_range"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        for name in ("max_steps", "lidar_n_beams", "n_speed_levels"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            problems.append("dynamic_fraction must be in [0, 1]")
        if self.dynamic_speed_max < 0:
            problems.append("dynamic_speed_max must be >= 0")
        if problems:
            raise ConfigError("invalid EnvConfig: " + "; ".join(problems))

    @property
    def n_actions(self) -> int:
        return 4 * self.n_speed_levels

    def to_text(self) -> str:
        return cfgtext.dump_flat(self)

    @classmethod
    def from_text(cls, text: str) -> EnvConfig:
        return cfgtext.update_dataclass(cls(), cfgtext.parse_flat(text), "env")

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def kernel_params(self) -> np.ndarray:
        return np.array([
            self.x_min, self.x_max, self.y_goal, self.drone_half_width,
            self.drone_half_height, self.v_max, self.a_max, self.dt,
            self.lidar_range, float(self.n_speed_levels), float(self.max_steps),
        ])


# kernel_params indices
P_XMIN, P_XMAX, P_YGOAL, P_HW, P_HH, P_VMAX, P_AMAX, P_DT, P_RANGE, P_NLEVELS, P_MAXSTEPS = range(11)


@dataclass(frozen=True)
class Action:
    direction: Direction
    speed_level: int  # 1..n_speed_levels

    def id(self, n_speed_levels: int) -> int:
        if not 1 <= self.speed_level <= n_speed_levels:
            raise ValueError(f"speed level {self.speed_level} out of range")
        return int(self.direction) * n_speed_levels + self.speed_level - 1

    @classmethod
    def from_id(cls, action_id: int, n_speed_levels: int) -> Action:
        if not 0 <= action_id < 4 * n_speed_levels:
            raise ValueError(f"action id {action_id} out of range")
        d, level = divmod(int(action_id), n_speed_levels)
        return cls(Direction(d), level + 1)

    def target_speed(self, v_max: float, n_speed_levels: int) -> float:
        return self.speed_level * v_max / n_speed_levels

    def describe(self, v_max: float, n_speed_levels: int) -> str:
        speed = self.target_speed(v_max, n_speed_levels)
        return f"{self.direction.name.lower()} @ {speed:g} m/s"


@dataclass
class Tree:
    shape: Circle
    vx: float = 0.0
    x_lo: float = -math.inf
    x_hi: float = math.inf

    @property
    def is_static(self) -> bool:
        return self.vx == 0.0


@dataclass(frozen=True)
class DroneState:
    position: Vec2
    velocity: Vec2
    commanded_velocity: Vec2

    @property
    def y_uav(self) -> float:
        return self.position.y


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    terminal: Terminal
    y_uav: float


# ---------------------------------------------------------------------------
# forest generation

def forest_array(config: EnvConfig, seed: int) -> np.ndarray:
    """Rejection-sample a forest; rows follow the module's tree layout."""
    rng = make_rng(seed, "forest")
    c = config
    trees = np.zeros((c.n_trees, 6))
    band = c.y_spawn_max - c.y_spawn_min
    dyn_threshold = c.y_spawn_max - c.dynamic_fraction * band
    placed = 0
    rejections = 0
    while placed < c.n_trees:
        r = rng.uniform(c.tree_radius_min, c.tree_radius_max)
        y = rng.uniform(c.y_spawn_min, c.y_spawn_max)
        dynamic = c.dynamic_fraction > 0 and y >= dyn_threshold
        if dynamic:
            x_lo, x_hi = c.x_min + r, c.x_max - r
        else:
            x_lo, x_hi = c.x_min, c.x_max
        x = rng.uniform(x_lo, x_hi)
        ok = math.hypot(x, y) - r >= c.min_spare_distance
        if ok and placed:
            prev = trees[:placed]
            gaps = np.hypot(prev[:, 0] - x, prev[:, 1] - y) - prev[:, 2] - r
            ok = bool(np.all(gaps >= c.min_spare_distance))
        if not ok:
            rejections += 1
            if rejections >= MAX_CONSECUTIVE_REJECTIONS:
                raise PlacementInfeasible(
                    f"placed {placed}/{c.n_trees} trees before {rejections} consecutive "
                    f"rejections (seed {seed})", seed=seed)
            continue
        rejections = 0
        vx = rng.uniform(-c.dynamic_speed_max, c.dynamic_speed_max) if dynamic else 0.0
        if dynamic:
            trees[placed] = (x, y, r, vx, x_lo, x_hi)
        else:
            trees[placed] = (x, y, r, 0.0, x, x)
        placed += 1
    return trees


def trees_from_array(arr: np.ndarray) -> list[Tree]:
    out = []
    for cx, cy, r, vx, lo, hi in arr.tolist():
        out.append(Tree(Circle(Vec2(cx, cy), r), vx, lo, hi))
    return out


def trees_to_array(trees: list[Tree]) -> np.ndarray:
    arr = np.zeros((len(trees), 6))
    for i, t in enumerate(trees):
        arr[i] = (t.shape.center.x, t.shape.center.y, t.shape.radius, t.vx, t.x_lo, t.x_hi)
    return arr


def generate_forest(config: EnvConfig, seed: int) -> list[Tree]:
    return trees_from_array(forest_array(config, seed))


def forest_digest(arr: np.ndarray) -> str:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return hashlib.sha256(data).hexdigest()[:16]


# ---------------------------------------------------------------------------
# kernels

def beam_directions(n_beams: int) -> np.ndarray:
    """Unit vectors for beam ``i`` at angle ``2*pi*i/n`` counterclockwise from +y."""
    ang = 2.0 * np.pi * np.arange(n_beams) / n_beams
    return np.stack([-np.sin(ang), np.cos(ang)], axis=1)


@njit(cache=True, nogil=True)
def scan_kernel(px, py, trees, dirs, max_range, out):
    out[:] = max_range
    for j in range(trees.shape[0]):
        cx = trees[j, 0]
        cy = trees[j, 1]
        r = trees[j, 2]
        if math.hypot(cx - px, cy - py) - r > max_range:
            continue
        for i in range(dirs.shape[0]):
            t = ray_circle_distance(px, py, dirs[i, 0], dirs[i, 1], cx, cy, r)
            if t < out[i]:
                out[i] = t


@njit(cache=True, nogil=True)
def step_kernel(state, trees, action, params, step_index):
    """Advance drone and trees one tick in place; return the terminal code.

    ``step_index`` is the 1-based index of the step being taken.
    """
    n_levels = int(params[P_NLEVELS])
    d = action // n_levels
    speed = (action % n_levels + 1) * params[P_VMAX] / n_levels
    if d == 0:
        cvx, cvy = 0.0, speed
    elif d == 1:
        cvx, cvy = -speed, 0.0
    elif d == 2:
        cvx, cvy = 0.0, -speed
    else:
        cvx, cvy = speed, 0.0
    state[S_CVX] = cvx
    state[S_CVY] = cvy

    dt = params[P_DT]
    dvx = cvx - state[S_VX]
    dvy = cvy - state[S_VY]
    dv = math.hypot(dvx, dvy)
    dv_max = params[P_AMAX] * dt
    if dv > dv_max:
        k = dv_max / dv
        dvx *= k
        dvy *= k
    vx = state[S_VX] + dvx
    vy = state[S_VY] + dvy
    v = math.hypot(vx, vy)
    if v > params[P_VMAX]:
        k = params[P_VMAX] / v
        vx *= k
        vy *= k
    state[S_VX] = vx
    state[S_VY] = vy
    state[S_PX] += vx * dt
    state[S_PY] += vy * dt

    for j in range(trees.shape[0]):
        tvx = trees[j, TREE_VX]
        if tvx == 0.0:
            continue
        x = trees[j, TREE_CX] + tvx * dt
        lo = trees[j, TREE_XLO]
        hi = trees[j, TREE_XHI]
        if x > hi:
            x = 2.0 * hi - x
            tvx = -tvx
        elif x < lo:
            x = 2.0 * lo - x
            tvx = -tvx
        trees[j, TREE_CX] = min(max(x, lo), hi)
        trees[j, TREE_VX] = tvx

    px = state[S_PX]
    py = state[S_PY]
    hw = params[P_HW]
    hh = params[P_HH]
    for j in range(trees.shape[0]):
        if rect_circle_overlaps(px, py, hw, hh, trees[j, 0], trees[j, 1], trees[j, 2]):
            return COLLISION
    if px - hw < params[P_XMIN] or px + hw > params[P_XMAX]:
        return OUT_OF_BOUNDS
    if py >= params[P_YGOAL]:
        return GOAL_REACHED
    if step_index >= int(params[P_MAXSTEPS]):
        return TIMEOUT
    return RUNNING


@njit(cache=True, nogil=True)
def v_tpg(y_uav, y_goal):
    return y_uav - y_goal


@njit(cache=True, nogil=True)
def v_ppo(y_k, y_k_minus_1):
    delta = y_k - y_k_minus_1
    if y_k >= y_k_minus_1:
        return delta
    return 2.0 * delta


@njit(cache=True, nogil=True)
def training_reward(terminal, y_k, y_k_minus_1, y_goal, mode):
    if terminal == COLLISION or terminal == OUT_OF_BOUNDS:
        return COLLISION_REWARD
    if terminal == GOAL_REACHED:
        return GOAL_REWARD
    if mode == MODE_TPG:
        return v_tpg(y_k, y_goal)
    return v_ppo(y_k, y_k_minus_1)


# ---------------------------------------------------------------------------
# episode API

@dataclass(frozen=True)
class TrajectoryRecord:
    step: int
    x: float
    y: float
    vx: float
    vy: float
    action: int
    reward: float
    terminal: Terminal


TRAJECTORY_COLUMNS = ("step", "x", "y", "vx", "vy", "action", "reward", "terminal")


@dataclass
class Trajectory:
    """Per-step log of one episode, with the provenance needed to replay it."""

    seed: int
    config_digest: str
    forest_digest: str
    mode: str = "tpg"
    records: list[TrajectoryRecord] = field(default_factory=list)

    @property
    def terminal(self) -> Terminal:
        return self.records[-1].terminal if self.records else Terminal.RUNNING

    @property
    def actions(self) -> list[int]:
        return [r.action for r in self.records]

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write("# tpgforest-trajectory 1\n")
        buf.write(f"# seed={self.seed}\n")
        buf.write(f"# config_digest={self.config_digest}\n")
        buf.write(f"# forest_digest={self.forest_digest}\n")
        buf.write(f"# mode={self.mode}\n")
        buf.write("\t".join(TRAJECTORY_COLUMNS) + "\n")
        for r in self.records:
            buf.write(f"{r.step}\t{r.x!r}\t{r.y!r}\t{r.vx!r}\t{r.vy!r}\t{r.action}\t"
                      f"{r.reward!r}\t{r.terminal.label}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> Trajectory:
        lines = text.splitlines()
        if not lines or lines[0].strip() != "# tpgforest-trajectory 1":
            raise ParseError("missing trajectory header", 1)
        meta = {}
        i = 1
        while i < len(lines) and lines[i].startswith("#"):
            key, _, value = lines[i][1:].strip().partition("=")
            meta[key] = value
            i += 1
        for key in ("seed", "config_digest", "forest_digest", "mode"):
            if key not in meta:
                raise ParseError(f"missing header field {key!r}", i)
        if i >= len(lines) or tuple(lines[i].split("\t")) != TRAJECTORY_COLUMNS:
            raise ParseError("bad column header", i + 1)
        by_label = {t.label: t for t in Terminal}
        records = []
        for lineno in range(i + 1, len(lines)):
            parts = lines[lineno].split("\t")
            if len(parts) != len(TRAJECTORY_COLUMNS):
                raise ParseError("wrong column count", lineno + 1)
            try:
                records.append(TrajectoryRecord(
                    int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]),
                    float(parts[4]), int(parts[5]), float(parts[6]), by_label[parts[7]]))
            except (ValueError, KeyError):
                raise ParseError("bad field value", lineno + 1) from None
        return cls(int(meta["seed"]), meta["config_digest"], meta["forest_digest"],
                   meta["mode"], records)


def evaluation_score(trajectory: Trajectory) -> float:
    """Final y coordinate of a finished episode, uncapped."""
    if trajectory.terminal == Terminal.RUNNING:
        raise ValueError("episode has not terminated")
    return trajectory.records[-1].y


class DroneForestEnv:
    """Episodic drone-forest environment with a reset/step interface."""

    def __init__(self, config: EnvConfig | None = None, mode: str = "tpg"):
        if mode not in ("tpg", "ppo"):
            raise ValueError(f"unknown reward mode {mode!r}")
        self.config = config or EnvConfig()
        self.mode = mode
        self._params = self.config.kernel_params()
        self._dirs = beam_directions(self.config.lidar_n_beams)
        self._state = np.zeros(6)
        self._trees = np.zeros((0, 6))
        self._initial = self._trees
        self._obs = np.zeros(self.config.lidar_n_beams)
        self._steps = 0
        self._done = True
        self.trajectory: Trajectory | None = None

    @property
    def n_actions(self) -> int:
        return self.config.n_actions

    @property
    def steps(self) -> int:
        return self._steps

    @property
    def done(self) -> bool:
        return self._done

    @property
    def forest(self) -> np.ndarray:
        return self._trees.copy()

    @property
    def initial_forest(self) -> np.ndarray:
        """Trees as they were at ``reset`` (what the trajectory digest covers)."""
        return self._initial.copy()

    @property
    def trees(self) -> list[Tree]:
        return trees_from_array(self._trees)

    @property
    def drone(self) -> DroneState:
        s = self._state
        return DroneState(Vec2(s[0], s[1]), Vec2(s[2], s[3]), Vec2(s[4], s[5]))

    def _scan(self) -> np.ndarray:
        obs = np.empty(self.config.lidar_n_beams)
        scan_kernel(self._state[0], self._state[1], self._trees, self._dirs,
                    self.config.lidar_range, obs)
        return obs

    def reset(self, seed: int, forest: np.ndarray | None = None) -> np.ndarray:
        """Start an episode on the forest generated from ``seed``.

        ``forest`` replaces the generated trees with an explicit array in the
        module's tree layout (hand-built scenarios).
        """
        if forest is None:
            self._trees = forest_array(self.config, seed)
        else:
            self._trees = np.array(forest, dtype=np.float64).reshape(-1, 6)
        self._initial = self._trees.copy()
        self._state[:] = 0.0
        self._steps = 0
        self._done = False
        self.trajectory = Trajectory(seed, self.config.digest(), forest_digest(self._trees), self.mode)
        self._obs = self._scan()
        return self._obs.copy()

    def step(self, action: Action | int) -> StepResult:
        if self._done:
            raise EpisodeFinished("episode is over; call reset()")
        if isinstance(action, Action):
            action_id = action.id(self.config.n_speed_levels)
        else:
            action_id = int(action)
            if not 0 <= action_id < self.n_actions:
                raise ValueError(f"action id {action_id} out of range")
        y_prev = self._state[S_PY]
        self._steps += 1
        code = step_kernel(self._state, self._trees, action_id, self._params, self._steps)
        y = self._state[S_PY]
        reward = training_reward(code, y, y_prev, self.config.y_goal,
                                 MODE_TPG if self.mode == "tpg" else MODE_PPO)
        terminal = Terminal(code)
        self._done = terminal != Terminal.RUNNING
        self._obs = self._scan()
        s = self._state
        self.trajectory.records.append(TrajectoryRecord(
            self._steps, float(s[0]), float(y), float(s[2]), float(s[3]),
            action_id, float(reward), terminal))
        return StepResult(self._obs.copy(), float(reward), terminal, float(y))


def replay(config: EnvConfig, trajectory: Trajectory) -> Trajectory:
    """Re-run a logged action sequence and return the fresh trajectory.

    Raises :class:`MismatchError` if the log was made under another config or
    forest, or if the replay diverges from the logged records.
    """
    if trajectory.config_digest != config.digest():
        raise MismatchError("trajectory was recorded under a different config")
    env = DroneForestEnv(config, trajectory.mode)
    env.reset(trajectory.seed)
    if env.trajectory.forest_digest != trajectory.forest_digest:
        raise MismatchError("forest digest differs from the logged one")
    for a in trajectory.actions:
        env.step(a)
    if env.trajectory.records != trajectory.records:
        raise MismatchError("replayed trajectory diverges from the log")
    return env.trajectory

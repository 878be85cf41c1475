"""Planar navigation: a noisy double integrator among disc obstacles.

State is ``(p_x, p_y, v_x, v_y)``, control is a 2-D acceleration. The true
system adds Gaussian noise to the (clamped) control; the prediction model
used by the controllers is the same integrator without noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

STATE_DIM = 4
CONTROL_DIM = 2

OUTCOMES = ("success", "collision", "timeout")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlanarParams:
    """Task constants. Values not fixed by the task description are engineering defaults."""

    dt: float = 0.1
    noise: float = 1.0
    u_max: float = 10.0
    bound: float = 10.0          # map is [-bound, bound]^2
    n_obstacles: int = 8
    radius: float = 0.8
    goal_tol: float = 0.5
    clearance: float = 1.0       # free space required around start and goal
    min_start_goal: float = 8.0
    drift: float = 0.1           # std of obstacle steps in the dynamic variant
    max_tries: int = 1000


@dataclass(frozen=True)
class CostWeights:
    goal: float = 1.0
    bound: float = 100.0
    coll: float = 1000.0
    ctrl: float = 1e-4
    terminal: bool = True
    margin: float = 0.0


@dataclass(frozen=True)
class EnvContext:
    obstacles: np.ndarray       # (K, 2)
    radii: np.ndarray           # (K,)
    start: np.ndarray           # (4,)
    goal: np.ndarray            # (2,)
    lower: np.ndarray           # (2,)
    upper: np.ndarray           # (2,)
    dynamic: bool = False
    drift: float = 0.0
    kind: str = "random"
    seed: int = 0

    @property
    def goal_state(self) -> np.ndarray:
        return np.concatenate([self.goal, np.zeros(2)])

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "obstacles": self.obstacles.tolist(),
            "radii": self.radii.tolist(),
            "start": self.start.tolist(),
            "goal": self.goal.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "dynamic": self.dynamic,
            "drift": self.drift,
        }

    @classmethod
    def from_json(cls, d: dict) -> EnvContext:
        arr = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(arr("obstacles").reshape(-1, 2), arr("radii"), arr("start"), arr("goal"),
                   arr("lower"), arr("upper"), bool(d["dynamic"]), float(d["drift"]),
                   d.get("kind", "random"), int(d.get("seed", 0)))


# ---------------------------------------------------------------------------
# dynamics


def _transition(dt):
    A = np.eye(4)
    A[0, 2] = A[1, 3] = dt
    B = np.zeros((4, 2))
    B[2, 0] = B[3, 1] = dt
    return A, B


def double_integrator_step(state, control, dt: float = 0.1, sigma: float = 1.0,
                           rng: np.random.Generator | None = None, u_max: float = 10.0) -> np.ndarray:
    """One step of the true system; noise ``N(0, sigma I)`` is added to the clamped control."""
    u = np.clip(np.asarray(control, dtype=np.float64), -u_max, u_max)
    if sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required when sigma > 0")
        u = u + np.sqrt(sigma) * rng.standard_normal(2)
    A, B = _transition(dt)
    return A @ np.asarray(state, dtype=np.float64) + B @ u


def rollout(x0, controls, dt: float = 0.1, u_max: float = 10.0) -> np.ndarray:
    """Noiseless rollouts. ``controls`` is (..., H, 2); returns states (..., H+1, 4)."""
    u = np.clip(np.asarray(controls, dtype=np.float64), -u_max, u_max)
    # v_{k+1} = v_k + dt u_k;  p_{k+1} = p_k + dt v_k
    v0 = np.asarray(x0[2:], dtype=np.float64)
    p0 = np.asarray(x0[:2], dtype=np.float64)
    vel = v0 + dt * np.cumsum(u, axis=-2)
    vel = np.concatenate([np.broadcast_to(v0, u.shape[:-2] + (1, 2)), vel], axis=-2)
    pos = p0 + dt * np.cumsum(vel[..., :-1, :], axis=-2)
    pos = np.concatenate([np.broadcast_to(p0, u.shape[:-2] + (1, 2)), pos], axis=-2)
    return np.concatenate([pos, vel], axis=-1)


# ---------------------------------------------------------------------------
# costs


def sdf_query(context: EnvContext, point) -> np.ndarray:
    """Signed distance to the union of disc obstacles (negative inside)."""
    p = np.asarray(point, dtype=np.float64)
    if context.obstacles.size == 0:
        return np.full(p.shape[:-1], np.inf)
    d = np.linalg.norm(p[..., None, :] - context.obstacles, axis=-1) - context.radii
    return d.min(axis=-1)


def bound_cost(position, lower, upper) -> np.ndarray:
    p = np.asarray(position, dtype=np.float64)
    over = (p > upper) | (p < lower)
    sq = np.minimum((p - upper) ** 2, (p - lower) ** 2)
    return np.sum(np.where(over, sq, 0.0), axis=-1)


def stage_cost(state, control, context: EnvContext, weights: CostWeights = CostWeights()) -> np.ndarray:
    x = np.asarray(state, dtype=np.float64)
    u = np.asarray(control, dtype=np.float64)
    err = x - context.goal_state
    cost = weights.goal * np.sum(err * err, axis=-1)
    cost = cost + weights.bound * bound_cost(x[..., :2], context.lower, context.upper)
    if context.obstacles.size:
        cost = cost + weights.coll * np.maximum(weights.margin - sdf_query(context, x[..., :2]), 0.0)
    return cost + weights.ctrl * np.sum(u * u, axis=-1)


def terminal_cost(state, context: EnvContext, weights: CostWeights = CostWeights()) -> np.ndarray:
    if not weights.terminal:
        return np.zeros(np.shape(state)[:-1])
    err = np.asarray(state, dtype=np.float64) - context.goal_state
    return weights.goal * np.sum(err * err, axis=-1)


def trajectory_costs(x0, controls, context: EnvContext, weights: CostWeights = CostWeights(),
                     dt: float = 0.1, u_max: float = 10.0) -> np.ndarray:
    """Total predicted cost of each control sequence in ``controls`` (..., H, 2)."""
    states = rollout(x0, controls, dt, u_max)
    u = np.clip(controls, -u_max, u_max)
    run = stage_cost(states[..., :-1, :], u, context, weights).sum(axis=-1)
    return run + terminal_cost(states[..., -1, :], context, weights)


# ---------------------------------------------------------------------------
# generators


def _bounds(params: PlanarParams):
    return np.full(2, -params.bound), np.full(2, params.bound)


def _sample_free(rng, ctx_obs, radii, params, avoid=(), min_dist_to=None):
    lo, hi = _bounds(params)
    lo = lo + params.clearance
    hi = hi - params.clearance
    for _ in range(params.max_tries):
        p = rng.uniform(lo, hi)
        if ctx_obs.size and np.min(np.linalg.norm(ctx_obs - p, axis=1) - radii) < params.clearance:
            continue
        if any(np.linalg.norm(p - q) < params.clearance for q in avoid):
            continue
        if min_dist_to is not None and np.linalg.norm(p - min_dist_to) < params.min_start_goal:
            continue
        return p
    raise GenerationError("could not place a collision-free point")


def grid_obstacles(params: PlanarParams) -> np.ndarray:
    n = params.n_obstacles
    if n == 0:
        return np.zeros((0, 2))
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    span = params.bound * 0.6
    xs = np.linspace(-span, span, cols) if cols > 1 else np.zeros(1)
    ys = np.linspace(-span, span, rows) if rows > 1 else np.zeros(1)
    pts = np.array([(x, y) for y in ys for x in xs])
    return pts[:n]


def generate_env(kind: str, seed: int, params: PlanarParams = PlanarParams()) -> EnvContext:
    """Build an environment of kind ``grid``, ``random`` or ``random-dynamic``."""
    if kind not in ("grid", "random", "random-dynamic"):
        raise ValueError(f"unknown environment kind {kind!r}")
    rng = np.random.default_rng([seed, 7919])
    lo, hi = _bounds(params)
    radii = np.full(params.n_obstacles, params.radius)
    for _ in range(params.max_tries):
        if kind == "grid":
            obs = grid_obstacles(params)
        else:
            margin = params.radius
            obs = rng.uniform(lo + margin, hi - margin, size=(params.n_obstacles, 2))
        try:
            start = _sample_free(rng, obs, radii, params)
            goal = _sample_free(rng, obs, radii, params, avoid=(start,), min_dist_to=start)
        except GenerationError:
            continue
        dynamic = kind == "random-dynamic"
        return EnvContext(obs, radii, np.concatenate([start, np.zeros(2)]), goal, lo, hi,
                          dynamic, params.drift if dynamic else 0.0, kind, int(seed))
    raise GenerationError(f"environment generation failed for seed {seed}")


def obstacle_drift(context: EnvContext, rng: np.random.Generator, robot=None,
                   clearance: float = 1.0) -> EnvContext:
    """Gaussian step per obstacle, clipped to the map; steps that crowd the robot or goal are dropped."""
    if not context.dynamic or context.drift == 0.0 or context.obstacles.size == 0:
        return context
    steps = context.drift * rng.standard_normal(context.obstacles.shape)
    proposal = np.clip(context.obstacles + steps, context.lower, context.upper)
    keep_out = [context.goal] + ([np.asarray(robot)[:2]] if robot is not None else [])
    new = context.obstacles.copy()
    for k in range(len(new)):
        if all(np.linalg.norm(proposal[k] - q) - context.radii[k] >= clearance for q in keep_out):
            new[k] = proposal[k]
    return replace(context, obstacles=new)


def episode_outcome(trajectory, context: EnvContext, goal_tol: float = 0.5,
                    contexts: list[EnvContext] | None = None) -> str:
    """Classify a state trajectory. Collisions take precedence over reaching the goal.

    ``contexts`` gives the obstacle layout at each state for moving obstacles.
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    if contexts is None:
        sd = sdf_query(context, traj[:, :2])
    else:
        sd = np.array([sdf_query(c, s[:2]) for c, s in zip(contexts, traj)])
    if np.any(sd < 0):
        return "collision"
    if np.any(np.linalg.norm(traj[:, :2] - context.goal, axis=1) <= goal_tol):
        return "success"
    return "timeout"


# ---------------------------------------------------------------------------
# environment wrapper used by the controllers


@dataclass
class PlanarNav:
    """Mutable episode wrapper around an :class:`EnvContext`."""

    context: EnvContext
    params: PlanarParams = field(default_factory=PlanarParams)
    weights: CostWeights = field(default_factory=CostWeights)
    seed: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng([self.seed, 104729])
        self.state = self.context.start.copy()

    control_dim = CONTROL_DIM

    @property
    def control_bounds(self):
        return np.full(2, -self.params.u_max), np.full(2, self.params.u_max)

    @property
    def context_dim(self) -> int:
        return 2 * len(self.context.obstacles) + 6

    def flow_context(self, state=None) -> np.ndarray:
        """Conditioning vector: obstacle centres, current state and goal, scaled to O(1)."""
        s = self.state if state is None else np.asarray(state)
        scale = self.params.bound
        return np.concatenate([
            self.context.obstacles.ravel() / scale,
            s[:2] / scale,
            s[2:] / self.params.u_max,
            self.context.goal / scale,
        ])

    def rollout_costs(self, state, controls) -> np.ndarray:
        return trajectory_costs(state, controls, self.context, self.weights, self.params.dt, self.params.u_max)

    def cost(self, state, control) -> float:
        return float(stage_cost(state, control, self.context, self.weights))

    def step(self, control) -> np.ndarray:
        self.state = double_integrator_step(self.state, control, self.params.dt, self.params.noise,
                                            self.rng, self.params.u_max)
        self.context = obstacle_drift(self.context, self.rng, self.state, self.params.clearance)
        return self.state

    def reached_goal(self, state=None) -> bool:
        s = self.state if state is None else state
        return bool(np.linalg.norm(s[:2] - self.context.goal) <= self.params.goal_tol)

    def collided(self, state=None) -> bool:
        s = self.state if state is None else state
        return bool(sdf_query(self.context, s[:2]) < 0)


def params_from_dict(d: dict) -> PlanarParams:
    return PlanarParams(**d)


def dump_envs(contexts: list[EnvContext]) -> str:
    return json.dumps([c.to_json() for c in contexts], indent=1)


def load_envs(text: str) -> list[EnvContext]:
    return [EnvContext.from_json(d) for d in json.loads(text)]


def params_to_dict(p: PlanarParams) -> dict:
    return asdict(p)

"""Episode rollouts, the approximate MPPI backward pass and the training loop.

Per step the controller draws latent samples around the pre-update mean,
pushes them through the flow, weights them by rollout cost and moves the
latent mean. Training differentiates the summed soft-min statistic of every
step with respect to the flow and shift parameters. The sampled controls are
treated as fixed (likelihood-ratio estimator) and the forward-pass weights
are reused verbatim.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .controller import (
    NFMPC,
    FlowMPPI,
    FlowMPPIConfig,
    LatentGaussian,
    NFMPCConfig,
    ShiftModel,
    StepRecord,
)
from .diffnet import AdamState, GradientRecord, ParamVector, adam_step, global_norm
from .envs import CostWeights, PlanarNav, PlanarParams, generate_env
from .flow import FlowConfig, FlowModel, log_likelihood_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# gradient estimators


def loss_gradient(flow: FlowModel, theta: LatentGaussian, controls, weights, context=None,
                  grad: ParamVector | None = None) -> GradientRecord:
    """``-sum_i w_i grad log pi(u_i)`` w.r.t. flow parameters and the latent mean.

    The ``input`` field of the result holds the latent-mean part, to be
    chained through whatever produced the mean.
    """
    rec = log_likelihood_grad(flow, theta, controls, context, coef=-np.asarray(weights))
    if grad is not None:
        grad.values += rec.params.values
        return GradientRecord(grad, rec.input)
    return rec


def approx_delta_mu_grad(weights, latents, latent_jac, scores) -> np.ndarray:
    """Jacobian of the weighted latent mean w.r.t. parameters, samples held fixed.

    Weighted (latent Jacobian + latent * score) minus the outer product of
    the weighted latent and the weighted score.

    ``latents`` (N, D) are pulled samples, ``latent_jac`` (N, D, P) their
    parameter Jacobians and ``scores`` (N, P) the parameter gradients of
    the sample log-likelihoods.
    """
    w = np.asarray(weights, dtype=np.float64)
    z = np.asarray(latents, dtype=np.float64)
    direct = np.einsum("i,idp->dp", w, latent_jac) + np.einsum("i,id,ip->dp", w, z, scores)
    return direct - np.outer(w @ z, w @ np.asarray(scores))


def flow_delta_mu_jacobian(flow: FlowModel, theta: LatentGaussian, controls, weights, context=None):
    """Dense latent-update Jacobian for a flow, columns = flow params then latent mean.

    Builds per-sample Jacobians with one vector-Jacobian product per latent
    coordinate. Only suitable for small flows; used by tests and verify.
    """
    u = np.atleast_2d(controls)
    N, D = u.shape
    var = _var(theta, D)
    ev, cache = flow.pull(u, context, tolerant=True, with_cache=True)
    z = ev.output
    P = len(flow.params)
    jac = np.zeros((N, D, P + D))
    for i in range(N):
        _, ci = flow.pull(u[i:i + 1], context, tolerant=True, with_cache=True)
        for d in range(D):
            e = np.zeros((1, D))
            e[0, d] = 1.0
            jac[i, d, :P] = flow.pull_backward(ci, e, 0.0).params.values
    resid = (z - theta.mean) / var
    scores = np.zeros((N, P + D))
    for i in range(N):
        _, ci = flow.pull(u[i:i + 1], context, tolerant=True, with_cache=True)
        scores[i, :P] = flow.pull_backward(ci, -resid[i:i + 1], 1.0).params.values
        scores[i, P:] = resid[i]
    return approx_delta_mu_grad(weights, z, jac, scores)


def delta_mu_vjp(flow: FlowModel, theta: LatentGaussian, controls, weights, upstream, context=None,
                 loss_coef: float = 0.0, grad: ParamVector | None = None) -> GradientRecord:
    """``upstream`` times the latent-update Jacobian, plus ``loss_coef`` times the loss gradient.

    Never forms the Jacobian. Returns flow-parameter gradients and, in
    ``input``, the adjoint of the pre-update latent mean.
    """
    u = np.atleast_2d(controls)
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    ev, cache = flow.pull(u, context, tolerant=True, with_cache=True)
    z = ev.output
    var = _var(theta, z.shape[1])
    resid = (z - theta.mean) / var
    a = w * ((z - w @ z) @ g)
    b = a - loss_coef * w
    rec = flow.pull_backward(cache, w[:, None] * g - b[:, None] * resid, b, grad)
    return GradientRecord(rec.params, b @ resid)


def _var(theta, dim):
    cov = np.asarray(theta.cov, dtype=np.float64)
    if cov.ndim == 2:
        cov = np.diag(cov)
    return np.broadcast_to(cov, (dim,))


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeResult:
    tape: list[StepRecord]
    states: np.ndarray          # (T+1, 4)
    controls: np.ndarray        # (T, 2)
    total_cost: float
    outcome: str                # "success", "collision" or "timeout"

    @property
    def loss(self) -> float:
        return float(sum(r.loss for r in self.tape))


def run_episode(env, controller, steps: int, seed: int = 0, record: bool = True,
                stop_on_terminal: bool = True, initial_mean=None) -> EpisodeResult:
    """Roll a controller out on the true environment for up to ``steps`` steps."""
    controller.reset(seed, initial_mean)
    state = np.asarray(env.state, dtype=np.float64).copy()
    states, controls, total = [state], [], 0.0
    outcome = "timeout"
    for t in range(steps):
        if isinstance(controller, NFMPC):
            u = controller.step(env, state, record=record)
        else:
            u = controller.step(env, state)
        total += env.cost(state, u)
        state = env.step(u).copy()
        if not np.all(np.isfinite(state)):
            raise TrainingError(f"environment state became non-finite at step {t}")
        states.append(state)
        controls.append(u)
        if env.collided(state):
            outcome = "collision"
        elif env.reached_goal(state):
            outcome = "success"
        if outcome != "timeout" and stop_on_terminal:
            break
    tape = controller.tape if isinstance(controller, NFMPC) else []
    return EpisodeResult(tape, np.array(states), np.array(controls).reshape(-1, env.control_dim),
                         float(total), outcome)


def backward_episode(tape: list[StepRecord], controller: NFMPC):
    """Reverse-time gradient of the summed per-step loss.

    Returns ``(flow gradient, shift gradient or None)``.
    """
    flow, shift = controller.flow, controller.shift
    gamma = controller.config.gamma
    cov = np.full(flow.dim, controller.config.latent_cov)
    g_flow = flow.params.zeros_like()
    g_shift = shift.params.zeros_like() if shift.learned else None
    g_mu = np.zeros(flow.dim)
    g_state = None
    for t in range(len(tape) - 1, -1, -1):
        rec = tape[t]
        theta = LatentGaussian(rec.mu_tilde, cov)
        vjp = delta_mu_vjp(flow, theta, rec.batch.controls, rec.batch.weights, gamma * g_mu,
                           rec.context, loss_coef=1.0, grad=g_flow)
        g_mu_tilde = (1.0 - gamma) * g_mu + vjp.input
        if not (np.all(np.isfinite(g_mu_tilde)) and np.all(np.isfinite(g_flow.values))):
            raise TrainingError(f"non-finite gradient at timestep {t}")
        if t == 0:
            break
        if shift.variant == "identity":
            g_mu = g_mu_tilde
        elif shift.learned:
            g_mu, g_state = shift.backward(rec.shift_cache, g_mu_tilde, g_state, g_shift)
        else:
            g_mu = np.zeros(flow.dim)
    return g_flow, g_shift


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    episodes: int = 1500
    horizon: int = 16
    episode_length: int = 100
    n_samples: int = 64
    gamma: float = 1.0
    beta: float = 1e-32
    latent_cov: float = 1.0
    lr: float = 1e-4
    seed: int = 0
    shift: str = "lstm"
    shift_hidden: int = 128
    flow_blocks: int = 5
    flow_hidden: int = 128
    condition: bool = True
    shifted_mean_sample: bool = True
    val_every: int = 100
    val_envs: int = 10
    val_samples: int | None = None
    clip_norm: float = 10.0
    env_kind: str = "random"
    env: PlanarParams = field(default_factory=PlanarParams)
    weights: CostWeights = field(default_factory=CostWeights)
    pretrain_episodes: int = 0
    pretrain_penalty: float = 1e-3

    def __post_init__(self):
        for name in ("horizon", "episode_length", "n_samples", "val_envs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.episodes < 0 or self.val_every < 0 or self.pretrain_episodes < 0:
            raise ValueError("episode counts must be nonnegative")
        if self.val_every and self.episodes and self.episodes % self.val_every:
            raise ValueError("validation cadence must divide the episode budget")
        if isinstance(self.env, dict):
            self.env = PlanarParams(**self.env)
        if isinstance(self.weights, dict):
            self.weights = CostWeights(**self.weights)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


# env seed streams, kept disjoint
TRAIN_STREAM = 1_000_000
VAL_STREAM = 900_000
TEST_STREAM = 800_000


def train_env_seed(config: TrainConfig, episode: int) -> int:
    return TRAIN_STREAM + 100_000 * config.seed + episode


def make_env(config: TrainConfig, env_seed: int) -> PlanarNav:
    ctx = generate_env(config.env_kind, env_seed, config.env)
    return PlanarNav(ctx, config.env, config.weights, seed=env_seed)


def context_dim(config: TrainConfig) -> int:
    return 2 * config.env.n_obstacles + 6 if config.condition else 0


def build_models(config: TrainConfig) -> tuple[FlowModel, ShiftModel]:
    D = config.horizon * 2
    u = config.env.u_max
    flow = FlowModel(FlowConfig(dim=D, context_dim=context_dim(config), n_blocks=config.flow_blocks,
                                hidden=config.flow_hidden, lower=(-u, -u), upper=(u, u)),
                     seed=config.seed)
    shift = ShiftModel(config.shift, D, config.shift_hidden, seed=config.seed)
    return flow, shift


def build_controller(config: TrainConfig, flow: FlowModel, shift: ShiftModel,
                     n_samples: int | None = None) -> NFMPC:
    cfg = NFMPCConfig(horizon=config.horizon, n_samples=n_samples or config.n_samples,
                      beta=config.beta, gamma=config.gamma, latent_cov=config.latent_cov,
                      shifted_mean_sample=config.shifted_mean_sample)
    return NFMPC(flow, shift, cfg, 2, (-np.full(2, config.env.u_max), np.full(2, config.env.u_max)))


def evaluate(config: TrainConfig, flow: FlowModel, shift: ShiftModel, env_seeds,
             n_samples: int | None = None) -> tuple[float, float]:
    """Success rate and median successful cost over fixed environments."""
    ctrl = build_controller(config, flow, shift, n_samples or config.val_samples)
    costs, successes = [], 0
    for s in env_seeds:
        env = make_env(config, s)
        res = run_episode(env, ctrl, config.episode_length, seed=s, record=False)
        if res.outcome == "success":
            successes += 1
            costs.append(res.total_cost)
    median = float(np.median(costs)) if costs else float("nan")
    return successes / len(env_seeds), median


def _better(a, b) -> bool:
    """Validation score comparison: success rate first, then lower median cost."""
    if b is None:
        return True
    if a[0] != b[0]:
        return a[0] > b[0]
    if np.isnan(a[1]):
        return False
    return np.isnan(b[1]) or a[1] < b[1]


@dataclass
class TrainResult:
    flow: FlowModel
    shift: ShiftModel
    curve: list[dict]
    best_episode: int
    stopped_early: bool = False


def pretrain_flowmppi(config: TrainConfig, flow: FlowModel, adam: AdamState) -> AdamState:
    """Fit the flow to FlowMPPI control means by maximum likelihood under the latent prior."""
    cfg = FlowMPPIConfig(horizon=config.horizon, n_samples=config.n_samples + config.n_samples % 2,
                         beta=config.beta, latent_cov=config.latent_cov, penalty=config.pretrain_penalty)
    bounds = (-np.full(2, config.env.u_max), np.full(2, config.env.u_max))
    ctrl = FlowMPPI(flow, cfg, 2, bounds)
    prior = LatentGaussian(np.zeros(flow.dim), np.full(flow.dim, config.latent_cov))
    for d in range(config.pretrain_episodes):
        env = make_env(config, train_env_seed(config, 50_000 + d))
        ctrl.reset(d)
        state = env.state.copy()
        means, contexts = [], []
        for _ in range(config.episode_length):
            u = ctrl.step(env, state)
            means.append(ctrl._inside(ctrl.theta.mean))
            contexts.append(env.flow_context(state) if flow.config.context_dim else None)
            state = env.step(u).copy()
            if env.collided(state) or env.reached_goal(state):
                break
        grad = flow.params.zeros_like()
        for m, c in zip(means, contexts):
            rec = log_likelihood_grad(flow, prior, m[None], c, coef=-1.0 / len(means))
            grad.values += rec.params.values
        _clip_grads(config.clip_norm, grad)
        new, adam = adam_step(flow.params, grad, adam, lr=config.lr)
        flow.set_params(new.values)
    return adam


def _clip_grads(max_norm, *grads):
    norm = global_norm(*[g for g in grads if g is not None])
    if max_norm and norm > max_norm:
        for g in grads:
            if g is not None:
                g.values *= max_norm / norm
    return norm


def train(config: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    """Episode loop with Adam on flow and shift parameters and periodic validation."""
    flow, shift = build_models(config)
    ctrl = build_controller(config, flow, shift)
    flow_adam = AdamState.zeros(len(flow.params))
    shift_adam = AdamState.zeros(len(shift.params))
    val_seeds = [VAL_STREAM + i for i in range(config.val_envs)]
    curve: list[dict] = []
    t_start = time.perf_counter()

    if config.pretrain_episodes:
        flow_adam = pretrain_flowmppi(config, flow, flow_adam)

    best = None
    best_params = (flow.params.copy(), shift.params.copy())
    best_episode = 0
    if config.val_every and config.episodes:
        best = evaluate(config, flow, shift, val_seeds)
        curve.append(_row(0, float("nan"), best, t_start))
    stopped = False
    for d in range(1, config.episodes + 1):
        env = make_env(config, train_env_seed(config, d))
        res = run_episode(env, ctrl, config.episode_length, seed=train_env_seed(config, d))
        loss = res.loss
        try:
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss in episode {d}")
            g_flow, g_shift = backward_episode(res.tape, ctrl)
            _clip_grads(config.clip_norm, g_flow, g_shift)
            new_flow, flow_adam = adam_step(flow.params, g_flow, flow_adam, lr=config.lr)
            if g_shift is not None:
                new_shift, shift_adam = adam_step(shift.params, g_shift, shift_adam, lr=config.lr)
                shift.params.values[:] = new_shift.values
            flow.set_params(new_flow.values)
        except (TrainingError, ValueError) as err:
            log.warning("stopping: %s", err)
            stopped = True
            break
        val = (float("nan"), float("nan"))
        if config.val_every and d % config.val_every == 0:
            val = evaluate(config, flow, shift, val_seeds)
            if _better(val, best):
                best = val
                best_params = (flow.params.copy(), shift.params.copy())
                best_episode = d
        curve.append(_row(d, loss, val, t_start))
        if progress:
            progress(curve[-1])
    if not config.val_every and not stopped:
        best_params = (flow.params.copy(), shift.params.copy())
        best_episode = config.episodes
    flow.set_params(best_params[0].values)
    shift.params.values[:] = best_params[1].values
    result = TrainResult(flow, shift, curve, best_episode, stopped)
    if out_dir is not None:
        save_training(result, config, out_dir)
    return result


def _row(episode, loss, val, t_start) -> dict:
    return {"episode": episode, "train_loss": loss, "val_success_rate": val[0],
            "val_median_cost": val[1], "wall_clock_s": time.perf_counter() - t_start}


CURVE_COLUMNS = ("episode", "train_loss", "val_success_rate", "val_median_cost", "wall_clock_s")


def write_curve(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if isinstance(r[k], float) and np.isnan(r[k]) else repr(r[k]))
                             for k in CURVE_COLUMNS})


def save_training(result: TrainResult, config: TrainConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.flow.save(out / "flow.ckpt")
    result.shift.save(out / "shift.ckpt")
    write_curve(result.curve, out / "learning_curve.csv")
    (out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_trained(out_dir) -> tuple[TrainConfig, FlowModel, ShiftModel]:
    out = Path(out_dir)
    config = TrainConfig.from_dict(json.loads((out / "train_config.json").read_text()))
    return config, FlowModel.load(out / "flow.ckpt"), ShiftModel.load(out / "shift.ckpt")

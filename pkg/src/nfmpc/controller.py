"""MPPI-family controllers: Gaussian MPPI, latent-space NFMPC and FlowMPPI.

All three share the same building blocks: a scrambled Halton sequence drawn
once per episode and mapped through the normal quantile function, rollout
scoring by a *problem* object, min-max normalised softmax weights, and a
convex-combination mean update.

A problem object must provide ``control_dim``, ``control_bounds`` (lower,
upper), ``rollout_costs(state, controls)`` with ``controls`` shaped
``(N, H, M)`` and, for flow-based controllers, ``flow_context(state)``.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .diffnet import (
    DimensionError,
    LstmSpec,
    LstmState,
    NetworkSpec,
    ParamVector,
    init_lstm,
    init_mlp,
    load_checkpoint,
    lstm_backward,
    lstm_forward,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
)
from .flow import FlowModel


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quasi-random sampling


def first_primes(n: int) -> list[int]:
    primes: list[int] = []
    k = 2
    while len(primes) < n:
        if all(k % p for p in primes if p * p <= k):
            primes.append(k)
        k += 1
    return primes


def halton_sequence(indices, bases, permutations=None) -> np.ndarray:
    """Radical inverses of ``indices`` in each base; shape ``(len(indices), len(bases))``.

    ``permutations[j]`` optionally scrambles the digits of base ``bases[j]``
    (generalised Halton); it must fix digit 0.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if np.any(idx < 1):
        raise ValueError("Halton indices start at 1")
    out = np.zeros((idx.size, len(bases)))
    for j, b in enumerate(bases):
        perm = None if permutations is None else np.asarray(permutations[j])
        n = idx.copy()
        f = 1.0 / b
        acc = np.zeros(idx.size)
        while np.any(n > 0):
            digit = n % b
            acc += f * (digit if perm is None else perm[digit])
            n //= b
            f /= b
        out[:, j] = acc
    return out


class HaltonSampler:
    """Seeded generalised Halton points in ``(0, 1)^dim``.

    The seed picks a digit permutation per base and a start offset, so
    different seeds give different but equally well spread point sets.
    """

    def __init__(self, dim: int, seed: int | None = 0):
        self.dim = dim
        self.bases = first_primes(dim)
        if seed is None:
            self.perms = None
            self.offset = 0
        else:
            rng = np.random.default_rng([seed, 31337])
            self.perms = [np.concatenate([[0], 1 + rng.permutation(b - 1)]) for b in self.bases]
            self.offset = int(rng.integers(0, 1000))

    def draw(self, n: int) -> np.ndarray:
        return halton_sequence(np.arange(1, n + 1) + self.offset, self.bases, self.perms)


_A = (3.387132872796366608, 133.14166789178437745, 1971.5909503065514427, 13731.693765509461125,
      45921.953931549871457, 67265.770927008700853, 33430.575583588128105, 2509.0809287301226727)
_B = (1.0, 42.313330701600911252, 687.1870074920579083, 5394.1960214247511077,
      21213.794301586595867, 39307.89580009271061, 28729.085735721942674, 5226.495278852545925)
_C = (1.42343711074968357734, 4.6303378461565452959, 5.7694972214606914055, 3.64784832476320460504,
      1.27045825245236838258, 0.24178072517745061177, 0.0227238449892691845833, 7.7454501427834140764e-4)
_D = (1.0, 2.05319162663775882187, 1.6763848301838038494, 0.68976733498510000455,
      0.14810397642748007459, 0.0151986665636164571966, 5.475938084995344946e-4, 1.05075007164441684324e-9)
_E = (6.6579046435011037772, 5.4637849111641143699, 1.7848265399172913358, 0.29656057182850489123,
      0.026532189526576123093, 0.0012426609473880784386, 2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 0.59983220655588793769, 0.13692988092273580531, 0.0148753612908506148525,
      7.868691311456132591e-4, 1.8463183175100546818e-5, 1.4215117583164458887e-7, 2.04426310338993978564e-15)


def _poly(coef, x):
    acc = np.zeros_like(x) + coef[-1]
    for c in coef[-2::-1]:
        acc = acc * x + c
    return acc


def norm_ppf(p) -> np.ndarray:
    """Standard normal quantile via Wichura's AS241 rational approximations."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("quantile arguments must lie in (0, 1)")
    q = p - 0.5
    out = np.empty_like(p)
    central = np.abs(q) <= 0.425
    r = 0.180625 - q[central] ** 2
    out[central] = q[central] * _poly(_A, r) / _poly(_B, r)
    tail = ~central
    r = np.sqrt(-np.log(np.where(q[tail] < 0, p[tail], 1.0 - p[tail])))
    near = r <= 5.0
    x = np.empty_like(r)
    x[near] = _poly(_C, r[near] - 1.6) / _poly(_D, r[near] - 1.6)
    x[~near] = _poly(_E, r[~near] - 5.0) / _poly(_F, r[~near] - 5.0)
    out[tail] = np.where(q[tail] < 0, -x, x)
    return out


@dataclass
class LatentGaussian:
    """Gaussian sampling distribution. ``cov`` is a diagonal vector or a full SPD matrix."""

    mean: np.ndarray
    cov: np.ndarray
    beta: float = 1e-32
    gamma: float = 1.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.ndim == 0:
            self.cov = np.full(self.mean.size, float(self.cov))
        if self.beta <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("step size must lie in (0, 1]")

    def factor(self) -> np.ndarray:
        if self.cov.ndim == 1:
            return np.diag(np.sqrt(self.cov))
        return np.linalg.cholesky(self.cov)


def gaussian_from_halton(values, theta: LatentGaussian) -> np.ndarray:
    """Map uniform points to Gaussian samples; row 0 is the mean itself."""
    normals = norm_ppf(values)
    if theta.cov.ndim == 1:
        spread = normals * np.sqrt(theta.cov)
    else:
        spread = normals @ theta.factor().T
    return np.vstack([theta.mean, theta.mean + spread])


# ---------------------------------------------------------------------------
# smoothing, weighting and updates


def bspline_smooth(sequence, degree: int = 3, n_knots: int = 4) -> np.ndarray:
    """Least-squares B-spline fit of a (H, M) sequence, endpoints held fixed.

    ``n_knots`` is the number of control points of the clamped spline.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    squeeze = seq.ndim == 1
    seq = seq.reshape(seq.shape[0], -1)
    H = seq.shape[0]
    if n_knots < degree + 1:
        raise ConfigurationError("spline needs at least degree + 1 control points")
    if H < n_knots:
        raise ConfigurationError("horizon shorter than the number of spline control points")
    n_inner = n_knots - degree - 1
    inner = np.linspace(0.0, H - 1.0, n_inner + 2)[1:-1]
    knots = np.concatenate([np.zeros(degree + 1), inner, np.full(degree + 1, H - 1.0)])
    basis = BSpline.design_matrix(np.arange(H, dtype=np.float64), knots, degree).toarray()
    # equality-constrained least squares: fit all points, pin first and last
    C = basis[[0, -1]]
    kkt = np.block([[basis.T @ basis, C.T], [C, np.zeros((2, 2))]])
    rhs = np.vstack([basis.T @ seq, seq[[0, -1]]])
    coef = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:n_knots]
    out = basis @ coef
    return out[:, 0] if squeeze else out


def softmax_weights(costs, beta: float, normalize: bool = True) -> np.ndarray:
    """Exponential-utility weights ``exp(-C/beta)``, optionally on min-max normalised costs."""
    c = np.asarray(costs, dtype=np.float64)
    if c.size == 0:
        raise ValueError("no costs to weight")
    if beta <= 0:
        raise ValueError("temperature must be positive")
    c = c - c.min()
    if normalize:
        span = c.max()
        if span > 0:
            c = c / span
    w = np.exp(-c / beta)
    return w / w.sum()


def mppi_control_update(mean_tilde, weights, controls, gamma: float) -> np.ndarray:
    return (1.0 - gamma) * np.asarray(mean_tilde) + gamma * (np.asarray(weights) @ np.asarray(controls))


def mppi_latent_update(mean_tilde, weights, latents, gamma: float) -> np.ndarray:
    """Same convex combination as the control update, over latent samples."""
    return (1.0 - gamma) * np.asarray(mean_tilde) + gamma * (np.asarray(weights) @ np.asarray(latents))


def covariance_adapt(cov_tilde, mean, weights, samples, gamma_cov: float, eps: float = 1e-8) -> np.ndarray:
    if not 0.0 <= gamma_cov <= 1.0:
        raise ValueError("covariance step size must lie in [0, 1]")
    cov_tilde = np.asarray(cov_tilde, dtype=np.float64)
    if gamma_cov == 0.0:
        return cov_tilde.copy()
    d = np.asarray(samples) - mean
    emp = (d * np.asarray(weights)[:, None]).T @ d
    cov = (1.0 - gamma_cov) * cov_tilde + gamma_cov * emp
    return 0.5 * (cov + cov.T) + eps * np.eye(cov.shape[0])


def shift_standard(sequence, control_dim: int | None = None) -> np.ndarray:
    """Drop the first control and append a zero control.

    Accepts an ``(H, M)`` array or a flat vector together with ``control_dim``.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim == 1:
        if control_dim is None:
            raise ValueError("control_dim is needed for flat sequences")
        return np.concatenate([seq[control_dim:], np.zeros(control_dim)])
    return np.concatenate([seq[1:], np.zeros((1,) + seq.shape[1:])])


def soft_min(costs, beta: float) -> float:
    """``-beta * log mean exp(-C / beta)``, the exponential-utility statistic in cost units."""
    c = np.asarray(costs, dtype=np.float64)
    m = c.min()
    return float(m - beta * np.log(np.mean(np.exp(-(c - m) / beta))))


# ---------------------------------------------------------------------------
# shift models


SHIFT_VARIANTS = ("mlp", "lstm", "identity", "control")


class ShiftModel:
    """Warm-start operator in latent space.

    Learned variants start with a zero output layer, so the first proposals
    sit at the latent origin and the conditioned flow alone shapes them.

    ``mlp`` and ``lstm`` are learned; ``identity`` keeps the mean; ``control``
    shifts in control space through the flow and is executed by the controller.
    """

    def __init__(self, variant: str, dim: int, hidden: int = 128,
                 params: ParamVector | None = None, seed: int = 0, zero_output: bool = True):
        if variant not in SHIFT_VARIANTS:
            raise ConfigurationError(f"unknown shift variant {variant!r}")
        self.variant = variant
        self.dim = dim
        self.hidden = hidden
        layout: dict = {}
        if variant == "mlp":
            self.net = NetworkSpec((dim, hidden, dim), ("relu", "identity"))
            layout = self.net.layout("mlp.")
        elif variant == "lstm":
            self.cell = LstmSpec(dim, hidden)
            self.head = NetworkSpec((hidden, dim), ("identity",))
            layout = {**self.cell.layout("lstm."), **self.head.layout("out.")}
        if params is None:
            params = ParamVector(layout)
            rng = np.random.default_rng([seed, 4242])
            if variant == "mlp":
                init_mlp(params, self.net, rng, "mlp.", zero_last=zero_output)
            elif variant == "lstm":
                init_lstm(params, self.cell, rng, "lstm.")
                init_mlp(params, self.head, rng, "out.", zero_last=zero_output)
        elif params.layout != layout:
            raise DimensionError("shift parameters do not match the variant")
        self.params = params

    @property
    def learned(self) -> bool:
        return self.variant in ("mlp", "lstm")

    def init_state(self):
        return LstmState.zeros(self.hidden) if self.variant == "lstm" else None

    def forward(self, mu, state=None):
        """Return ``(next pre-update mean, next state, cache)``."""
        mu = np.asarray(mu, dtype=np.float64)
        if mu.shape[-1] != self.dim:
            raise DimensionError(f"shift model expects width {self.dim}, got {mu.shape[-1]}")
        if self.variant == "identity":
            return mu.copy(), state, None
        if self.variant == "mlp":
            out, cache = mlp_forward(self.params, self.net, mu, "mlp.")
            return out, state, cache
        if self.variant == "lstm":
            new_state, lcache = lstm_forward(self.params, self.cell, state, mu, "lstm.")
            out, hcache = mlp_forward(self.params, self.head, new_state.h, "out.")
            return out, new_state, (lcache, hcache, new_state.h)
        raise ConfigurationError("the control-space shift is executed by the controller")

    def backward(self, cache, g_out, g_state=None, grad: ParamVector | None = None):
        """Adjoints of ``(mu, previous state)`` given adjoints of the outputs."""
        if self.variant == "identity":
            return np.asarray(g_out).copy(), g_state
        if self.variant == "mlp":
            rec = mlp_backward(self.params, self.net, None, g_out, "mlp.", cache, grad)
            return rec.input, g_state
        if self.variant == "lstm":
            lcache, hcache, h = cache
            rec = mlp_backward(self.params, self.head, h, g_out, "out.", hcache, grad)
            dh = rec.input + (g_state.h if g_state is not None else 0.0)
            dc = g_state.c if g_state is not None else np.zeros(self.hidden)
            rec2, prev = lstm_backward(self.params, self.cell, lcache, dh, dc, "lstm.", grad)
            return rec2.input, prev
        return np.zeros(self.dim), g_state

    def save(self, path) -> None:
        save_checkpoint(path, self.params, {"kind": "shift", "variant": self.variant,
                                            "dim": self.dim, "hidden": self.hidden})

    @classmethod
    def load(cls, path) -> ShiftModel:
        params, meta = load_checkpoint(path)
        return cls(meta["variant"], meta["dim"], meta["hidden"], params)


def shift_learned(model: ShiftModel, mu, state=None):
    out, new_state, _ = model.forward(mu, state)
    return out, new_state


# ---------------------------------------------------------------------------
# controllers


@dataclass
class SampleBatch:
    controls: np.ndarray        # (N, D)
    costs: np.ndarray           # (N,)
    weights: np.ndarray         # (N,)
    latents: np.ndarray | None = None


@dataclass
class StepRecord:
    """Everything the backward pass needs from one control step."""

    state: np.ndarray
    context: np.ndarray | None
    batch: SampleBatch
    mu_tilde: np.ndarray
    mu: np.ndarray
    loss: float
    shift_cache: object = None


class _Timed:
    def __init__(self):
        self.timing: dict[str, float] = defaultdict(float)
        self.steps = 0

    def _tick(self, key, t0):
        now = time.perf_counter()
        self.timing[key] += now - t0
        return now

    def mean_step_seconds(self) -> dict[str, float]:
        n = max(self.steps, 1)
        out = {k: v / n for k, v in sorted(self.timing.items())}
        out["total"] = sum(self.timing.values()) / n
        return out


@dataclass
class MPPIConfig:
    horizon: int = 32
    n_samples: int = 64
    beta: float = 1e-32
    gamma: float = 0.7
    init_cov: float = 10.0
    gamma_cov: float = 0.0
    shift: str = "standard"          # "standard" or "none"
    spline_knots: int | None = None
    spline_degree: int = 3
    normalize_costs: bool = True


class GaussianMPPI(_Timed):
    """Control-space MPPI with full-covariance adaptation."""

    name = "mppi"

    def __init__(self, config: MPPIConfig, control_dim: int, bounds=None):
        super().__init__()
        if config.shift not in ("standard", "none"):
            raise ConfigurationError(f"unknown MPPI shift {config.shift!r}")
        self.config = config
        self.M = control_dim
        self.D = config.horizon * control_dim
        self.bounds = bounds
        self.reset()

    def reset(self, seed: int = 0, mean=None):
        cfg = self.config
        self.theta = LatentGaussian(np.zeros(self.D) if mean is None else mean,
                                    cfg.init_cov * np.eye(self.D), cfg.beta, cfg.gamma)
        self.uniform = HaltonSampler(self.D, seed).draw(cfg.n_samples - 1)
        self.t = 0
        self.last_batch: SampleBatch | None = None

    def optimize(self, problem, state) -> SampleBatch:
        cfg = self.config
        t0 = time.perf_counter()
        U = gaussian_from_halton(self.uniform, self.theta)
        if cfg.spline_knots:
            U[1:] = np.stack([bspline_smooth(u.reshape(cfg.horizon, self.M), cfg.spline_degree,
                                             cfg.spline_knots).ravel() for u in U[1:]])
        t0 = self._tick("sampling", t0)
        costs = problem.rollout_costs(state, U.reshape(-1, cfg.horizon, self.M))
        t0 = self._tick("rollout", t0)
        w = softmax_weights(costs, cfg.beta, cfg.normalize_costs)
        mean = mppi_control_update(self.theta.mean, w, U, cfg.gamma)
        cov = covariance_adapt(self.theta.cov, mean, w, U, cfg.gamma_cov)
        self.theta = LatentGaussian(mean, cov, cfg.beta, cfg.gamma)
        self._tick("update", t0)
        self.last_batch = SampleBatch(U, costs, w)
        return self.last_batch

    def step(self, problem, state):
        if self.t > 0 and self.config.shift == "standard":
            self.theta.mean = shift_standard(self.theta.mean, self.M)
        self.optimize(problem, state)
        self.t += 1
        self.steps += 1
        return _clip(self.theta.mean[:self.M], self.bounds)


@dataclass
class NFMPCConfig:
    horizon: int = 32
    n_samples: int = 64
    beta: float = 1e-32
    gamma: float = 1.0
    latent_cov: float = 1.0
    shifted_mean_sample: bool = True
    deterministic: bool = True
    normalize_costs: bool = True


class NFMPC(_Timed):
    """MPPI whose sampling distribution is a flow pushed from a latent Gaussian.

    Only the latent mean is adapted online; the flow is frozen within an
    episode and the latent covariance stays fixed.
    """

    name = "nfmpc"

    def __init__(self, flow: FlowModel, shift: ShiftModel, config: NFMPCConfig, control_dim: int,
                 bounds=None):
        super().__init__()
        if flow.dim != config.horizon * control_dim:
            raise DimensionError("flow dimension must equal horizon * control_dim")
        if shift.dim != flow.dim:
            raise DimensionError("shift model width must equal the flow dimension")
        self.flow = flow
        self.shift = shift
        self.config = config
        self.M = control_dim
        self.D = flow.dim
        self.bounds = bounds
        self.reset()

    def reset(self, seed: int = 0, mean=None):
        cfg = self.config
        self.uniform = HaltonSampler(self.D, seed).draw(cfg.n_samples - 1)
        self.theta = LatentGaussian(np.zeros(self.D) if mean is None else mean,
                                    np.full(self.D, cfg.latent_cov), cfg.beta, cfg.gamma)
        self.shift_state = self.shift.init_state()
        self.rng = np.random.default_rng([seed, 99991])
        self.prev_controls = None
        self.prev_context = None
        self.t = 0
        self.tape: list[StepRecord] = []

    def _context(self, problem, state):
        return problem.flow_context(state) if self.flow.config.context_dim else None

    def optimize(self, problem, state, context=None, extra=None):
        """One latent MPPI update from the current pre-update mean ``theta``."""
        cfg = self.config
        t0 = time.perf_counter()
        Z = gaussian_from_halton(self.uniform, self.theta)
        t0 = self._tick("sampling", t0)
        U = self.flow.push(Z, context).output
        if extra is not None:
            U[-1] = extra
            Z[-1] = self.flow.pull(extra, context, tolerant=True).output
        t0 = self._tick("flow", t0)
        costs = problem.rollout_costs(state, U.reshape(-1, cfg.horizon, self.M))
        t0 = self._tick("rollout", t0)
        w = softmax_weights(costs, cfg.beta, cfg.normalize_costs)
        mu = mppi_latent_update(self.theta.mean, w, Z, cfg.gamma)
        self._tick("update", t0)
        return SampleBatch(U, costs, w, Z), mu

    def step(self, problem, state, record: bool = False):
        cfg = self.config
        context = self._context(problem, state)
        mu_tilde, shift_cache = self.theta.mean, None
        t0 = time.perf_counter()
        if self.t > 0:
            mu_tilde, shift_cache = self._apply_shift(self.theta.mean, context)
        self._tick("shift", t0)
        self.theta = LatentGaussian(mu_tilde, self.theta.cov, cfg.beta, cfg.gamma)
        extra = None
        if cfg.shifted_mean_sample and self.prev_controls is not None:
            extra = shift_standard(self.prev_controls, self.M)
        batch, mu = self.optimize(problem, state, context, extra)
        t0 = time.perf_counter()
        action, controls = self.select_action(mu, context)
        self._tick("flow", t0)
        self.prev_controls = controls
        self.prev_context = context
        if record:
            self.tape.append(StepRecord(np.asarray(state).copy(), context, batch, mu_tilde, mu,
                                        soft_min(batch.costs, cfg.beta), shift_cache))
        self.theta = LatentGaussian(mu, self.theta.cov, cfg.beta, cfg.gamma)
        self.last_batch = batch
        self.t += 1
        self.steps += 1
        return action

    def _apply_shift(self, mu, context):
        if self.shift.variant == "control":
            controls = self.flow.push(mu, self.prev_context).output
            shifted = shift_standard(controls, self.M)
            return self.flow.pull(shifted, context, tolerant=True).output, None
        out, self.shift_state, cache = self.shift.forward(mu, self.shift_state)
        return out, cache

    def select_action(self, mu, context):
        """First control of the pushed mean (deterministic) or of one pushed sample."""
        if self.config.deterministic:
            z = mu
        else:
            z = mu + np.sqrt(self.theta.cov) * self.rng.standard_normal(self.D)
        controls = self.flow.push(z, context).output
        return _clip(controls[:self.M], self.bounds), controls


@dataclass
class FlowMPPIConfig:
    horizon: int = 32
    n_samples: int = 64
    beta: float = 1e-32
    gamma: float = 0.7
    init_cov: float = 10.0
    latent_cov: float = 1.0
    penalty: float = 1e-3
    gamma_cov: float = 0.0
    normalize_costs: bool = True


class FlowMPPI(_Timed):
    """Control-space MPPI mixing flow samples from a fixed latent Gaussian with Gaussian perturbations."""

    name = "flowmppi"

    def __init__(self, flow: FlowModel, config: FlowMPPIConfig, control_dim: int, bounds=None):
        super().__init__()
        if config.n_samples % 2:
            raise ConfigurationError("FlowMPPI needs an even number of samples")
        if flow.dim != config.horizon * control_dim:
            raise DimensionError("flow dimension must equal horizon * control_dim")
        self.flow = flow
        self.config = config
        self.M = control_dim
        self.D = flow.dim
        self.bounds = bounds
        self.reset()

    def reset(self, seed: int = 0, mean=None):
        cfg = self.config
        half = cfg.n_samples // 2
        pts = HaltonSampler(self.D, seed).draw(cfg.n_samples - 1)
        self.latent_samples = np.sqrt(cfg.latent_cov) * norm_ppf(pts[:half])
        self.uniform = pts[half:]
        self.theta = LatentGaussian(np.zeros(self.D) if mean is None else mean,
                                    cfg.init_cov * np.eye(self.D), cfg.beta, cfg.gamma)
        self.t = 0

    def optimize(self, problem, state, context=None) -> SampleBatch:
        cfg = self.config
        t0 = time.perf_counter()
        Ug = gaussian_from_halton(self.uniform, self.theta)
        t0 = self._tick("sampling", t0)
        Uf = self.flow.push(self.latent_samples, context).output
        proj = self.flow.pull(self._inside(self.theta.mean), context, tolerant=True).output
        t0 = self._tick("flow", t0)
        U = np.vstack([Uf, Ug])
        costs = problem.rollout_costs(state, U.reshape(-1, cfg.horizon, self.M))
        if cfg.penalty:
            d = self.latent_samples - proj
            costs[:len(Uf)] += cfg.penalty * np.sum(d * d, axis=1)
        t0 = self._tick("rollout", t0)
        w = softmax_weights(costs, cfg.beta, cfg.normalize_costs)
        mean = mppi_control_update(self.theta.mean, w, U, cfg.gamma)
        cov = covariance_adapt(self.theta.cov, mean, w, U, cfg.gamma_cov)
        self.theta = LatentGaussian(mean, cov, cfg.beta, cfg.gamma)
        self._tick("update", t0)
        self.last_batch = SampleBatch(U, costs, w)
        return self.last_batch

    def _inside(self, controls):
        if self.flow.sigmoid is None:
            return controls
        w, b = self.flow.sigmoid.expand(self.D)
        return np.clip(controls, b + 1e-6 * w, b + w - 1e-6 * w)

    def step(self, problem, state):
        if self.t > 0:
            self.theta.mean = shift_standard(self.theta.mean, self.M)
        context = problem.flow_context(state) if self.flow.config.context_dim else None
        self.optimize(problem, state, context)
        self.t += 1
        self.steps += 1
        return _clip(self.theta.mean[:self.M], self.bounds)


def _clip(u, bounds):
    u = np.asarray(u, dtype=np.float64).copy()
    if bounds is None:
        return u
    return np.clip(u, bounds[0], bounds[1])


def select_action(controller: NFMPC, mu, context=None, deterministic: bool = True):
    old = controller.config.deterministic
    controller.config.deterministic = deterministic
    try:
        return controller.select_action(mu, context)[0]
    finally:
        controller.config.deterministic = old


def warm_start(controller, problem, state, iterations: int = 100) -> LatentGaussian:
    """Repeat the sample-weight-update cycle at a fixed state without shifting."""
    if iterations < 1:
        raise ValueError("warm start needs at least one iteration")
    for _ in range(iterations):
        if isinstance(controller, NFMPC):
            context = controller._context(problem, state)
            _, mu = controller.optimize(problem, state, context)
            controller.theta = LatentGaussian(mu, controller.theta.cov, controller.theta.beta,
                                              controller.theta.gamma)
        elif isinstance(controller, FlowMPPI):
            context = problem.flow_context(state) if controller.flow.config.context_dim else None
            controller.optimize(problem, state, context)
        else:
            controller.optimize(problem, state)
    return controller.theta

"""Numerical self-checks pairing each analytic routine with an oracle.

Every ``check_*`` function returns a :class:`CheckResult`; ``run_checks``
runs a selection and is what the ``verify`` CLI subcommand calls.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import oracles
from .controller import (
    NFMPC,
    GaussianMPPI,
    LatentGaussian,
    MPPIConfig,
    NFMPCConfig,
    ShiftModel,
    softmax_weights,
)
from .diffnet import (
    LstmSpec,
    LstmState,
    NetworkSpec,
    ParamVector,
    init_lstm,
    init_mlp,
    layer_norm_apply,
    layer_norm_backward,
    lstm_backward,
    lstm_forward,
    mlp_apply,
    mlp_backward,
)
from .envs import PlanarNav, PlanarParams, generate_env
from .flow import (
    FlowConfig,
    FlowModel,
    SigmoidLayer,
    log_likelihood,
    log_likelihood_grad,
    sigmoid_forward,
    sigmoid_inverse,
)
from .training import approx_delta_mu_grad, run_episode


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    threshold: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name}: worst={self.worst:.3e} threshold={self.threshold:.1e} "
                f"time={self.seconds:.1f}s {self.detail}").rstrip()


def _random_flow(rng, dim, context_dim=0, bounded=False, n_blocks=3, hidden=8, scale=0.3):
    cfg = FlowConfig(dim=dim, context_dim=context_dim, n_blocks=n_blocks, hidden=hidden,
                     lower=(-2.0,) if bounded else None, upper=(3.0,) if bounded else None)
    flow = FlowModel(cfg, seed=int(rng.integers(1 << 31)))
    flow.params.values[:] += scale * rng.standard_normal(len(flow.params))
    return flow


def _fd_params(f, params: ParamVector, analytic, indices=None) -> float:
    """Worst relative error over the chosen coordinates of ``params`` (default all)."""
    base = params.values.copy()

    def g(v):
        params.values[:] = v
        return f()

    try:
        fd = oracles.central_difference(g, base, indices)
    finally:
        params.values[:] = base
    analytic = np.asarray(analytic)
    return oracles.rel_err(analytic if indices is None else analytic[indices], fd)


# ---------------------------------------------------------------------------
# gradient suite


def gradient_suite(seeds: int = 20) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        worst = max(worst, _dense_check(rng), _layer_norm_check(rng), _lstm_check(rng),
                    _likelihood_check(rng))
    return CheckResult("gradient suite (dense, layer norm, LSTM, flow likelihood)", worst <= 1e-5,
                       worst, 1e-5, time.perf_counter() - t0, f"seeds={seeds}")


def _dense_check(rng) -> float:
    spec = NetworkSpec((3, 5, 4, 2), ("tanh", "relu", "identity"), (True, False, False))
    params = ParamVector(spec.layout())
    init_mlp(params, spec, rng)
    params.values[:] += 0.1 * rng.standard_normal(len(params))
    x = rng.standard_normal((4, 3))
    up = rng.standard_normal((4, 2))
    rec = mlp_backward(params, spec, x, up)
    err = _fd_params(lambda: float(np.sum(up * mlp_apply(params, spec, x))), params, rec.params.values)
    fx = oracles.central_difference(lambda v: float(np.sum(up * mlp_apply(params, spec, v.reshape(4, 3)))),
                                    x.ravel())
    return max(err, oracles.rel_err(rec.input.ravel(), fx))


def _layer_norm_check(rng) -> float:
    x = rng.standard_normal((3, 6))
    gain = rng.standard_normal(6)
    bias = rng.standard_normal(6)
    up = rng.standard_normal((3, 6))
    dx, dg, db = layer_norm_backward(x, gain, up)
    f = lambda xv, gv, bv: float(np.sum(up * layer_norm_apply(xv, gv, bv)))
    fx = oracles.central_difference(lambda v: f(v.reshape(3, 6), gain, bias), x.ravel())
    fg = oracles.central_difference(lambda v: f(x, v, bias), gain)
    fb = oracles.central_difference(lambda v: f(x, gain, v), bias)
    return max(oracles.rel_err(dx.ravel(), fx), oracles.rel_err(dg, fg), oracles.rel_err(db, fb))


def _lstm_check(rng) -> float:
    spec = LstmSpec(3, 4)
    params = ParamVector(spec.layout())
    init_lstm(params, spec, rng)
    params.values[:] += 0.2 * rng.standard_normal(len(params))
    x = rng.standard_normal(3)
    h0, c0 = rng.standard_normal(4), rng.standard_normal(4)
    uh, uc = rng.standard_normal(4), rng.standard_normal(4)

    def f(p=params, xv=x, hv=h0, cv=c0):
        st, _ = lstm_forward(p, spec, LstmState(hv, cv), xv)
        return float(uh @ st.h + uc @ st.c)

    _, cache = lstm_forward(params, spec, LstmState(h0, c0), x)
    rec, prev = lstm_backward(params, spec, cache, uh, uc)
    errs = [
        _fd_params(lambda: f(), params, rec.params.values),
        oracles.rel_err(rec.input, oracles.central_difference(lambda v: f(xv=v), x)),
        oracles.rel_err(prev.h, oracles.central_difference(lambda v: f(hv=v), h0)),
        oracles.rel_err(prev.c, oracles.central_difference(lambda v: f(cv=v), c0)),
    ]
    return max(errs)


def _likelihood_check(rng) -> float:
    dim = int(rng.integers(2, 5))
    flow = _random_flow(rng, dim, context_dim=2, bounded=bool(rng.integers(2)))
    c = rng.standard_normal(2)
    theta = LatentGaussian(rng.standard_normal(dim), rng.uniform(0.5, 2.0, dim))
    u = flow.push(rng.standard_normal((3, dim)), c).output
    coef = rng.standard_normal(3)
    rec = log_likelihood_grad(flow, theta, u, c, coef)
    f = lambda: float(coef @ log_likelihood(flow, theta, u, c))
    # every segment gets sampled: one coordinate per segment plus random extras
    picks = [flow.params.segment_slice(n).start for n in flow.params.names]
    picks += list(rng.choice(len(flow.params), 40, replace=False))
    err = _fd_params(f, flow.params, rec.params.values, sorted(set(picks)))

    def fm(m):
        return float(coef @ log_likelihood(flow, LatentGaussian(m, theta.cov), u, c))

    return max(err, oracles.rel_err(rec.input, oracles.central_difference(fm, theta.mean)))


# ---------------------------------------------------------------------------
# flow exactness


def flow_exactness(seeds: int = 10) -> CheckResult:
    t0 = time.perf_counter()
    rt = anti = jac = 0.0
    violations = 0
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        for dim in range(2, 7):
            flow = _random_flow(rng, dim, context_dim=3, bounded=bool(dim % 2))
            c = rng.standard_normal(3)
            z = rng.standard_normal((5, dim))
            fwd = flow.push(z, c)
            back = flow.pull(fwd.output, c)
            rt = max(rt, float(np.max(np.abs(back.output - z))))
            anti = max(anti, float(np.max(np.abs(fwd.log_det + back.log_det))))
            brute = oracles.log_abs_det_fd(lambda v: flow.push(v, c).output, z[0])
            jac = max(jac, oracles.rel_err(fwd.log_det[0], brute))
    rng = np.random.default_rng(7)
    flow = _random_flow(rng, 4, context_dim=0, bounded=True, scale=1.0)
    u = flow.push(5.0 * rng.standard_normal((10_000, 4))).output
    violations = int(np.sum((u <= -2.0) | (u >= 3.0)))
    passed = rt <= 1e-9 and anti <= 1e-9 and jac <= 1e-5 and violations == 0
    return CheckResult("flow exactness", passed, max(rt, anti), 1e-9, time.perf_counter() - t0,
                       f"round_trip={rt:.1e} antisym={anti:.1e} jacdet={jac:.1e} bound_violations={violations}")


# ---------------------------------------------------------------------------
# identity-flow equivalence


def identity_equivalence(seeds: int = 10, steps: int = 50) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(seeds):
        H, N = 8, 16
        params = PlanarParams(n_obstacles=4)
        ctx = generate_env("random", seed, params)
        bounds = (-np.full(2, params.u_max), np.full(2, params.u_max))
        mppi = GaussianMPPI(MPPIConfig(horizon=H, n_samples=N, beta=0.1, gamma=0.8, init_cov=1.0,
                                       gamma_cov=0.0, shift="none"), 2, bounds)
        flow = FlowModel(FlowConfig(dim=2 * H, context_dim=0, n_blocks=3, hidden=8), seed=seed)
        nf = NFMPC(flow, ShiftModel("identity", 2 * H), NFMPCConfig(
            horizon=H, n_samples=N, beta=0.1, gamma=0.8, latent_cov=1.0, shifted_mean_sample=False), 2, bounds)
        a = run_episode(PlanarNav(ctx, params, seed=seed), mppi, steps, seed, stop_on_terminal=False)
        b = run_episode(PlanarNav(ctx, params, seed=seed), nf, steps, seed, record=False,
                        stop_on_terminal=False)
        worst = max(worst, float(np.max(np.abs(a.states - b.states))))
    # weighted latent sum against weighted pulled controls, for nontrivial flows
    pulled = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(2000 + seed)
        flow = _random_flow(rng, 6, context_dim=2, bounded=True)
        c = rng.standard_normal(2)
        z = rng.standard_normal((32, 6))
        u = flow.push(z, c).output
        w = softmax_weights(rng.standard_normal(32), 0.3)
        pulled = max(pulled, float(np.max(np.abs(w @ z - w @ flow.pull(u, c).output))))
    passed = worst <= 1e-9 and pulled <= 1e-9
    return CheckResult("identity-flow equivalence", passed, max(worst, pulled), 1e-9,
                       time.perf_counter() - t0, f"trajectory={worst:.1e} weighted_pull={pulled:.1e}")


# ---------------------------------------------------------------------------
# latent-update gradient against quadrature


def _u_range(inst, lam, width=9.0):
    mu = inst.mean(lam)
    lo = brentq(lambda u: inst.pull(u, lam) - (mu - width * inst.sigma), -1e3, 1e3, xtol=1e-14)
    hi = brentq(lambda u: inst.pull(u, lam) - (mu + width * inst.sigma), -1e3, 1e3, xtol=1e-14)
    return lo, hi


def analytic_delta_mu_grad(inst: oracles.ScalarFlowInstance, lam: float, nodes: int = 4001) -> float:
    """Latent-update gradient from ``approx_delta_mu_grad`` with quadrature weights on a control-space grid."""
    lo, hi = _u_range(inst, lam)
    u = np.linspace(lo, hi, nodes)
    e = np.exp(inst.a * lam)
    sech2 = 1.0 / np.cosh(u) ** 2
    z = e * u + inst.b * lam + inst.k * np.tanh(u)
    slope = e + inst.k * sech2
    mu = inst.mean(lam)
    log_pi = -0.5 * ((z - mu) / inst.sigma) ** 2 + np.log(slope)
    util = -inst.cost(u) / inst.beta
    logw = log_pi + util
    w = np.exp(logw - logw.max())
    w[[0, -1]] *= 0.5  # trapezoid end weights
    w /= w.sum()
    dz = inst.a * e * u + inst.b
    score = -(z - mu) / inst.sigma ** 2 * (dz - inst.m1) + inst.a * e / slope
    return float(approx_delta_mu_grad(w, z[:, None], dz[:, None, None], score[:, None])[0, 0])


def quadrature_oracle(instances: int = 12) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(instances):
        inst = oracles.ScalarFlowInstance.random(rng)
        lam = float(rng.uniform(-0.5, 0.5))
        ref = oracles.quadrature_delta_mu_grad(inst, lam)
        worst = max(worst, oracles.rel_err(analytic_delta_mu_grad(inst, lam), ref))
    return CheckResult("latent-update gradient vs quadrature", worst <= 1e-5, worst, 1e-5,
                       time.perf_counter() - t0, f"instances={instances}")


# ---------------------------------------------------------------------------
# sigmoid layer


def sigmoid_logdets(points: int = 50) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(55)
    worst = 0.0
    for _ in range(points):
        lo = rng.uniform(-5, 0, 2)
        layer = SigmoidLayer(lo, lo + rng.uniform(0.5, 5, 2))
        x = rng.uniform(-4, 4, 2)
        fwd = sigmoid_forward(layer, x)
        brute = oracles.log_abs_det_fd(lambda v: sigmoid_forward(layer, v).output, x)
        worst = max(worst, oracles.rel_err(fwd.log_det, brute))
        inv = sigmoid_inverse(layer, fwd.output)
        brute = oracles.log_abs_det_fd(lambda v: sigmoid_inverse(layer, v).output, fwd.output)
        worst = max(worst, oracles.rel_err(inv.log_det, brute))
    unit = SigmoidLayer(np.zeros(1), np.ones(1))
    at_zero = abs(float(sigmoid_forward(unit, np.zeros(1)).log_det) - np.log(0.25))
    passed = worst <= 1e-7 and at_zero <= 4 * np.finfo(float).eps
    return CheckResult("sigmoid log-dets", passed, worst, 1e-7, time.perf_counter() - t0,
                       f"log_det_at_zero_err={at_zero:.1e}")


# ---------------------------------------------------------------------------
# weights


def weight_properties(vectors: int = 1000) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    worst = 0.0
    ok = True
    for _ in range(vectors):
        n = int(rng.integers(1, 64))
        scale = 10 ** rng.uniform(-2, 3)
        costs = rng.standard_normal(n) * scale
        beta = 10 ** rng.uniform(-2, 1) if rng.random() < 0.8 else 1e-32
        w = softmax_weights(costs, beta)
        # constants far larger than the cost spread erase digits before weighting
        w2 = softmax_weights(costs + scale * rng.uniform(-10, 10), beta)
        worst = max(worst, abs(w.sum() - 1.0), float(np.max(np.abs(w - w2))))
        ok &= bool(np.all(w >= 0)) and w[np.argmin(costs)] == w.max()
    return CheckResult("softmax weight properties", ok and worst <= 1e-12, worst, 1e-12,
                       time.perf_counter() - t0, f"vectors={vectors}")


CHECKS = {
    "gradients": gradient_suite,
    "flow": flow_exactness,
    "equivalence": identity_equivalence,
    "quadrature": quadrature_oracle,
    "sigmoid": sigmoid_logdets,
    "weights": weight_properties,
}


def run_checks(names=None) -> list[CheckResult]:
    return [CHECKS[n]() for n in (names or CHECKS)]

"""Independent reference computations used to check the analytic code paths.

Nothing here calls a backward pass. Derivatives come from central finite
differences and integrals from dense quadrature, so every comparison pits
two unrelated routes against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flow import gaussian_log_density

FD_FLOOR = 1e-3


def fd_step(x: float) -> float:
    return 3e-6 * max(1.0, abs(x))


def rel_err(a, b, floor: float = FD_FLOOR) -> float:
    """Largest ``|a - b| / max(|a|, |b|, floor)`` over entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den)) if a.size else 0.0


def central_difference(f, x, indices=None) -> np.ndarray:
    """Partial derivatives of scalar ``f`` at ``x`` for the chosen coordinates."""
    x = np.array(x, dtype=np.float64)
    idx = range(x.size) if indices is None else indices
    out = []
    for i in idx:
        h = fd_step(x.flat[i])
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        out.append((f(xp) - f(xm)) / (2 * h))
    return np.array(out)


def directional_difference(f, x, direction, h: float = 1e-6) -> float:
    x = np.asarray(x, dtype=np.float64)
    return (f(x + h * direction) - f(x - h * direction)) / (2 * h)


def fd_jacobian(f, x, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def log_abs_det_fd(f, x, h: float = 1e-6) -> float:
    return float(np.linalg.slogdet(fd_jacobian(f, x, h))[1])


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_quantile_bisect(p: float, tol: float = 1e-15) -> float:
    lo, hi = -40.0, 40.0
    while hi - lo > tol * max(1.0, abs(lo)):
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def radical_inverse(i: int, base: int) -> float:
    """Digit reversal with exact rational arithmetic."""
    from fractions import Fraction

    acc, f = Fraction(0), Fraction(1, base)
    while i:
        acc += f * (i % base)
        i //= base
        f /= base
    return float(acc)


# ---------------------------------------------------------------------------
# 1-D family for the latent-update gradient


@dataclass(frozen=True)
class ScalarFlowInstance:
    """Control-to-latent map ``exp(a*lam)*u + b*lam + k*tanh(u)`` with a Gaussian latent.

    The pre-update mean depends on the parameter too: ``m0 + m1*lam``.
    Cost is ``0.5*(u - c0)^2 + s*sin(u)`` at temperature ``beta``.
    """

    a: float
    b: float
    k: float
    m0: float
    m1: float
    sigma: float
    c0: float
    s: float
    beta: float

    @classmethod
    def random(cls, rng: np.random.Generator) -> ScalarFlowInstance:
        return cls(a=rng.uniform(-0.5, 0.5), b=rng.uniform(-1, 1), k=rng.uniform(0, 1),
                   m0=rng.uniform(-1, 1), m1=rng.uniform(-1, 1), sigma=rng.uniform(0.5, 1.5),
                   c0=rng.uniform(-2, 2), s=rng.uniform(0, 0.5), beta=rng.uniform(0.5, 2.0))

    def pull(self, u, lam):
        return math.exp(self.a * lam) * u + self.b * lam + self.k * np.tanh(u)

    def push(self, z, lam):
        """Invert ``pull`` by bisection; monotone so this is unambiguous."""
        z = np.asarray(z, dtype=np.float64)
        lo = np.full_like(z, -1e3)
        hi = np.full_like(z, 1e3)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self.pull(mid, lam) < z
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def cost(self, u):
        return 0.5 * (u - self.c0) ** 2 + self.s * np.sin(u)

    def mean(self, lam):
        return self.m0 + self.m1 * lam


def quadrature_delta_mu(inst: ScalarFlowInstance, lam: float, nodes: int = 2001) -> float:
    """Expected weighted latent under the latent Gaussian, by latent-space quadrature on +-8 sigma."""
    mu = inst.mean(lam)
    z = np.linspace(mu - 8 * inst.sigma, mu + 8 * inst.sigma, nodes)
    dens = np.exp(-0.5 * ((z - mu) / inst.sigma) ** 2)
    util = np.exp(-inst.cost(inst.push(z, lam)) / inst.beta)
    num = np.trapezoid(dens * util * z, z)
    den = np.trapezoid(dens * util, z)
    return float(num / den)


def quadrature_delta_mu_grad(inst: ScalarFlowInstance, lam: float, nodes: int = 2001,
                             h: float = 1e-4) -> float:
    return (quadrature_delta_mu(inst, lam + h, nodes) - quadrature_delta_mu(inst, lam - h, nodes)) / (2 * h)


# ---------------------------------------------------------------------------
# fixed-sample surrogate for the episode gradient


def surrogate_episode_loss(tape, flow, shift, gamma: float, latent_cov: float, reference=None):
    """Episode objective with every sampled control frozen.

    The forward-pass weights are reweighted by the likelihood ratio of the
    current parameters against the reference ones. Its parameter gradient at
    the reference point is what the approximate backward pass computes.
    Returns ``(loss, per-step log-likelihoods)``; pass the latter back as
    ``reference`` when evaluating perturbed parameters.
    """
    var = np.full(flow.dim, latent_cov)
    state = shift.init_state() if shift.learned else None
    total = 0.0
    logps = []
    mu = None
    for t, rec in enumerate(tape):
        if t == 0 or shift.variant == "control":
            mu_tilde = rec.mu_tilde
        elif shift.variant == "identity":
            mu_tilde = mu
        else:
            mu_tilde, state, _ = shift.forward(mu, state)
        ev = flow.pull(rec.batch.controls, rec.context, tolerant=True)
        lp = gaussian_log_density(ev.output, mu_tilde, var) + ev.log_det
        logps.append(lp)
        base = lp if reference is None else reference[t]
        r = rec.batch.weights * np.exp(lp - base)
        delta = (r @ ev.output) / r.sum()
        mu = (1.0 - gamma) * mu_tilde + gamma * delta
        total += -math.log(r.sum())
    return total, logps

"""Conditional RealNVP flow over stacked control sequences.

Direction convention: ``push`` maps latent -> control, ``pull`` maps
control -> latent. A push applies the coupling blocks in order and then the
optional scaled-sigmoid layer; a pull runs the exact inverse.

Each coupling block copies the pass-through partition ``I1`` and maps the
other partition as ``y2 * exp(s) + t`` where ``s`` and ``t`` are small MLPs of
``(y[I1], context)``. Masks alternate even/odd indices between blocks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .diffnet import (
    DimensionError,
    GradientRecord,
    NetworkSpec,
    ParamVector,
    init_mlp,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
)

LOG_2PI = float(np.log(2.0 * np.pi))


class FlowDomainError(ValueError):
    """Raised when a control lies on or outside the sigmoid layer bounds."""


@dataclass(frozen=True)
class FlowEval:
    output: np.ndarray
    log_det: np.ndarray | float


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# sigmoid constraint layer


@dataclass(frozen=True)
class SigmoidLayer:
    """``u = w * sigmoid(x) + b`` with ``w = upper - lower`` and ``b = lower``.

    Bounds are given per control dimension and broadcast over the horizon.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape:
            raise DimensionError("lower and upper bounds must have equal shape")
        if not np.all(lo < hi):
            raise ValueError("sigmoid layer needs lower < upper element-wise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def expand(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        if dim % self.lower.size:
            raise DimensionError(f"bounds of size {self.lower.size} do not tile dimension {dim}")
        reps = dim // self.lower.size
        b = np.tile(self.lower.ravel(), reps)
        w = np.tile((self.upper - self.lower).ravel(), reps)
        return w, b


def sigmoid_forward(layer: SigmoidLayer, x) -> FlowEval:
    x = np.asarray(x, dtype=np.float64)
    w, b = layer.expand(x.shape[-1])
    out = w * _sigmoid(x) + b
    # saturated sigmoids round onto a bound; keep outputs in the open interval
    out = np.clip(out, np.nextafter(b, np.inf), np.nextafter(b + w, -np.inf))
    log_det = np.sum(np.log(w) - _softplus(-x) - _softplus(x), axis=-1)
    return FlowEval(out, log_det)


def sigmoid_inverse(layer: SigmoidLayer, u, tolerant: bool = False, margin: float = 1e-12) -> FlowEval:
    """Logit inverse of :func:`sigmoid_forward`.

    Strict mode rejects controls on or outside the bounds. ``tolerant`` clamps
    them ``margin`` inside the bounds first.
    """
    u = np.asarray(u, dtype=np.float64)
    w, b = layer.expand(u.shape[-1])
    if tolerant:
        u = np.clip(u, b + margin, b + w - margin)
    lo_gap = u - b
    hi_gap = b + w - u
    if not (np.all(lo_gap > 0) and np.all(hi_gap > 0)):
        raise FlowDomainError("control outside the open bound interval of the sigmoid layer")
    x = np.log(lo_gap) - np.log(hi_gap)
    log_det = np.sum(np.log(w) - np.log(lo_gap) - np.log(hi_gap), axis=-1)
    return FlowEval(x, log_det)


# ---------------------------------------------------------------------------
# coupling blocks


class CouplingBlock:
    """One affine coupling block; parameters live in a shared ParamVector."""

    def __init__(self, params: ParamVector, prefix: str, keep: np.ndarray, change: np.ndarray,
                 scale_spec: NetworkSpec, shift_spec: NetworkSpec, context_dim: int):
        self.params = params
        self.prefix = prefix
        self.keep = keep
        self.change = change
        self.scale_spec = scale_spec
        self.shift_spec = shift_spec
        self.context_dim = context_dim

    @property
    def dim(self) -> int:
        return self.keep.size + self.change.size

    def _net_input(self, y, c):
        y1 = y[:, self.keep]
        if self.context_dim == 0:
            if c is not None and np.size(c) != 0:
                raise DimensionError("block has no context input but a context was given")
            return y1
        if c is None:
            raise DimensionError(f"block expects a context of width {self.context_dim}")
        c = np.asarray(c, dtype=np.float64)
        if c.shape[-1] != self.context_dim:
            raise DimensionError(f"context width {c.shape[-1]} != {self.context_dim}")
        c = np.broadcast_to(c, (y.shape[0], self.context_dim))
        return np.concatenate([y1, c], axis=1)

    def _scale_translate(self, y, c):
        inp = self._net_input(y, c)
        s, s_cache = mlp_forward(self.params, self.scale_spec, inp, self.prefix + "s.")
        t, t_cache = mlp_forward(self.params, self.shift_spec, inp, self.prefix + "t.")
        return s, t, (inp, s_cache, t_cache)

    def forward(self, y, c=None, with_cache: bool = False):
        y = _as_batch(y, self.dim)
        s, t, nets = self._scale_translate(y, c)
        out = y.copy()
        out[:, self.change] = y[:, self.change] * np.exp(s) + t
        log_det = s.sum(axis=1)
        if with_cache:
            return out, log_det, (y, s, nets)
        return out, log_det

    def inverse(self, y, c=None, with_cache: bool = False):
        y = _as_batch(y, self.dim)
        s, t, nets = self._scale_translate(y, c)
        out = y.copy()
        out[:, self.change] = (y[:, self.change] - t) * np.exp(-s)
        log_det = -s.sum(axis=1)
        if with_cache:
            return out, log_det, (out, s, nets)
        return out, log_det

    def _backward_nets(self, nets, gs, gt, grad):
        inp, s_cache, t_cache = nets
        rs = mlp_backward(self.params, self.scale_spec, inp, gs, self.prefix + "s.", s_cache, grad)
        rt = mlp_backward(self.params, self.shift_spec, inp, gt, self.prefix + "t.", t_cache, grad)
        return (rs.input + rt.input)[:, :self.keep.size]

    def forward_backward(self, cache, g_out, g_ld, grad):
        """Adjoint of the block input given adjoints of its output and log-det."""
        y, s, nets = cache
        es = np.exp(s)
        g2 = g_out[:, self.change]
        g_in = g_out.copy()
        g_in[:, self.change] = g2 * es
        gs = g2 * y[:, self.change] * es + g_ld[:, None]
        g_in[:, self.keep] += self._backward_nets(nets, gs, g2, grad)
        return g_in

    def inverse_backward(self, cache, g_out, g_ld, grad):
        out, s, nets = cache
        ems = np.exp(-s)
        g2 = g_out[:, self.change]
        g_in = g_out.copy()
        g_in[:, self.change] = g2 * ems
        gs = -g2 * out[:, self.change] - g_ld[:, None]
        gt = -g2 * ems
        g_in[:, self.keep] += self._backward_nets(nets, gs, gt, grad)
        return g_in


def _as_batch(y, dim):
    y = np.asarray(y, dtype=np.float64)
    y2 = np.atleast_2d(y)
    if y2.shape[-1] != dim:
        raise DimensionError(f"expected vectors of length {dim}, got {y2.shape[-1]}")
    return y2


def coupling_forward(block: CouplingBlock, y, c=None) -> FlowEval:
    single = np.ndim(y) == 1
    out, ld = block.forward(y, c)
    return FlowEval(out[0], float(ld[0])) if single else FlowEval(out, ld)


def coupling_inverse(block: CouplingBlock, y, c=None) -> FlowEval:
    single = np.ndim(y) == 1
    out, ld = block.inverse(y, c)
    return FlowEval(out[0], float(ld[0])) if single else FlowEval(out, ld)


# ---------------------------------------------------------------------------
# full model


@dataclass(frozen=True)
class FlowConfig:
    dim: int
    context_dim: int = 0
    n_blocks: int = 5
    hidden: int = 128
    n_hidden: int = 2
    layer_norm: bool = True
    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("coupling flows need dimension >= 2")
        if self.n_blocks < 0 or self.hidden <= 0 or self.n_hidden < 0:
            raise ValueError("invalid flow architecture")
        if (self.lower is None) != (self.upper is None):
            raise ValueError("give both lower and upper bounds or neither")
        if self.lower is not None:
            object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
            object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))


def block_masks(dim: int, n_blocks: int) -> list[tuple[np.ndarray, np.ndarray]]:
    even = np.arange(0, dim, 2)
    odd = np.arange(1, dim, 2)
    return [(even, odd) if k % 2 == 0 else (odd, even) for k in range(n_blocks)]


class FlowModel:
    def __init__(self, config: FlowConfig, params: ParamVector | None = None, seed: int = 0):
        self.config = config
        self.masks = block_masks(config.dim, config.n_blocks)
        specs = []
        layout: dict[str, tuple[int, ...]] = {}
        for k, (keep, change) in enumerate(self.masks):
            n_in = keep.size + config.context_dim
            hidden = (config.hidden,) * config.n_hidden
            ln = (config.layer_norm,) * config.n_hidden + (False,)
            s_spec = NetworkSpec((n_in, *hidden, change.size), ("tanh",) * (config.n_hidden + 1), ln)
            t_spec = NetworkSpec((n_in, *hidden, change.size), ("relu",) * config.n_hidden + ("identity",), ln)
            specs.append((s_spec, t_spec))
            layout.update(s_spec.layout(f"b{k}.s."))
            layout.update(t_spec.layout(f"b{k}.t."))
        if params is None:
            params = ParamVector(layout)
            rng = np.random.default_rng(seed)
            for k, (s_spec, t_spec) in enumerate(specs):
                init_mlp(params, s_spec, rng, f"b{k}.s.", zero_last=True)
                init_mlp(params, t_spec, rng, f"b{k}.t.", zero_last=True)
        elif params.layout != layout:
            raise DimensionError("parameter layout does not match the flow configuration")
        self.params = params
        self.blocks = [
            CouplingBlock(params, f"b{k}.", keep, change, s_spec, t_spec, config.context_dim)
            for k, ((keep, change), (s_spec, t_spec)) in enumerate(zip(self.masks, specs))
        ]
        self.sigmoid = None if config.lower is None else SigmoidLayer(config.lower, config.upper)

    @property
    def dim(self) -> int:
        return self.config.dim

    def set_params(self, values: np.ndarray) -> None:
        self.params.values[:] = values

    # -- evaluation ---------------------------------------------------------

    def push(self, z, c=None, with_cache: bool = False):
        single = np.ndim(z) == 1
        y = _as_batch(z, self.dim)
        log_det = np.zeros(y.shape[0])
        caches = []
        for block in self.blocks:
            y, ld, cache = block.forward(y, c, with_cache=True)
            log_det += ld
            caches.append(cache)
        sig_in = y
        if self.sigmoid is not None:
            ev = sigmoid_forward(self.sigmoid, y)
            y, log_det = ev.output, log_det + ev.log_det
        result = FlowEval(y[0], float(log_det[0])) if single else FlowEval(y, log_det)
        if with_cache:
            return result, (caches, sig_in)
        return result

    def pull(self, u, c=None, tolerant: bool = False, with_cache: bool = False):
        single = np.ndim(u) == 1
        y = _as_batch(u, self.dim)
        log_det = np.zeros(y.shape[0])
        if self.sigmoid is not None and tolerant:
            y = np.clip(y, *_clip_bounds(self.sigmoid, self.dim))
        sig_in = y
        if self.sigmoid is not None:
            ev = sigmoid_inverse(self.sigmoid, y)
            y, log_det = ev.output, log_det + ev.log_det
        caches = []
        for block in reversed(self.blocks):
            y, ld, cache = block.inverse(y, c, with_cache=True)
            log_det += ld
            caches.append(cache)
        result = FlowEval(y[0], float(log_det[0])) if single else FlowEval(y, log_det)
        if with_cache:
            return result, (caches, sig_in)
        return result

    # -- reverse mode ---------------------------------------------------------

    def pull_backward(self, cache, g_z, g_ld, grad: ParamVector | None = None) -> GradientRecord:
        """Vector-Jacobian product of a batched pull.

        ``g_z`` (B, D) and ``g_ld`` (B,) are adjoints of the latent output and
        of the pull log-det. Parameter gradients are summed over the batch; the
        returned input gradient is w.r.t. the controls.
        """
        caches, u = cache
        if grad is None:
            grad = self.params.zeros_like()
        g = np.atleast_2d(np.asarray(g_z, dtype=np.float64)).copy()
        g_ld = np.broadcast_to(np.asarray(g_ld, dtype=np.float64), (g.shape[0],))
        # caches are stored in application order: block K first
        for block, bc in zip(self.blocks, reversed(caches)):
            g = block.inverse_backward(bc, g, g_ld, grad)
        if self.sigmoid is not None:
            w, b = self.sigmoid.expand(self.dim)
            lo = u - b
            hi = b + w - u
            g = g * (1.0 / lo + 1.0 / hi) + g_ld[:, None] * (-1.0 / lo + 1.0 / hi)
        return GradientRecord(grad, g)

    def push_backward(self, cache, g_u, g_ld, grad: ParamVector | None = None) -> GradientRecord:
        caches, sig_in = cache
        if grad is None:
            grad = self.params.zeros_like()
        g = np.atleast_2d(np.asarray(g_u, dtype=np.float64)).copy()
        g_ld = np.broadcast_to(np.asarray(g_ld, dtype=np.float64), (g.shape[0],))
        if self.sigmoid is not None:
            w, _ = self.sigmoid.expand(self.dim)
            sg = _sigmoid(sig_in)
            g = g * w * sg * (1.0 - sg) + g_ld[:, None] * (1.0 - 2.0 * sg)
        for block, bc in zip(reversed(self.blocks), reversed(caches)):
            g = block.forward_backward(bc, g, g_ld, grad)
        return GradientRecord(grad, g)

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        meta = {"kind": "flow", "config": asdict(self.config),
                "masks": [[k.tolist(), c.tolist()] for k, c in self.masks]}
        save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> FlowModel:
        params, meta = load_checkpoint(path)
        cfg = dict(meta["config"])
        for key in ("lower", "upper"):
            if cfg.get(key) is not None:
                cfg[key] = tuple(cfg[key])
        return cls(FlowConfig(**cfg), params)


def _clip_bounds(layer: SigmoidLayer, dim: int, margin: float = 1e-12):
    w, b = layer.expand(dim)
    return b + margin, b + w - margin


def flow_push(model: FlowModel, z, c=None) -> FlowEval:
    return model.push(z, c)


def flow_pull(model: FlowModel, u, c=None, tolerant: bool = False) -> FlowEval:
    return model.pull(u, c, tolerant=tolerant)


def gaussian_log_density(z, mean, var) -> np.ndarray:
    z = np.atleast_2d(z)
    var = np.broadcast_to(np.asarray(var, dtype=np.float64), (z.shape[-1],))
    d = z - mean
    return -0.5 * np.sum(d * d / var + np.log(var) + LOG_2PI, axis=-1)


def log_likelihood(model: FlowModel, theta, u, c=None):
    """``log p_theta(pull(u)) + log|det d pull / du|`` for a diagonal latent Gaussian.

    ``theta`` needs ``mean`` and a diagonal ``cov`` (scalar or vector).
    """
    single = np.ndim(u) == 1
    ev = model.pull(u, c)
    lp = gaussian_log_density(ev.output, theta.mean, _diag(theta.cov, model.dim)) + ev.log_det
    return float(lp[0]) if single else lp


def log_likelihood_grad(model: FlowModel, theta, u, c=None, coef: Sequence[float] | float = 1.0):
    """Gradient of ``sum_i coef_i * log_likelihood(u_i)`` w.r.t. flow params and latent mean.

    Returns a GradientRecord whose ``input`` holds the latent-mean gradient.
    """
    var = _diag(theta.cov, model.dim)
    ev, cache = model.pull(u, c, with_cache=True)
    z = np.atleast_2d(ev.output)
    coef = np.broadcast_to(np.asarray(coef, dtype=np.float64), (z.shape[0],))
    resid = (z - theta.mean) / var
    rec = model.pull_backward(cache, -coef[:, None] * resid, coef)
    return GradientRecord(rec.params, (coef[:, None] * resid).sum(axis=0))


def _diag(cov, dim):
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 2:
        cov = np.diag(cov)
    return np.broadcast_to(cov, (dim,))

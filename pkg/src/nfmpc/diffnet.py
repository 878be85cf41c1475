"""Differentiable building blocks with hand-written backward passes.

Everything trainable lives in a :class:`ParamVector`: one flat float64 array
with named, ordered segments. Networks read their weights as views into that
array and accumulate gradients into a second ``ParamVector`` with the same
layout, so a whole model (flow blocks, shift network) is optimised as a
single vector.

Dense layers use the convention ``y = x @ W.T + b`` with ``W`` of shape
``(out, in)``. All functions accept a single vector or a batch of row
vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class DimensionError(ValueError):
    """Raised when array shapes disagree with a network or layout."""


class ParamVector:
    """Flat parameter storage with named segments in deterministic order."""

    def __init__(self, layout: Mapping[str, Iterable[int]], values=None):
        self.names: list[str] = []
        self.shapes: dict[str, tuple[int, ...]] = {}
        self.offsets: dict[str, int] = {}
        offset = 0
        for name, shape in layout.items():
            if name in self.shapes:
                raise KeyError(f"duplicate segment {name!r}")
            shape = tuple(int(s) for s in shape)
            self.names.append(name)
            self.shapes[name] = shape
            self.offsets[name] = offset
            offset += int(np.prod(shape, dtype=np.int64))
        self.size = offset
        if values is None:
            self.values = np.zeros(offset)
        else:
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (offset,):
                raise DimensionError(f"expected {offset} values, got shape {values.shape}")
            self.values = values.copy()

    @property
    def layout(self) -> dict[str, tuple[int, ...]]:
        return {n: self.shapes[n] for n in self.names}

    def __getitem__(self, name: str) -> np.ndarray:
        start = self.offsets[name]
        shape = self.shapes[name]
        return self.values[start:start + int(np.prod(shape, dtype=np.int64))].reshape(shape)

    def __contains__(self, name: str) -> bool:
        return name in self.shapes

    def __len__(self) -> int:
        return self.size

    def zeros_like(self) -> ParamVector:
        return ParamVector(self.layout)

    def copy(self) -> ParamVector:
        return ParamVector(self.layout, self.values)

    def segment_slice(self, name: str) -> slice:
        start = self.offsets[name]
        return slice(start, start + int(np.prod(self.shapes[name], dtype=np.int64)))

    def to_bytes(self, meta: dict | None = None) -> bytes:
        header = {
            "segments": [[n, list(self.shapes[n])] for n in self.names],
            "meta": meta or {},
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return head + b"\n" + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple[ParamVector, dict]:
        cut = blob.index(b"\n")
        header = json.loads(blob[:cut].decode("utf-8"))
        layout = {name: tuple(shape) for name, shape in header["segments"]}
        values = np.frombuffer(blob[cut + 1:], dtype="<f8").astype(np.float64)
        return cls(layout, values), header.get("meta", {})


@dataclass
class GradientRecord:
    """Parameter gradients (same layout as the parameters) plus the input gradient."""

    params: ParamVector
    input: np.ndarray | None = None


def save_checkpoint(path, params: ParamVector, meta: dict | None = None) -> None:
    Path(path).write_bytes(params.to_bytes(meta))


def load_checkpoint(path) -> tuple[ParamVector, dict]:
    return ParamVector.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# activations and layer norm


def activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "identity":
        return a
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, a: np.ndarray, y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return upstream * (1.0 - y * y)
    if name == "relu":
        return upstream * (a > 0.0)
    return upstream


def layer_norm_apply(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape[-1:] != x.shape[-1:] or bias.shape[-1:] != x.shape[-1:]:
        raise DimensionError("layer norm gain/bias length must match input length")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xhat, _ = _ln_normalise(x, eps)
    return gain * xhat + bias


def _ln_normalise(x, eps):
    mean = x.mean(axis=-1, keepdims=True)
    centred = x - mean
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    return centred * inv_std, inv_std


def layer_norm_backward(x, gain, upstream, eps: float = 1e-5):
    """Return ``(dx, dgain, dbias)``; parameter gradients are summed over the batch."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    xhat, inv_std = _ln_normalise(x, eps)
    dxhat = upstream * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    dgain = (upstream * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
    dbias = upstream.reshape(-1, x.shape[-1]).sum(axis=0)
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# multilayer perceptron


@dataclass(frozen=True)
class NetworkSpec:
    """Dense network ``sizes[0] -> ... -> sizes[-1]``.

    ``activations[l]`` and ``layer_norm[l]`` describe layer ``l``; layer norm is
    applied to the pre-activation.
    """

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    layer_norm: tuple[bool, ...] = ()
    ln_eps: float = 1e-5

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(sizes) < 2:
            raise ValueError("a network needs at least one layer")
        if any(s <= 0 for s in sizes):
            raise ValueError("layer sizes must be positive")
        if len(self.activations) != len(sizes) - 1:
            raise ValueError("one activation per layer required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        ln = tuple(bool(f) for f in self.layer_norm) or (False,) * (len(sizes) - 1)
        if len(ln) != len(sizes) - 1:
            raise ValueError("one layer-norm flag per layer required")
        object.__setattr__(self, "layer_norm", ln)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def layout(self, prefix: str = "") -> dict[str, tuple[int, ...]]:
        out = {}
        for l in range(self.n_layers):
            out[f"{prefix}{l}.W"] = (self.sizes[l + 1], self.sizes[l])
            out[f"{prefix}{l}.b"] = (self.sizes[l + 1],)
            if self.layer_norm[l]:
                out[f"{prefix}{l}.ln_g"] = (self.sizes[l + 1],)
                out[f"{prefix}{l}.ln_b"] = (self.sizes[l + 1],)
        return out

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "activations": list(self.activations),
            "layer_norm": list(self.layer_norm),
            "ln_eps": self.ln_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(tuple(d["sizes"]), tuple(d["activations"]), tuple(d["layer_norm"]), d.get("ln_eps", 1e-5))


def init_mlp(params: ParamVector, spec: NetworkSpec, rng: np.random.Generator,
             prefix: str = "", zero_last: bool = False) -> None:
    """Fan-in scaled uniform weights, zero biases, unit layer-norm gains."""
    for l in range(spec.n_layers):
        W = params[f"{prefix}{l}.W"]
        if zero_last and l == spec.n_layers - 1:
            W[...] = 0.0
        else:
            bound = 1.0 / np.sqrt(spec.sizes[l])
            W[...] = rng.uniform(-bound, bound, size=W.shape)
        params[f"{prefix}{l}.b"][...] = 0.0
        if spec.layer_norm[l]:
            params[f"{prefix}{l}.ln_g"][...] = 1.0
            params[f"{prefix}{l}.ln_b"][...] = 0.0


@dataclass
class MlpCache:
    inputs: list = field(default_factory=list)    # layer inputs
    pre: list = field(default_factory=list)       # affine outputs (before layer norm)
    act_in: list = field(default_factory=list)    # activation inputs
    outputs: list = field(default_factory=list)   # activation outputs
    squeeze: bool = False


def mlp_forward(params: ParamVector, spec: NetworkSpec, x, prefix: str = ""):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[-1] != spec.n_in:
        raise DimensionError(f"network expects input width {spec.n_in}, got {h.shape[-1]}")
    cache = MlpCache(squeeze=squeeze)
    for l in range(spec.n_layers):
        cache.inputs.append(h)
        a = h @ params[f"{prefix}{l}.W"].T + params[f"{prefix}{l}.b"]
        cache.pre.append(a)
        if spec.layer_norm[l]:
            a = layer_norm_apply(a, params[f"{prefix}{l}.ln_g"], params[f"{prefix}{l}.ln_b"], spec.ln_eps)
        cache.act_in.append(a)
        h = activate(spec.activations[l], a)
        cache.outputs.append(h)
    return (h[0] if squeeze else h), cache


def mlp_apply(params: ParamVector, spec: NetworkSpec, x, prefix: str = "") -> np.ndarray:
    return mlp_forward(params, spec, x, prefix)[0]


def mlp_backward(params: ParamVector, spec: NetworkSpec, x, upstream, prefix: str = "",
                 cache: MlpCache | None = None, grad: ParamVector | None = None) -> GradientRecord:
    """Gradients of ``sum(upstream * mlp_apply(x))``.

    Parameter gradients are summed over the batch and *added* into ``grad``
    when one is supplied (it must share the layout of ``params``).
    """
    if cache is None:
        _, cache = mlp_forward(params, spec, x, prefix)
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if g.shape != cache.outputs[-1].shape:
        raise DimensionError(f"upstream shape {g.shape} does not match output {cache.outputs[-1].shape}")
    if grad is None:
        grad = params.zeros_like()
    for l in reversed(range(spec.n_layers)):
        g = activation_grad(spec.activations[l], cache.act_in[l], cache.outputs[l], g)
        if spec.layer_norm[l]:
            g, dgain, dbias = layer_norm_backward(cache.pre[l], params[f"{prefix}{l}.ln_g"], g, spec.ln_eps)
            grad[f"{prefix}{l}.ln_g"][...] += dgain
            grad[f"{prefix}{l}.ln_b"][...] += dbias
        grad[f"{prefix}{l}.W"][...] += g.T @ cache.inputs[l]
        grad[f"{prefix}{l}.b"][...] += g.sum(axis=0)
        g = g @ params[f"{prefix}{l}.W"]
    return GradientRecord(grad, g[0] if cache.squeeze else g)


# ---------------------------------------------------------------------------
# LSTM cell


@dataclass(frozen=True)
class LstmSpec:
    n_in: int
    n_hidden: int

    def layout(self, prefix: str = "") -> dict[str, tuple[int, ...]]:
        return {
            f"{prefix}W": (4 * self.n_hidden, self.n_in + self.n_hidden),
            f"{prefix}b": (4 * self.n_hidden,),
        }


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.h.shape != self.c.shape:
            raise DimensionError("LSTM hidden and cell state must have equal shape")

    @classmethod
    def zeros(cls, n_hidden: int) -> LstmState:
        return cls(np.zeros(n_hidden), np.zeros(n_hidden))


def init_lstm(params: ParamVector, spec: LstmSpec, rng: np.random.Generator,
              prefix: str = "", forget_bias: float = 1.0) -> None:
    bound = 1.0 / np.sqrt(spec.n_hidden)
    W = params[f"{prefix}W"]
    W[...] = rng.uniform(-bound, bound, size=W.shape)
    b = params[f"{prefix}b"]
    b[...] = 0.0
    b[spec.n_hidden:2 * spec.n_hidden] = forget_bias


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(params: ParamVector, spec: LstmSpec, state: LstmState, x, prefix: str = ""):
    """One LSTM step with gate order (input, forget, candidate, output)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.n_in:
        raise DimensionError(f"LSTM expects input width {spec.n_in}, got {x.shape[-1]}")
    if state.h.shape[-1] != spec.n_hidden:
        raise DimensionError(f"LSTM expects hidden width {spec.n_hidden}, got {state.h.shape[-1]}")
    H = spec.n_hidden
    xh = np.concatenate([x, state.h], axis=-1)
    a = xh @ params[f"{prefix}W"].T + params[f"{prefix}b"]
    i = _sigmoid(a[..., :H])
    f = _sigmoid(a[..., H:2 * H])
    g = np.tanh(a[..., 2 * H:3 * H])
    o = _sigmoid(a[..., 3 * H:])
    c = f * state.c + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (xh, state.c, i, f, g, o, tc)
    return LstmState(h, c), cache


def lstm_step(params: ParamVector, spec: LstmSpec, state: LstmState, x, prefix: str = "") -> LstmState:
    return lstm_forward(params, spec, state, x, prefix)[0]


def lstm_backward(params: ParamVector, spec: LstmSpec, cache, dh, dc, prefix: str = "",
                  grad: ParamVector | None = None):
    """Backward through one step given adjoints of the new ``h`` and ``c``.

    Returns ``(GradientRecord with input gradient, adjoint of previous state)``.
    """
    xh, c_prev, i, f, g, o, tc = cache
    dh = np.asarray(dh, dtype=np.float64)
    dc = np.asarray(dc, dtype=np.float64) + dh * o * (1.0 - tc * tc)
    do = dh * tc
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    da = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        dg * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=-1)
    if grad is None:
        grad = params.zeros_like()
    W = params[f"{prefix}W"]
    grad[f"{prefix}W"][...] += np.atleast_2d(da).T @ np.atleast_2d(xh)
    grad[f"{prefix}b"][...] += np.atleast_2d(da).sum(axis=0)
    dxh = da @ W
    dx = dxh[..., :spec.n_in]
    prev = LstmState(dxh[..., spec.n_in:], dc * f)
    return GradientRecord(grad, dx), prev


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: ParamVector, grads, state: AdamState, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam; returns fresh ``(params, state)`` and leaves inputs untouched."""
    g = grads.params if isinstance(grads, GradientRecord) else grads
    if g.layout != params.layout:
        raise DimensionError("gradient layout does not match parameters")
    if not np.all(np.isfinite(g.values)):
        for name in g.names:
            if not np.all(np.isfinite(g[name])):
                raise ValueError(f"non-finite gradient in segment {name!r}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g.values
    v = beta2 * state.v + (1.0 - beta2) * g.values * g.values
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = ParamVector(params.layout, params.values - lr * m_hat / (np.sqrt(v_hat) + eps))
    return new, AdamState(m, v, t)


def global_norm(*vectors: ParamVector) -> float:
    return float(np.sqrt(sum(float(v.values @ v.values) for v in vectors)))

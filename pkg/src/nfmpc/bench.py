"""Evaluation sweeps over controllers and sample counts, with CSV/JSONL outputs.

``episodes.jsonl`` holds only seeded, deterministic fields so that repeated
runs are byte-identical. Wall-clock measurements go to ``timings.jsonl``;
``summary.csv`` is rebuilt from both files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .controller import (
    NFMPC,
    ConfigurationError,
    FlowMPPI,
    FlowMPPIConfig,
    GaussianMPPI,
    MPPIConfig,
    NFMPCConfig,
    ShiftModel,
    warm_start,
)
from .envs import CostWeights, PlanarNav, PlanarParams, generate_env
from .training import TEST_STREAM, TrainConfig, load_trained, run_episode

log = logging.getLogger(__name__)

CONTROLLERS = ("mppi", "flowmppi", "nfmpc", "nfmpc-identity")
SUMMARY_COLUMNS = ("controller", "N", "success_rate", "cost_q1", "cost_median", "cost_q3", "mean_step_ms")


@dataclass
class ExperimentConfig:
    controllers: list[str] = field(default_factory=lambda: ["mppi"])
    env_kind: str = "random"
    env: PlanarParams = field(default_factory=PlanarParams)
    weights: CostWeights = field(default_factory=CostWeights)
    horizon: int = 64
    episode_length: int = 200
    samples: list[int] = field(default_factory=lambda: [32])
    episodes: int = 32
    seed: int = 0
    beta: float = 1e-32
    mppi_init_cov: float = 100.0
    mppi_gamma: float = 1.0
    mppi_gamma_cov: float = 0.0
    mppi_spline_knots: int | None = None
    flowmppi_init_cov: float = 10.0
    flowmppi_latent_cov: float = 1.0
    flowmppi_penalty: float = 1e-3
    flowmppi_gamma: float = 1.0
    flowmppi_gamma_cov: float = 0.0
    nfmpc_latent_cov: float = 1.0
    nfmpc_gamma: float = 1.0
    nfmpc_deterministic: bool = True
    warm_start_iters: int = 0
    checkpoint: str | None = None
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = PlanarParams(**self.env)
        if isinstance(self.weights, dict):
            self.weights = CostWeights(**self.weights)
        if isinstance(self.controllers, str):
            self.controllers = [c for c in self.controllers.split(",") if c]
        if isinstance(self.samples, (int, str)):
            self.samples = parse_samples(self.samples)
        unknown = [c for c in self.controllers if c not in CONTROLLERS]
        if unknown:
            raise ConfigurationError(f"unknown controllers {unknown}; choose from {CONTROLLERS}")
        if not self.samples:
            raise ConfigurationError("sample list must be nonempty")
        if any(n < 1 for n in self.samples):
            raise ConfigurationError("sample counts must be positive")
        if self.episodes < 0:
            raise ConfigurationError("episode count must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


# reference planar settings per environment family, plus the reduced desk task
PRESETS = {
    "pngrid": {"env_kind": "grid", "horizon": 32, "beta": 1e-32, "mppi_init_cov": 10.0,
               "mppi_gamma": 0.7, "flowmppi_init_cov": 10.0, "flowmppi_latent_cov": 1.0,
               "flowmppi_penalty": 1e-4, "nfmpc_latent_cov": 1.0, "nfmpc_gamma": 0.7,
               "flowmppi_gamma": 0.7},
    "pnrand": {"env_kind": "random", "horizon": 64, "beta": 1e-32, "mppi_init_cov": 100.0,
               "mppi_gamma": 1.0, "flowmppi_init_cov": 10.0, "flowmppi_latent_cov": 1.0,
               "flowmppi_penalty": 1e-3, "nfmpc_latent_cov": 1.0, "nfmpc_gamma": 1.0},
    "pnranddyn": {"env_kind": "random-dynamic", "horizon": 64, "beta": 1e-32, "mppi_init_cov": 100.0,
                  "mppi_gamma": 1.0, "flowmppi_init_cov": 10.0, "flowmppi_latent_cov": 1.0,
                  "flowmppi_penalty": 1e-3, "nfmpc_latent_cov": 1.0, "nfmpc_gamma": 1.0},
    "desk": {"env_kind": "random", "env": {"n_obstacles": 4}, "horizon": 16, "episode_length": 100,
             "beta": 1e-32, "mppi_init_cov": 100.0, "mppi_gamma": 1.0, "flowmppi_init_cov": 10.0,
             "flowmppi_latent_cov": 1.0, "flowmppi_penalty": 1e-3, "nfmpc_latent_cov": 1.0,
             "nfmpc_gamma": 1.0, "episodes": 16, "samples": [32],
             "train": {"episodes": 1500, "n_samples": 64, "flow_blocks": 3, "flow_hidden": 64,
                       "shift": "lstm", "shift_hidden": 64, "lr": 1e-3, "val_every": 100,
                       "val_envs": 10, "val_samples": 32}},
}


def parse_samples(text) -> list[int]:
    if isinstance(text, int):
        return [text]
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError as err:
        raise ConfigurationError(f"bad sample list {text!r}") from err


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a JSON config; a ``preset`` key seeds defaults that explicit keys override."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigurationError(f"{path}: invalid JSON ({err})") from err
    preset = raw.pop("preset", None)
    merged: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}")
        merged.update(json.loads(json.dumps(PRESETS[preset])))
    for key, value in raw.items():
        if key in ("env", "train") and isinstance(value, dict):
            merged.setdefault(key, {}).update(value)
        else:
            merged[key] = value
    merged.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    extra = set(merged) - known
    if extra:
        raise ConfigurationError(f"unknown config keys {sorted(extra)}")
    return ExperimentConfig(**merged)


def train_config(config: ExperimentConfig) -> TrainConfig:
    """Training settings derived from an experiment config plus its ``train`` block."""
    base = {"horizon": config.horizon, "episode_length": config.episode_length,
            "beta": config.beta, "gamma": config.nfmpc_gamma, "latent_cov": config.nfmpc_latent_cov,
            "seed": config.seed, "env_kind": config.env_kind, "env": asdict(config.env),
            "weights": asdict(config.weights)}
    base.update(config.train)
    try:
        return TrainConfig(**base)
    except TypeError as err:
        raise ConfigurationError(f"bad train block: {err}") from err


# ---------------------------------------------------------------------------
# controllers


def _bounds(config):
    u = config.env.u_max
    return -np.full(2, u), np.full(2, u)


def _load_checkpoint(config: ExperimentConfig):
    if config.checkpoint is None:
        raise ConfigurationError("flow-based controllers need a checkpoint directory")
    path = Path(config.checkpoint)
    if not (path / "flow.ckpt").exists() or not (path / "shift.ckpt").exists():
        raise ConfigurationError(f"checkpoint files missing in {path}")
    tcfg, flow, shift = load_trained(path)
    if tcfg.horizon != config.horizon:
        raise ConfigurationError(f"checkpoint horizon {tcfg.horizon} != experiment horizon {config.horizon}")
    if flow.config.context_dim and flow.config.context_dim != 2 * config.env.n_obstacles + 6:
        raise ConfigurationError("checkpoint context width does not match the obstacle count")
    return flow, shift


def make_controller(name: str, n_samples: int, config: ExperimentConfig, models=None):
    if name == "mppi":
        cfg = MPPIConfig(horizon=config.horizon, n_samples=n_samples, beta=config.beta,
                         gamma=config.mppi_gamma, init_cov=config.mppi_init_cov,
                         gamma_cov=config.mppi_gamma_cov, spline_knots=config.mppi_spline_knots)
        return GaussianMPPI(cfg, 2, _bounds(config))
    flow, shift = models if models is not None else _load_checkpoint(config)
    if name == "flowmppi":
        cfg = FlowMPPIConfig(horizon=config.horizon, n_samples=n_samples, beta=config.beta,
                             gamma=config.flowmppi_gamma, init_cov=config.flowmppi_init_cov,
                             latent_cov=config.flowmppi_latent_cov, penalty=config.flowmppi_penalty,
                             gamma_cov=config.flowmppi_gamma_cov)
        return FlowMPPI(flow, cfg, 2, _bounds(config))
    if name == "nfmpc-identity":
        shift = ShiftModel("identity", flow.dim)
    cfg = NFMPCConfig(horizon=config.horizon, n_samples=n_samples, beta=config.beta,
                      gamma=config.nfmpc_gamma, latent_cov=config.nfmpc_latent_cov,
                      deterministic=config.nfmpc_deterministic)
    return NFMPC(flow, shift, cfg, 2, _bounds(config))


def env_seeds(config: ExperimentConfig) -> list[int]:
    """Fixed evaluation environments, shared by every controller and sample count."""
    return [TEST_STREAM + 10_000 * config.seed + i for i in range(config.episodes)]


# ---------------------------------------------------------------------------
# experiment


@dataclass
class EpisodeRecord:
    controller: str
    n_samples: int
    episode: int
    seed: int
    outcome: str
    total_cost: float
    steps: int
    trajectory: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


@dataclass
class TimingRecord:
    controller: str
    n_samples: int
    episode: int
    steps: int
    total_s: float
    phases: dict


def run_experiment(config: ExperimentConfig, models=None):
    """All (controller, N, environment) episodes; returns (summary rows, records, timings)."""
    if any(c != "mppi" for c in config.controllers) and models is None and config.episodes:
        models = _load_checkpoint(config)
    records: list[EpisodeRecord] = []
    timings: list[TimingRecord] = []
    seeds = env_seeds(config)
    if not seeds:
        return [], records, timings
    for name in config.controllers:
        for n in config.samples:
            ctrl = make_controller(name, n, config, models)
            for k, s in enumerate(seeds):
                env = PlanarNav(generate_env(config.env_kind, s, config.env), config.env, config.weights,
                                seed=s)
                ctrl.timing.clear()
                ctrl.steps = 0
                res = _episode(ctrl, env, config, s)
                records.append(EpisodeRecord(name, n, k, s, res.outcome, res.total_cost, len(res.controls),
                                             res.states.tolist()))
                phases = {p: v for p, v in sorted(ctrl.timing.items())}
                timings.append(TimingRecord(name, n, k, ctrl.steps, float(sum(phases.values())), phases))
    return aggregate(records, timings), records, timings


def _episode(ctrl, env, config, seed):
    mean = None
    if config.warm_start_iters:
        ctrl.reset(seed)
        mean = warm_start(ctrl, env, env.state, config.warm_start_iters).mean.copy()
    return run_episode(env, ctrl, config.episode_length, seed, record=False, initial_mean=mean)


def _quartiles(costs):
    if not costs:
        return (math.nan, math.nan, math.nan)
    q1, med, q3 = np.percentile(np.asarray(costs, dtype=np.float64), [25, 50, 75])
    return float(q1), float(med), float(q3)


def aggregate(records, timings) -> list[dict]:
    """Summary rows keyed by (controller, N) in first-seen order."""
    keys: list[tuple[str, int]] = []
    for r in records:
        if (r.controller, r.n_samples) not in keys:
            keys.append((r.controller, r.n_samples))
    rows = []
    for name, n in keys:
        mine = [r for r in records if r.controller == name and r.n_samples == n]
        tms = [t for t in timings if t.controller == name and t.n_samples == n]
        succ = [r.total_cost for r in mine if r.outcome == "success"]
        q1, med, q3 = _quartiles(succ)
        steps = sum(t.steps for t in tms)
        step_ms = 1000.0 * sum(t.total_s for t in tms) / steps if steps else math.nan
        rows.append({"controller": name, "N": n, "success_rate": len(succ) / len(mine),
                     "cost_q1": q1, "cost_median": med, "cost_q3": q3, "mean_step_ms": step_ms})
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def summary_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def emit_outputs(rows, records, timings, out_dir, config: ExperimentConfig | None = None) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(summary_csv(rows))
        (out / "episodes.jsonl").write_text("".join(r.to_json() + "\n" for r in records))
        (out / "timings.jsonl").write_text(
            "".join(json.dumps(asdict(t), sort_keys=True) + "\n" for t in timings))
        if config is not None:
            (out / "config.resolved.json").write_text(
                json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as err:
        raise OSError(f"could not write outputs to {out}: {err}") from err


def read_outputs(out_dir):
    """Parse ``episodes.jsonl`` and ``timings.jsonl`` back into records."""
    out = Path(out_dir)
    records = [EpisodeRecord(**json.loads(line)) for line in (out / "episodes.jsonl").read_text().splitlines()]
    timings = [TimingRecord(**json.loads(line)) for line in (out / "timings.jsonl").read_text().splitlines()]
    return records, timings


# ---------------------------------------------------------------------------
# timing


def timing_report(timings) -> list[dict]:
    """Mean step time per (controller, N) and its ratio to Gaussian MPPI at the same N."""
    rows = []
    keys: list[tuple[str, int]] = []
    for t in timings:
        if (t.controller, t.n_samples) not in keys:
            keys.append((t.controller, t.n_samples))
    means = {}
    for name, n in keys:
        tms = [t for t in timings if t.controller == name and t.n_samples == n]
        steps = sum(t.steps for t in tms)
        phases: dict[str, float] = {}
        for t in tms:
            for p, v in t.phases.items():
                phases[p] = phases.get(p, 0.0) + v
        means[(name, n)] = 1000.0 * sum(t.total_s for t in tms) / steps if steps else math.nan
        rows.append({"controller": name, "N": n, "mean_step_ms": means[(name, n)],
                     **{f"{p}_ms": 1000.0 * v / steps if steps else math.nan for p, v in sorted(phases.items())}})
    for row in rows:
        base = means.get(("mppi", row["N"]))
        if base is None:
            log.warning("no Gaussian MPPI baseline at N=%s; ratio omitted", row["N"])
            row["ratio_to_mppi"] = math.nan
        else:
            row["ratio_to_mppi"] = row["mean_step_ms"] / base
    return rows


def timing_csv(rows) -> str:
    cols: list[str] = []
    for row in rows:
        cols += [k for k in row if k not in cols]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([_fmt(row.get(c, math.nan)) for c in cols])
    return buf.getvalue()

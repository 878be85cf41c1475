import numpy as np
import pytest
from hypothesis import given, strategies as st

from nfmpc.controller import (
    ConfigurationError,
    FlowMPPI,
    FlowMPPIConfig,
    GaussianMPPI,
    HaltonSampler,
    LatentGaussian,
    MPPIConfig,
    NFMPC,
    NFMPCConfig,
    ShiftModel,
    bspline_smooth,
    covariance_adapt,
    gaussian_from_halton,
    halton_sequence,
    mppi_control_update,
    mppi_latent_update,
    norm_ppf,
    select_action,
    shift_learned,
    shift_standard,
    softmax_weights,
    warm_start,
)
from nfmpc.diffnet import DimensionError
from nfmpc.flow import FlowConfig, FlowModel
from nfmpc.oracles import central_difference, normal_quantile_bisect, radical_inverse, rel_err

seeds = st.integers(0, 2**31 - 1)


class Quadratic:
    """Toy problem: squared distance of the flattened plan to a target."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=float)

    def rollout_costs(self, state, controls):
        d = controls.reshape(len(controls), -1) - self.target
        return np.sum(d * d, axis=1)



# --- quasi-random sampling ---

def test_halton_examples():
    assert np.allclose(halton_sequence([1, 2, 3, 4], [2])[:, 0], [0.5, 0.25, 0.75, 0.125], rtol=0, atol=0)
    assert halton_sequence([1], [3])[0, 0] == pytest.approx(1 / 3, abs=1e-16)


def test_halton_matches_exact_radical_inverse():
    idx = np.arange(1, 500)
    got = halton_sequence(idx, [2, 3, 5, 7])
    for j, b in enumerate([2, 3, 5, 7]):
        assert np.allclose(got[:, j], [radical_inverse(int(i), b) for i in idx], rtol=0, atol=1e-15)


def test_halton_rejects_zero_index():
    with pytest.raises(ValueError):
        halton_sequence([0, 1], [2])


@given(seeds)
def test_scrambled_halton_in_open_unit_cube(seed):
    pts = HaltonSampler(12, seed % 10_000).draw(200)
    assert np.all((pts > 0) & (pts < 1))
    again = HaltonSampler(12, seed % 10_000).draw(200)
    assert np.array_equal(pts, again)


def test_norm_ppf_examples_and_oracle():
    assert norm_ppf(0.5) == 0.0
    assert norm_ppf(0.8413447) == pytest.approx(1.0, abs=1e-5)
    lower = np.concatenate([np.logspace(-12, -3, 20), np.linspace(0.01, 0.5, 50)])
    ref = np.array([normal_quantile_bisect(p) for p in lower])
    assert np.max(np.abs(norm_ppf(lower) - ref)) < 1e-9
    # upper tail through symmetry; 1 - p is exact there, the bisection CDF near 1 is not
    upper = 1.0 - lower
    ref_upper = np.array([-normal_quantile_bisect(1.0 - p) for p in upper])
    assert np.max(np.abs(norm_ppf(upper) - ref_upper)) < 1e-9
    with pytest.raises(ValueError):
        norm_ppf([0.0])


def test_gaussian_from_halton_unit_cov_is_quantile():
    v = np.array([[0.2, 0.7], [0.5, 0.9]])
    z = gaussian_from_halton(v, LatentGaussian(np.zeros(2), np.ones(2)))
    assert np.array_equal(z[0], [0.0, 0.0])
    assert np.allclose(z[1:], norm_ppf(v), rtol=0, atol=0)
    full = gaussian_from_halton(v, LatentGaussian(np.ones(2), np.array([[4.0, 0.0], [0.0, 9.0]])))
    assert np.allclose(full[1:], 1 + norm_ppf(v) * [2.0, 3.0], atol=1e-14)


def test_latent_gaussian_validation():
    with pytest.raises(ValueError):
        LatentGaussian(np.zeros(2), np.ones(2), beta=0.0)
    with pytest.raises(ValueError):
        LatentGaussian(np.zeros(2), np.ones(2), gamma=1.5)


# --- smoothing ---

def test_spline_reproduces_constants_and_ramps():
    const = np.full((10, 2), 3.0)
    assert np.allclose(bspline_smooth(const), const, atol=1e-12)
    ramp = np.stack([np.linspace(-1, 2, 12), np.linspace(5, 0, 12)], axis=1)
    assert np.allclose(bspline_smooth(ramp, degree=1, n_knots=2), ramp, atol=1e-9)
    assert np.allclose(bspline_smooth(ramp), ramp, atol=1e-9)


@given(seeds)
def test_spline_reduces_variance_and_keeps_endpoints(seed):
    x = np.random.default_rng(seed).standard_normal(20)
    y = bspline_smooth(x)
    assert y[0] == pytest.approx(x[0], abs=1e-9) and y[-1] == pytest.approx(x[-1], abs=1e-9)
    assert np.var(y) <= np.var(x) + 1e-12


def test_spline_configuration_errors():
    with pytest.raises(ConfigurationError):
        bspline_smooth(np.zeros(10), degree=3, n_knots=3)
    with pytest.raises(ConfigurationError):
        bspline_smooth(np.zeros(3), degree=3, n_knots=4)


# --- weights and updates ---

def test_weight_examples():
    assert np.allclose(softmax_weights([2.0, 2.0], 1.0), [0.5, 0.5])
    w = softmax_weights([0.0, 100.0], 1.0)
    assert np.allclose(w, [0.7310585786300049, 0.2689414213699951], rtol=1e-14)
    assert np.array_equal(softmax_weights([5.0], 1e-32), [1.0])
    with pytest.raises(ValueError):
        softmax_weights([], 1.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.floats(-1e3, 1e3),
       st.sampled_from([1e-32, 0.05, 1.0, 10.0]))
def test_weight_properties(costs, shift, beta):
    c = np.asarray(costs)
    w = softmax_weights(c, beta)
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-12
    assert w[np.argmin(c)] == w.max()
    if np.ptp(c) > 1e-6 * max(1.0, abs(shift)):
        assert np.allclose(softmax_weights(c + shift, beta), w, rtol=0, atol=1e-9)


def test_control_update_examples():
    mt = np.array([1.0, -1.0])
    U = np.array([[2.0, 0.0], [0.0, 4.0]])
    w = np.array([0.25, 0.75])
    assert np.array_equal(mppi_control_update(mt, w, U, 0.0), mt)
    assert np.allclose(mppi_control_update(mt, np.full(2, 0.5), U, 1.0), U.mean(axis=0))
    # 0.3*(1,-1) + 0.7*(0.5, 3.0)
    assert np.allclose(mppi_control_update(mt, w, U, 0.7), [0.65, 1.8], atol=1e-15)
    assert np.array_equal(mppi_latent_update(mt, np.ones(1), U[:1], 1.0), U[0])
    assert np.array_equal(mppi_latent_update(mt, w, U, 0.7), mppi_control_update(mt, w, U, 0.7))


@given(seeds, st.floats(0, 1))
def test_update_in_convex_hull_1d(seed, gamma):
    rng = np.random.default_rng(seed)
    mt, U = rng.standard_normal(1), rng.standard_normal((8, 1))
    w = softmax_weights(rng.standard_normal(8), 0.5)
    mu = mppi_control_update(mt, w, U, gamma)
    pts = np.concatenate([mt, U[:, 0]])
    assert pts.min() - 1e-12 <= mu[0] <= pts.max() + 1e-12


def test_covariance_examples():
    cov = np.diag([2.0, 3.0])
    mean = np.array([1.0, 1.0])
    a = np.array([0.5, -2.0])
    samples = np.stack([mean + a, mean - a])
    assert np.array_equal(covariance_adapt(cov, mean, [0.5, 0.5], samples, 0.0), cov)
    got = covariance_adapt(cov, mean, [0.5, 0.5], samples, 1.0)
    assert np.allclose(got, np.outer(a, a) + 1e-8 * np.eye(2), atol=1e-15)
    with pytest.raises(ValueError):
        covariance_adapt(cov, mean, [0.5, 0.5], samples, 1.5)


def test_covariance_stays_spd():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = int(rng.integers(2, 8))
        S = rng.standard_normal((3, d))
        mean = rng.standard_normal(d)
        cov = covariance_adapt(np.eye(d), mean, softmax_weights(rng.standard_normal(3), 0.1), S + mean,
                               float(rng.uniform()))
        assert np.linalg.eigvalsh(cov).min() > 0


# --- shifts ---

def test_standard_shift_examples():
    seq = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(shift_standard(seq), [[3, 4], [5, 6], [0, 0]])
    assert np.array_equal(shift_standard(seq.ravel(), 2), [3, 4, 5, 6, 0, 0])
    assert np.array_equal(shift_standard(np.zeros((3, 2))), np.zeros((3, 2)))
    x = seq
    for _ in range(3):
        x = shift_standard(x)
    assert np.array_equal(x, np.zeros((3, 2)))


def test_learned_shift_examples():
    mu = np.linspace(-1, 1, 6)
    out, _ = shift_learned(ShiftModel("mlp", 6, hidden=8), mu)
    assert np.array_equal(out, np.zeros(6))
    out, _ = shift_learned(ShiftModel("identity", 6), mu)
    assert np.array_equal(out, mu)
    with pytest.raises(DimensionError):
        shift_learned(ShiftModel("mlp", 6, hidden=8), np.zeros(5))
    with pytest.raises(ConfigurationError):
        ShiftModel("gru", 6)


@pytest.mark.parametrize("variant", ["mlp", "lstm"])
def test_learned_shift_parameter_gradient(variant):
    rng = np.random.default_rng(3)
    model = ShiftModel(variant, 4, hidden=5, seed=1, zero_output=False)
    mus = rng.standard_normal((3, 4))
    gs = rng.standard_normal((3, 4))

    def loss(values):
        m = ShiftModel(variant, 4, hidden=5, params=type(model.params)(model.params.layout, values))
        state, total = m.init_state(), 0.0
        for mu, g in zip(mus, gs):
            out, state, _ = m.forward(mu, state)
            total += g @ out
        return total

    state, caches = model.init_state(), []
    for mu in mus:
        _, state, cache = model.forward(mu, state)
        caches.append(cache)
    grad = model.params.zeros_like()
    g_state = None
    for cache, g in zip(reversed(caches), reversed(gs)):
        _, g_state = model.backward(cache, g, g_state, grad)
    fd = central_difference(loss, model.params.values)
    assert rel_err(grad.values, fd) <= 1e-5


def test_shift_checkpoint_round_trip(tmp_path):
    m = ShiftModel("lstm", 4, hidden=3, seed=2, zero_output=False)
    m.save(tmp_path / "s.ckpt")
    back = ShiftModel.load(tmp_path / "s.ckpt")
    assert np.array_equal(back.params.values, m.params.values)


# --- controllers ---

def test_flowmppi_rejects_odd_samples():
    flow = FlowModel(FlowConfig(dim=4, n_blocks=1, hidden=4))
    with pytest.raises(ConfigurationError):
        FlowMPPI(flow, FlowMPPIConfig(horizon=2, n_samples=7), 2)


def test_flowmppi_zero_penalty_leaves_flow_costs():
    flow = FlowModel(FlowConfig(dim=4, n_blocks=1, hidden=4))
    prob = Quadratic(np.ones(4))
    a = FlowMPPI(flow, FlowMPPIConfig(horizon=2, n_samples=8, penalty=0.0), 2)
    batch = a.optimize(prob, None)
    assert np.array_equal(batch.costs, prob.rollout_costs(None, batch.controls))
    b = FlowMPPI(flow, FlowMPPIConfig(horizon=2, n_samples=8, penalty=1.0), 2)
    pen = b.optimize(prob, None)
    assert np.all(pen.costs[:4] >= batch.costs[:4]) and np.array_equal(pen.costs[4:], batch.costs[4:])


def test_select_action_identity_and_bounds():
    flow = FlowModel(FlowConfig(dim=6, n_blocks=0, hidden=4))
    nf = NFMPC(flow, ShiftModel("identity", 6), NFMPCConfig(horizon=3, n_samples=4), 2)
    mu = np.arange(6.0)
    assert np.array_equal(select_action(nf, mu), [0.0, 1.0])
    bounded = FlowModel(FlowConfig(dim=6, n_blocks=2, hidden=4, lower=(-10.0,) * 2, upper=(10.0,) * 2),
                        seed=4)
    nb = NFMPC(bounded, ShiftModel("identity", 6), NFMPCConfig(horizon=3, n_samples=4), 2,
               (np.full(2, -10.0), np.full(2, 10.0)))
    rng = np.random.default_rng(0)
    mus = 30 * rng.standard_normal((10_000, 6))
    first = bounded.push(mus).output[:, :2]
    assert np.all((first > -10) & (first < 10))
    for m in mus[:50]:
        assert np.all(np.abs(select_action(nb, m, deterministic=False)) <= 10)


def test_stochastic_selection_reproducible():
    flow = FlowModel(FlowConfig(dim=4, n_blocks=1, hidden=4), seed=1)
    acts = []
    for _ in range(2):
        nf = NFMPC(flow, ShiftModel("identity", 4), NFMPCConfig(horizon=2, n_samples=4, deterministic=False), 2)
        nf.reset(seed=5)
        acts.append([nf.select_action(np.zeros(4), None)[0] for _ in range(3)])
    assert np.array_equal(acts[0], acts[1])


def _quadratic_nfmpc(n=1024):
    flow = FlowModel(FlowConfig(dim=4, n_blocks=0, hidden=4))
    cfg = NFMPCConfig(horizon=2, n_samples=n, beta=1.0, gamma=1.0, normalize_costs=False)
    return NFMPC(flow, ShiftModel("identity", 4), cfg, 2)


def test_warm_start_reaches_quadratic_minimizer():
    target = np.array([1.5, -2.0, 0.5, 3.0])
    nf = _quadratic_nfmpc()
    theta = warm_start(nf, Quadratic(target), None, iterations=100)
    assert np.max(np.abs(theta.mean - target)) < 1e-2
    again = _quadratic_nfmpc()
    assert np.array_equal(warm_start(again, Quadratic(target), None, 100).mean, theta.mean)


def test_warm_start_single_iteration_is_one_update():
    prob = Quadratic(np.ones(4))
    a, b = _quadratic_nfmpc(16), _quadratic_nfmpc(16)
    theta = warm_start(a, prob, None, iterations=1)
    _, mu = b.optimize(prob, None)
    assert np.array_equal(theta.mean, mu)
    with pytest.raises(ValueError):
        warm_start(a, prob, None, iterations=0)


def test_mppi_warm_start_and_determinism():
    prob = Quadratic(np.array([1.0, 2.0, -1.0, 0.0]))
    runs = []
    for _ in range(2):
        m = GaussianMPPI(MPPIConfig(horizon=2, n_samples=64, beta=0.5, init_cov=1.0, normalize_costs=False), 2)
        m.reset(seed=3)
        runs.append(warm_start(m, prob, None, 20).mean)
    assert np.array_equal(runs[0], runs[1])
    assert np.linalg.norm(runs[0] - prob.target) < np.linalg.norm(prob.target)


def test_nfmpc_dimension_checks():
    flow = FlowModel(FlowConfig(dim=4, n_blocks=1, hidden=4))
    with pytest.raises(DimensionError):
        NFMPC(flow, ShiftModel("identity", 4), NFMPCConfig(horizon=3, n_samples=4), 2)
    with pytest.raises(DimensionError):
        NFMPC(flow, ShiftModel("identity", 6), NFMPCConfig(horizon=2, n_samples=4), 2)

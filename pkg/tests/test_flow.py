import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nfmpc.controller import LatentGaussian
from nfmpc.diffnet import DimensionError
from nfmpc.flow import (
    FlowConfig,
    FlowDomainError,
    FlowModel,
    SigmoidLayer,
    block_masks,
    coupling_forward,
    coupling_inverse,
    flow_push,
    log_likelihood,
    log_likelihood_grad,
    sigmoid_forward,
    sigmoid_inverse,
)
from nfmpc.oracles import central_difference, fd_jacobian, log_abs_det_fd, rel_err

seeds = st.integers(0, 2**31 - 1)


def random_flow(rng, dim, context_dim=0, bounds=None, scale=0.3, n_blocks=3):
    lo, hi = bounds if bounds is not None else (None, None)
    flow = FlowModel(FlowConfig(dim=dim, context_dim=context_dim, n_blocks=n_blocks, hidden=8,
                                lower=lo, upper=hi), seed=int(rng.integers(1 << 30)))
    flow.params.values[:] += scale * rng.standard_normal(len(flow.params))
    return flow


def test_masks_alternate_and_partition():
    masks = block_masks(5, 4)
    for k, (keep, change) in enumerate(masks):
        assert sorted(np.concatenate([keep, change])) == list(range(5))
        assert keep.size and change.size
        if k:
            assert np.array_equal(keep, masks[k - 1][1])


def test_zero_initialised_flow_is_identity(rng):
    flow = FlowModel(FlowConfig(dim=6, context_dim=2, hidden=16))
    z = rng.standard_normal((4, 6))
    ev = flow_push(flow, z, rng.standard_normal(2))
    assert np.array_equal(ev.output, z)
    assert np.array_equal(ev.log_det, np.zeros(4))


def test_coupling_hand_example():
    flow = FlowModel(FlowConfig(dim=2, n_blocks=1, hidden=4))
    block = flow.blocks[0]
    s0, t0 = 0.3, -1.2
    last = block.scale_spec.n_layers - 1
    flow.params[f"b0.s.{last}.b"][:] = math.atanh(s0)
    flow.params[f"b0.t.{last}.b"][:] = t0
    ev = coupling_forward(block, np.array([0.7, 2.0]))
    assert ev.output[0] == 0.7
    assert ev.output[1] == pytest.approx(2.0 * math.exp(s0) + t0, abs=1e-14)
    assert ev.log_det == pytest.approx(s0, abs=1e-15)
    back = coupling_inverse(block, ev.output)
    assert np.max(np.abs(back.output - [0.7, 2.0])) <= 1e-12
    assert back.log_det == pytest.approx(-s0, abs=1e-15)


def test_context_width_checked(rng):
    flow = FlowModel(FlowConfig(dim=4, context_dim=3, hidden=4))
    with pytest.raises(DimensionError):
        flow.push(np.zeros(4), np.zeros(2))
    with pytest.raises(DimensionError):
        flow.push(np.zeros(4))
    with pytest.raises(DimensionError):
        flow.push(np.zeros(5), np.zeros(3))


@given(seeds, st.integers(2, 7), st.booleans())
def test_round_trip_and_log_det_antisymmetry(seed, dim, bounded):
    rng = np.random.default_rng(seed)
    flow = random_flow(rng, dim, 2, ((-1.0,), (2.0,)) if bounded else None)
    c = rng.standard_normal(2)
    z = rng.standard_normal((6, dim))
    fwd = flow.push(z, c)
    back = flow.pull(fwd.output, c)
    assert np.max(np.abs(back.output - z)) <= 1e-9
    assert np.max(np.abs(fwd.log_det + back.log_det)) <= 1e-9
    if not bounded:
        u = rng.standard_normal((6, dim))
        again = flow.push(flow.pull(u, c).output, c).output
        assert np.max(np.abs(again - u)) <= 1e-9


@given(seeds, st.integers(2, 6))
def test_log_det_matches_brute_force_jacobian(seed, dim):
    rng = np.random.default_rng(seed)
    flow = random_flow(rng, dim, 1, ((-3.0,), (4.0,)))
    c = rng.standard_normal(1)
    z = rng.standard_normal(dim)
    assert rel_err(flow.push(z, c).log_det, log_abs_det_fd(lambda v: flow.push(v, c).output, z)) <= 1e-5
    u = flow.push(z, c).output
    assert rel_err(flow.pull(u, c).log_det, log_abs_det_fd(lambda v: flow.pull(v, c).output, u)) <= 1e-5


def test_inverse_matches_numerical_inversion(rng):
    """Solve push(z) = u by Newton iterations with a finite-difference Jacobian."""
    flow = random_flow(rng, 6, 0)
    u = rng.standard_normal(6)
    z = np.zeros(6)
    for _ in range(50):
        r = flow.push(z).output - u
        z = z - np.linalg.solve(fd_jacobian(lambda v: flow.push(v).output, z), r)
    assert np.max(np.abs(flow.pull(u).output - z)) <= 1e-7


def test_sigmoid_examples():
    unit = SigmoidLayer(np.zeros(1), np.ones(1))
    ev = sigmoid_forward(unit, np.zeros(1))
    assert ev.output[0] == 0.5
    assert ev.log_det == pytest.approx(math.log(0.25), abs=1e-15)
    assert sigmoid_inverse(unit, np.array([0.5])).output[0] == 0.0
    with pytest.raises(FlowDomainError):
        sigmoid_inverse(unit, np.array([1.0]))
    with pytest.raises(FlowDomainError):
        sigmoid_inverse(unit, np.array([-0.2]))
    assert 0 < sigmoid_inverse(unit, np.array([1.0]), tolerant=True).output[0] < 1e3


def test_sigmoid_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        SigmoidLayer(np.ones(2), np.zeros(2))


@given(seeds)
def test_sigmoid_round_trip_and_log_dets(seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-5, 0, 2)
    layer = SigmoidLayer(lo, lo + rng.uniform(0.5, 5, 2))
    x = rng.uniform(-10, 10, 4)
    fwd = sigmoid_forward(layer, x)
    assert np.max(np.abs(sigmoid_inverse(layer, fwd.output).output - x)) <= 1e-9
    x = rng.uniform(-4, 4, 4)
    assert rel_err(sigmoid_forward(layer, x).log_det,
                   log_abs_det_fd(lambda v: sigmoid_forward(layer, v).output, x)) <= 1e-7
    u = sigmoid_forward(layer, x).output
    assert rel_err(sigmoid_inverse(layer, u).log_det,
                   log_abs_det_fd(lambda v: sigmoid_inverse(layer, v).output, u)) <= 1e-7


def test_pushed_samples_stay_strictly_inside_bounds(rng):
    flow = random_flow(rng, 4, 0, ((-10.0, -1.0), (10.0, 1.0)), scale=1.0)
    u = flow.push(10 * rng.standard_normal((10_000, 4))).output
    w, b = flow.sigmoid.expand(4)
    assert np.all(u > b) and np.all(u < b + w)
    flow.pull(u)  # strict pull accepts every pushed sample


def test_log_likelihood_standard_normal_at_origin():
    flow = FlowModel(FlowConfig(dim=2, hidden=4))
    theta = LatentGaussian(np.zeros(2), np.ones(2))
    assert log_likelihood(flow, theta, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-15)


def test_density_integrates_to_one_in_one_dimension(rng):
    """Integrate the first marginal of a 2-D flow with a factorised identity second coordinate."""
    flow = random_flow(rng, 2, 0, ((-2.0,), (3.0,)), scale=0.5, n_blocks=1)
    # block 0 keeps index 0 and transforms index 1; integrate the joint on a grid
    theta = LatentGaussian(np.zeros(2), np.ones(2))
    g0 = np.linspace(-2 + 1e-9, 3 - 1e-9, 1501)
    g1 = np.linspace(-2 + 1e-9, 3 - 1e-9, 1501)
    U = np.stack(np.meshgrid(g0, g1, indexing="ij"), axis=-1).reshape(-1, 2)
    dens = np.exp(log_likelihood(flow, theta, U)).reshape(1501, 1501)
    total = np.trapezoid(np.trapezoid(dens, g1, axis=1), g0)
    assert abs(total - 1.0) <= 1e-4


def test_change_of_variables(rng):
    flow = random_flow(rng, 4, 2, ((-2.0,), (2.0,)))
    c = rng.standard_normal(2)
    theta = LatentGaussian(rng.standard_normal(4), np.full(4, 0.7))
    z = theta.mean + rng.standard_normal(4)
    u = flow.push(z, c).output
    logp_z = -0.5 * np.sum((z - theta.mean) ** 2 / 0.7 + np.log(0.7) + math.log(2 * math.pi))
    expected = logp_z - log_abs_det_fd(lambda v: flow.push(v, c).output, z)
    assert rel_err(log_likelihood(flow, theta, u, c), expected) <= 1e-5


@given(seeds)
def test_log_likelihood_gradient(seed):
    rng = np.random.default_rng(seed)
    flow = random_flow(rng, 3, 1, ((-2.0,), (2.0,)))
    c = rng.standard_normal(1)
    theta = LatentGaussian(rng.standard_normal(3), rng.uniform(0.5, 2, 3))
    u = flow.push(rng.standard_normal((2, 3)), c).output
    rec = log_likelihood_grad(flow, theta, u, c, coef=[0.7, -1.3])
    base = flow.params.values.copy()

    def f(v):
        flow.params.values[:] = v
        out = float(np.array([0.7, -1.3]) @ log_likelihood(flow, theta, u, c))
        flow.params.values[:] = base
        return out

    idx = rng.choice(len(base), 30, replace=False)
    assert rel_err(rec.params.values[idx], central_difference(f, base, idx)) <= 1e-5
    fm = lambda m: float(np.array([0.7, -1.3]) @ log_likelihood(flow, LatentGaussian(m, theta.cov), u, c))
    assert rel_err(rec.input, central_difference(fm, theta.mean)) <= 1e-5


def test_push_backward_matches_finite_differences(rng):
    flow = random_flow(rng, 4, 2, ((-1.0,), (1.0,)))
    c = rng.standard_normal(2)
    z = rng.standard_normal((2, 4))
    gu, gld = rng.standard_normal((2, 4)), rng.standard_normal(2)
    _, cache = flow.push(z, c, with_cache=True)
    rec = flow.push_backward(cache, gu, gld)

    def f(v):
        ev = flow.push(v.reshape(2, 4), c)
        return float(np.sum(gu * ev.output) + gld @ ev.log_det)

    assert rel_err(rec.input.ravel(), central_difference(f, z.ravel())) <= 1e-5


def test_checkpoint_round_trip(tmp_path, rng):
    flow = random_flow(rng, 4, 2, ((-1.0, -2.0), (1.0, 2.0)))
    flow.save(tmp_path / "f.ckpt")
    again = FlowModel.load(tmp_path / "f.ckpt")
    z = rng.standard_normal(4)
    c = rng.standard_normal(2)
    assert np.array_equal(again.push(z, c).output, flow.push(z, c).output)
    assert again.config == flow.config

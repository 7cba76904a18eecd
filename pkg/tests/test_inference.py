import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amortize.data import make_linear_gaussian
from amortize.inference import (ContractError, IterativeModel, StandardEncoder, gated_update,
                                init_lambda, iterative_infer, iterative_step, optimizer_infer,
                                preprocess_gradient, standard_infer, standard_trajectory)
from amortize.mathcore import ConfigError, Layer, Mlp, make_rng
from amortize.model import DiagGaussian, GenerativeModel, PosteriorEstimate, draw_noises, evaluate

from oracles import random_setup


def scalar_linear_model():
    # x | z ~ N(z, 1), z ~ N(0, 1)
    dec = Mlp([Layer(np.array([[1.0]]), np.zeros(1), "identity")])
    return GenerativeModel(dec, "gaussian", np.zeros(1), top_prior=DiagGaussian.standard(1))


def mnistish_model(seed=0, dims=(3,), output="bernoulli"):
    return GenerativeModel.build(6, list(dims), [5], output, make_rng(seed))


# -- preprocessing and gating ---------------------------------------------------

@pytest.mark.parametrize("g, expected", [
    (0.0, [np.log(1e-6), 0.0]),
    (1.0, [np.log(1 + 1e-6), 1.0]),
    (-np.e, [np.log(np.e + 1e-6), -1.0]),
])
def test_preprocess_examples(g, expected):
    np.testing.assert_allclose(preprocess_gradient(np.array([g])), expected, rtol=0, atol=1e-15)


def test_preprocess_log_of_floor():
    assert preprocess_gradient(np.zeros(1))[0] == pytest.approx(-13.815510557964274, abs=1e-12)
    assert preprocess_gradient(np.ones(1))[0] == pytest.approx(1e-6, abs=1e-12)
    assert preprocess_gradient(np.array([-np.e]))[0] == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8), st.floats(0.1, 3))
def test_preprocess_magnitude_even_sign_odd(v, alpha):
    g = np.array(v)
    a, b = preprocess_gradient(g, alpha), preprocess_gradient(-g, alpha)
    n = g.size
    np.testing.assert_array_equal(a[:n], b[:n])
    np.testing.assert_array_equal(a[n:], -b[n:])


def test_preprocess_rejects_non_positive_floor():
    with pytest.raises(ConfigError):
        preprocess_gradient(np.ones(2), eps_ln=0.0)


@pytest.mark.parametrize("gate, expected", [(1.0, 1.0), (0.0, 5.0), (0.5, 3.0)])
def test_gated_update_examples(gate, expected):
    assert gated_update(np.array(1.0), np.array(5.0), np.array(gate)) == expected


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0, 1))
def test_gated_update_stays_between(old, new, gate):
    out = float(gated_update(np.array(old), np.array(new), np.array(gate)))
    lo, hi = min(old, new), max(old, new)
    assert lo - 1e-9 <= out <= hi + 1e-9


# -- initial estimates ----------------------------------------------------------

def test_init_modes():
    model = mnistish_model(dims=(3, 2))
    model.top_prior = DiagGaussian(np.array([0.5, -1.0]), np.array([0.2, 0.3]))
    z = init_lambda(model, 4, "zeros")
    assert all(np.array_equal(c, np.zeros_like(c)) for c in z.components())
    p = init_lambda(model, 4, "prior")
    np.testing.assert_array_equal(p.means[1], np.tile([0.5, -1.0], (4, 1)))
    np.testing.assert_array_equal(p.log_vars[1], np.tile([0.2, 0.3], (4, 1)))
    np.testing.assert_allclose(p.means[0], model.prior_decoders[0](p.means[1]))
    c = init_lambda(model, 3, "learned_constant", constant=[np.ones(3), np.zeros(3), np.ones(2), np.zeros(2)])
    assert c.means[1].shape == (3, 2) and np.all(c.means[0] == 1)
    with pytest.raises(ConfigError):
        init_lambda(model, 3, "learned_constant")
    with pytest.raises(ConfigError):
        init_lambda(model, 3, "random")


# -- standard encoder -------------------------------------------------------------

def test_zero_weight_encoder_outputs_zero():
    model = mnistish_model()
    enc = StandardEncoder.build(model, [4], make_rng(1))
    for p in enc.params():
        p[:] = 0
    lam = standard_infer(enc, make_rng(2).random((3, 6)))
    assert all(np.array_equal(c, np.zeros((3, 3))) for c in lam.components())


def test_encoder_is_stateless():
    model = mnistish_model()
    enc = StandardEncoder.build(model, [4], make_rng(1))
    x = make_rng(2).random((3, 6))
    a = standard_infer(enc, x)
    standard_infer(enc, make_rng(3).random((5, 6)))
    b = standard_infer(enc, x)
    assert all(np.array_equal(u, v) for u, v in zip(a.components(), b.components()))


def data_only_copy(model, enc, gated):
    """An iterative model reading only x whose weights on lam are zero."""
    it = IterativeModel.build(model, [4], make_rng(9), ["data"], "none", gated=gated)
    first, last = it.nets[0].layers
    first.weights[:] = 0
    first.weights[:model.n_x] = enc.trunks[0].layers[0].weights
    first.bias[:] = enc.trunks[0].layers[0].bias
    n_out = enc.heads[0].n_out
    last.weights[:, :n_out] = enc.heads[0].layers[0].weights
    last.bias[:n_out] = enc.heads[0].layers[0].bias
    if gated:
        last.weights[:, n_out:] = 0
        last.bias[n_out:] = 0.0  # every gate is one half
    return it


@pytest.mark.parametrize("gated", [False, True])
def test_encoder_equals_data_only_iterative_model(gated):
    model = mnistish_model()
    enc = StandardEncoder.build(model, [4], make_rng(1))
    x = make_rng(2).random((3, 6))
    it = data_only_copy(model, enc, gated)
    want = standard_infer(enc, x)
    lam = it.initial(model, 3)
    lam.means[0] += 7.0
    got = iterative_step(it, lam, x=x)
    for a, b, c in zip(got.components(), want.components(), lam.components()):
        expected = 0.5 * c + 0.5 * b if gated else b
        np.testing.assert_allclose(a, expected, rtol=0, atol=1e-12)


def test_standard_trajectory_has_two_records():
    model = mnistish_model()
    enc = StandardEncoder.build(model, [4], make_rng(1))
    traj = standard_trajectory(enc, model, make_rng(2).random((3, 6)), 1, make_rng(3))
    assert len(traj) == 2 and traj.final is not None


# -- optimizer inference ------------------------------------------------------------

def test_sgd_single_step_by_hand():
    model = scalar_linear_model()
    lam = PosteriorEstimate([np.zeros((1, 1))])
    traj = optimizer_infer("sgd", 0.1, model, np.array([[2.0]]), lam, 1, 1, make_rng(0))
    assert traj.final.means[0][0, 0] == pytest.approx(0.2, abs=1e-15)
    # the gradient at 0 is (x - z) - z = 2
    assert traj.records[0].grad_norm_mean[0] == pytest.approx(2.0, abs=1e-15)


@pytest.mark.parametrize("kind", ["sgd", "momentum", "rmsprop", "adam"])
def test_zero_lr_gives_constant_trajectory(kind):
    prob = make_linear_gaussian(3, 6, seed=2, n_examples=4)
    model = prob.model()
    noise = draw_noises(model, 4, 3, make_rng(5))
    traj = optimizer_infer(kind, 0.0, model, prob.xs, init_lambda(model, 4), 10, 1, make_rng(1),
                           eval_noise=noise)
    assert len(traj) == 11
    e = traj.mean_elbo()
    assert np.all(e == e[0])


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("kind", ["sgd", "momentum", "rmsprop", "adam"])
def test_small_lr_is_monotone_on_oracle(kind, seed):
    prob = make_linear_gaussian(4, 10, seed=seed, n_examples=8)
    model = prob.model()
    # the two-point noise set makes every ELBO and gradient the exact expectation
    traj = optimizer_infer(kind, 1e-3, model, prob.xs, init_lambda(model, 8), 200, 2, None,
                           fixed_noises=prob.expectation_noises(8))
    e = np.array([r.elbo for r in traj.records])
    assert np.all(np.diff(e, axis=0) >= -1e-9)
    assert np.all(e[-1] > e[0])


def test_adam_recovers_exact_posterior_with_expectation_noise():
    prob = make_linear_gaussian(3, 8, seed=4, n_examples=5)
    model = prob.model()
    traj = optimizer_infer("adam", 0.1, model, prob.xs, init_lambda(model, 5), 500, 2, None,
                           fixed_noises=prob.expectation_noises(5))
    np.testing.assert_allclose(traj.final.means[0], prob.posterior_mean, atol=1e-8)
    np.testing.assert_allclose(np.exp(traj.final.log_vars[0]), prob.posterior_var, rtol=1e-7)


def test_divergence_truncates_trajectory():
    model = scalar_linear_model()
    lam = PosteriorEstimate([np.zeros((1, 1))])
    with np.errstate(all="ignore"):
        traj = optimizer_infer("sgd", 1e200, model, np.array([[2.0]]), lam, 20, 1, make_rng(0))
    assert traj.diverged_at is not None
    assert len(traj) == traj.diverged_at
    assert "stopped" in traj.diagnostic


def test_optimizer_rejects_bad_arguments():
    model = scalar_linear_model()
    lam = PosteriorEstimate([np.zeros((1, 1))])
    with pytest.raises(ConfigError):
        optimizer_infer("sgd", 0.1, model, np.ones((1, 1)), lam, 0, 1, make_rng(0))
    with pytest.raises(ConfigError):
        optimizer_infer("sgd", -0.1, model, np.ones((1, 1)), lam, 1, 1, make_rng(0))
    with pytest.raises(ConfigError):
        optimizer_infer("newton", 0.1, model, np.ones((1, 1)), lam, 1, 1, make_rng(0))


# -- iterative model -----------------------------------------------------------------

@pytest.mark.parametrize("encoding, kwargs", [
    (["gradients"], {"x": np.ones((2, 6))}),
    (["errors"], {"x": np.ones((2, 6))}),
    (["data"], {}),
])
def test_missing_inputs_raise_contract_error(encoding, kwargs):
    model = mnistish_model()
    it = IterativeModel.build(model, [4], make_rng(1), encoding)
    with pytest.raises(ContractError):
        it.step(it.initial(model, 2), **kwargs)


@pytest.mark.parametrize("T", [1, 4])
@pytest.mark.parametrize("point", [False, True])
def test_trajectory_has_T_plus_one_records(T, point):
    model = mnistish_model()
    it = IterativeModel.build(model, [4], make_rng(1), point=point)
    x = (make_rng(2).random((3, 6)) < 0.5).astype(float)
    traj = iterative_infer(it, model, x, T, 1, make_rng(3))
    assert [r.t for r in traj.records] == list(range(T + 1))


def test_iterative_inference_is_deterministic():
    model = mnistish_model(dims=(3, 2))
    it = IterativeModel.build(model, [4], make_rng(1), ["gradients", "errors"])
    x = (make_rng(2).random((3, 6)) < 0.5).astype(float)
    a = iterative_infer(it, model, x, 3, 2, make_rng(4), accumulate_phi=True, theta="final")
    b = iterative_infer(it, model, x, 3, 2, make_rng(4), accumulate_phi=True, theta="final")
    assert np.array_equal(a.mean_elbo(), b.mean_elbo())
    assert all(np.array_equal(u, v) for u, v in zip(a.phi_grads, b.phi_grads))
    assert all(np.array_equal(u, v) for u, v in zip(a.theta_grads, b.theta_grads))


def test_network_sizes_follow_encoding():
    model = mnistish_model(dims=(3, 2))
    it = IterativeModel.build(model, [4], make_rng(1), ["gradients", "errors", "data"], "log_transform")
    # level 0: 2 gradient blocks of 3, errors of 6 and 3, all doubled; x (6); lam (6)
    assert it.input_size(0) == 2 * (3 + 3 + 6 + 3) + 6 + 6
    assert it.output_size(0) == 12
    ungated = IterativeModel.build(model, [4], make_rng(1), ["gradients"], "none", gated=False, point=True)
    assert ungated.input_size(1) == 2 + 2 and ungated.output_size(1) == 2


def test_gate_bias_starts_near_keeping_the_estimate():
    model = mnistish_model()
    it = IterativeModel.build(model, [4], make_rng(1))
    assert np.all(it.nets[0].layers[-1].bias[6:] == 2.0)


def test_mismatched_network_is_config_error():
    model = mnistish_model()
    it = IterativeModel.build(model, [4], make_rng(1), ["gradients"])
    with pytest.raises(ConfigError):
        IterativeModel(it.nets, model.latent_dims, model.n_x, ["gradients", "data"])


PHI_CASES = [
    ("gaussian", [3], ["gradients"], "log_transform", True, False),
    ("bernoulli", [3, 2], ["gradients"], "layer_norm", True, False),
    ("gaussian", [3, 2], ["errors", "data"], "layer_norm", False, False),
    ("bernoulli", [2], ["errors", "data"], "none", True, True),
    ("gaussian", [4, 2], ["gradients", "errors"], "log_transform", True, False),
]


@pytest.mark.parametrize("output, dims, encoding, prep, gated, point", PHI_CASES)
def test_step_parameter_gradients_match_finite_differences(output, dims, encoding, prep, gated, point):
    model, x, lam, n0 = random_setup(1, output, dims, n_x=6, batch=3, point=point)
    it = IterativeModel.build(model, [7], make_rng(2), encoding, prep, gated, point)
    n1 = draw_noises(model, 3, 2, make_rng(3))
    ev0 = evaluate(model, x, lam, n0, "analytic", need_grads=True, need_errors=True)

    def after_step():
        nxt, cache = it.step(lam, ev0.grads, ev0.errors, x)
        return evaluate(model, x, nxt, n1, "analytic", need_grads=True), cache

    ev1, cache = after_step()
    grads = it.backward(cache, ev1.grads)
    h = 1e-5
    for p, g in zip(it.params(), grads):
        for idx in list(np.ndindex(p.shape))[:6]:
            old = p[idx]
            p[idx] = old + h
            up = after_step()[0].elbo.total.sum()
            p[idx] = old - h
            dn = after_step()[0].elbo.total.sum()
            p[idx] = old
            fd = (up - dn) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-5 * max(1.0, abs(fd)), (idx, fd, g[idx])


def test_encoder_parameter_gradients_match_finite_differences():
    model = mnistish_model(3, dims=(3, 2))
    enc = StandardEncoder.build(model, [7], make_rng(4))
    x = (make_rng(5).random((3, 6)) > 0.5).astype(float)
    noise = draw_noises(model, 3, 2, make_rng(6))

    def run():
        lam, cache = enc.infer(x)
        return evaluate(model, x, lam, noise, "analytic", need_grads=True), cache

    ev, cache = run()
    grads = enc.backward(cache, ev.grads)
    h = 1e-5
    for p, g in zip(enc.params(), grads):
        for idx in list(np.ndindex(p.shape))[:6]:
            old = p[idx]
            p[idx] = old + h
            up = run()[0].elbo.total.sum()
            p[idx] = old - h
            dn = run()[0].elbo.total.sum()
            p[idx] = old
            fd = (up - dn) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-5 * max(1.0, abs(fd))


def test_accumulated_phi_is_sum_of_step_gradients():
    model = mnistish_model()
    it = IterativeModel.build(model, [4], make_rng(1))
    x = (make_rng(2).random((3, 6)) < 0.5).astype(float)
    traj = iterative_infer(it, model, x, 3, 1, make_rng(7), accumulate_phi=True)
    # replay with the same noise stream, one step at a time
    rng = make_rng(7)
    lam = it.initial(model, 3)
    total = [np.zeros_like(p) for p in it.params()]
    cache = None
    for t in range(4):
        ev = evaluate(model, x, lam, draw_noises(model, 3, 1, rng), "analytic", need_grads=True)
        if cache is not None:
            for a, g in zip(total, it.backward(cache, ev.grads)):
                a += g
        if t < 3:
            lam, cache = it.step(lam, ev.grads)
    for a, b in zip(traj.phi_grads, total):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

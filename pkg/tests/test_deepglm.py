import itertools

import numpy as np
import pytest

from nagvac.deepglm import (
    ModelParams,
    NetworkSpec,
    ParamLayout,
    ShrinkageState,
    assemble_h,
    forward,
    log_prior_and_grad,
    loglik_and_grad,
    update_shrinkage,
)
from nagvac.errors import ConfigurationError, DataError, InputError
from nagvac.factor_gaussian import FactorGaussian


def _fd(fun, theta, h=1e-6):
    return np.array([(fun(theta + h * e) - fun(theta - h * e)) / (2 * h) for e in np.eye(theta.size)])


def _responses(family, rng, n):
    if family == "binomial":
        return rng.integers(0, 2, n).astype(float)
    if family == "poisson":
        return rng.poisson(2.0, n).astype(float)
    return rng.standard_normal(n)


def _naive_eta(spec, params, x):
    """Straightforward per-unit loop evaluation of one covariate vector."""
    a = list(x[spec.network_indices])
    for W, b in zip(params.weights, params.biases):
        a = [max(0.0, sum(W[k, j] * a[j] for j in range(len(a))) + b[k]) for k in range(W.shape[0])]
    eta = params.beta0 + sum(bt * z for bt, z in zip(params.beta_tilde, a))
    for coef, j in zip(params.beta_lin, spec.linear_part_indices):
        eta += coef * x[j]
    return eta


# ---------------------------------------------------------------- layout


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        NetworkSpec((3, 2))
    with pytest.raises(ConfigurationError):
        NetworkSpec((3,))
    with pytest.raises(ConfigurationError):
        NetworkSpec((3, 1), family="gamma")
    with pytest.raises(ConfigurationError):
        NetworkSpec((2, 1), linear_part_indices=(0, 0), n_covariates=4)
    with pytest.raises(ConfigurationError):
        NetworkSpec((2, 1), linear_part_indices=(5,), n_covariates=3)


def test_index_sets_partition_theta():
    for spec in (NetworkSpec((4, 3, 2, 1), "gaussian"), NetworkSpec((3, 2, 1), linear_part_indices=(1,), n_covariates=4)):
        lay = ParamLayout(spec)
        groups = np.concatenate(lay.groups)
        allidx = np.concatenate([groups, lay.ridge_idx, lay.bias_idx])
        others = [] if lay.disp_idx is None else [lay.disp_idx]
        assert sorted(allidx.tolist() + others) == list(range(lay.n_theta))
        assert len(lay.groups) == spec.layer_sizes[0]


def test_pack_unpack_round_trip(rng):
    lay = ParamLayout(NetworkSpec((3, 4, 2, 1), "gaussian", linear_part_indices=(3,), n_covariates=4))
    theta = rng.standard_normal(lay.n_theta)
    np.testing.assert_array_equal(lay.pack(lay.unpack(theta)), theta)
    with pytest.raises(InputError):
        lay.unpack(theta[:-1])


# --------------------------------------------------------------- forward


def test_forward_all_zero_weights():
    spec = NetworkSpec((3, 2, 1))
    lay = ParamLayout(spec)
    z, eta = forward(spec, lay.unpack(np.zeros(lay.n_theta)), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(z, [0.0, 0.0])
    assert eta == 0.0
    theta = np.zeros(lay.n_theta)
    theta[lay.b_slices[0]] = [-1.0, 2.0]
    z, _ = forward(spec, lay.unpack(theta), np.ones(3))
    np.testing.assert_array_equal(z, [0.0, 2.0])


def test_forward_linear_regime_by_hand():
    spec = NetworkSpec((2, 1, 1))
    params = ModelParams([np.array([[2.0, 3.0]])], [np.array([1.0])], 0.5, np.array([4.0]), np.zeros(0))
    z, eta = forward(spec, params, np.array([1.0, 1.0]))
    assert z[0] == 6.0  # 2 + 3 + 1
    assert eta == 0.5 + 4.0 * 6.0


def test_forward_matches_naive_loop(rng):
    spec = NetworkSpec((4, 5, 3, 1), linear_part_indices=(2, 5), n_covariates=6)
    lay = ParamLayout(spec)
    params = lay.unpack(rng.standard_normal(lay.n_theta))
    X = rng.standard_normal((10, 6))
    _, eta = forward(spec, params, X)
    ref = np.array([_naive_eta(spec, params, x) for x in X])
    np.testing.assert_allclose(eta, ref, rtol=1e-12, atol=1e-12)


def test_forward_dimension_mismatch():
    spec = NetworkSpec((3, 2, 1))
    lay = ParamLayout(spec)
    with pytest.raises(InputError):
        forward(spec, lay.unpack(np.zeros(lay.n_theta)), np.ones(4))


# ------------------------------------------------------------ likelihood


def test_binomial_zero_eta_is_log_half():
    lay = ParamLayout(NetworkSpec((2, 1)))
    y = np.array([0.0, 1.0, 1.0])
    val, _ = loglik_and_grad(lay, np.zeros(lay.n_theta), np.ones((3, 2)), y)
    assert val == pytest.approx(3 * np.log(0.5))


def test_gaussian_perfect_fit():
    lay = ParamLayout(NetworkSpec((1, 1), "gaussian"))
    theta = np.zeros(lay.n_theta)
    theta[lay.beta_tilde_slice] = 2.0
    X = np.array([[1.0], [-0.5]])
    val, _ = loglik_and_grad(lay, theta, X, 2.0 * X[:, 0])
    assert val == pytest.approx(-np.log(2 * np.pi))


@pytest.mark.parametrize("family", ["gaussian", "binomial", "poisson"])
@pytest.mark.parametrize("linear", [False, True])
def test_backprop_matches_finite_differences(family, linear):
    rng = np.random.default_rng(7)
    if linear:
        spec = NetworkSpec((3, 2, 1), family, linear_part_indices=(1,), n_covariates=4)
    else:
        spec = NetworkSpec((3, 2, 1), family)
    lay = ParamLayout(spec)
    X = rng.standard_normal((5, spec.n_covariates))
    y = _responses(family, rng, 5)
    theta = 0.5 * rng.standard_normal(lay.n_theta)
    _, g = loglik_and_grad(lay, theta, X, y)
    fd = _fd(lambda t: loglik_and_grad(lay, t, X, y)[0], theta)
    rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)
    assert np.max(rel) <= 1e-5


def test_scale_multiplies_value_and_gradient(rng):
    lay = ParamLayout(NetworkSpec((2, 3, 1)))
    X, y = rng.standard_normal((4, 2)), np.array([0.0, 1.0, 1.0, 0.0])
    theta = rng.standard_normal(lay.n_theta)
    v1, g1 = loglik_and_grad(lay, theta, X, y)
    v2, g2 = loglik_and_grad(lay, theta, X, y, scale=2.5)
    assert v2 == pytest.approx(2.5 * v1)
    np.testing.assert_allclose(g2, 2.5 * g1)


def test_bad_responses_raise_with_row():
    for family, y in (("binomial", [0.0, 2.0]), ("poisson", [1.0, -1.0]), ("poisson", [0.0, 1.5]), ("gaussian", [0.0, np.nan])):
        lay = ParamLayout(NetworkSpec((1, 1), family))
        with pytest.raises(DataError) as exc:
            loglik_and_grad(lay, np.zeros(lay.n_theta), np.ones((2, 1)), np.array(y))
        assert exc.value.row == 1


def test_relu_kink_consistency():
    spec = NetworkSpec((1, 1, 1), "gaussian")
    lay = ParamLayout(spec)
    theta = np.zeros(lay.n_theta)
    theta[lay.w_slices[0]] = 1.0
    theta[lay.beta_tilde_slice] = 1.0
    X, y = np.array([[0.0]]), np.array([1.0])
    # preactivation exactly 0: subgradient 0 for the first-layer weight
    _, g = loglik_and_grad(lay, theta, X, y)
    assert g[lay.w_slices[0]][0] == 0.0
    X = np.array([[1.0]])
    for b, active in ((1e-3, True), (-1e-3, False)):
        t = theta.copy()
        t[lay.b_slices[0]] = b - 1.0  # preactivation = b
        _, g = loglik_and_grad(lay, t, X, y)
        fd = _fd(lambda u: loglik_and_grad(lay, u, X, y)[0], t, h=1e-7)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)
        assert (g[lay.b_slices[0]][0] != 0.0) == active


# ----------------------------------------------------------------- prior


def _shrink(lay, alpha=None, gamma_w=1.0):
    p = len(lay.groups)
    a = np.ones(p) if alpha is None else np.asarray(alpha, dtype=float)
    return ShrinkageState(np.ones(p), a, np.ones(p), gamma_w, lay.m_first)


def test_prior_at_zero():
    lay = ParamLayout(NetworkSpec((3, 2, 1)))
    val, g = log_prior_and_grad(lay, np.zeros(lay.n_theta), _shrink(lay))
    assert val == 0.0 and np.all(g == 0.0)


def test_prior_single_group_example():
    lay = ParamLayout(NetworkSpec((1, 2, 1)))
    theta = np.zeros(lay.n_theta)
    theta[lay.groups[0]] = [1.0, 1.0]
    val, g = log_prior_and_grad(lay, theta, _shrink(lay, alpha=[2.0]))
    assert val == -2.0
    np.testing.assert_array_equal(g[lay.groups[0]], [-2.0, -2.0])


def test_prior_gradient_finite_differences(rng):
    lay = ParamLayout(NetworkSpec((3, 4, 2, 1), "gaussian"))
    shrink = ShrinkageState(rng.uniform(0.5, 2, 3), rng.uniform(0.5, 2, 3), rng.uniform(0.5, 2, 3), 1.7, lay.m_first)
    theta = rng.standard_normal(lay.n_theta)
    _, g = log_prior_and_grad(lay, theta, shrink, bias_var=10.0)
    fd = _fd(lambda t: log_prior_and_grad(lay, t, shrink, bias_var=10.0)[0], theta)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)
    # flat prior on the log dispersion
    assert g[lay.disp_idx] == 0.0


# ------------------------------------------------------------- shrinkage


def _fg_for(lay, mu, var):
    d = lay.n_theta
    return FactorGaussian(np.full(d, mu) if np.isscalar(mu) else mu, np.zeros((d, 1)), np.sqrt(np.broadcast_to(var, d)))


def test_update_shrinkage_group_example():
    for m in (1, 3, 8):
        lay = ParamLayout(NetworkSpec((1, m, 1)))
        fg = _fg_for(lay, 0.0, 1.0)
        new = update_shrinkage(fg, lay, ShrinkageState.initial(lay))
        assert new.alpha_tau[0] == pytest.approx(1 / np.sqrt(m))
        assert new.beta_tau[0] == pytest.approx(1.0)
        assert new.gamma[0] == pytest.approx(np.sqrt((m + 1) / (np.sqrt(m) + 1)))
    assert new.m_first == m


def test_update_shrinkage_ridge_example():
    # ridge set of a (1, 3, 1) net: the 3 output weights, plus we make a 4th via a second layer
    lay = ParamLayout(NetworkSpec((1, 1, 3, 1)))
    assert lay.ridge_idx.size == 6
    lay = ParamLayout(NetworkSpec((1, 4, 1)))
    assert lay.ridge_idx.size == 4
    fg = _fg_for(lay, 0.0, 0.25)
    new = update_shrinkage(fg, lay, ShrinkageState.initial(lay))
    assert new.gamma_w == pytest.approx(4.0)


def test_update_shrinkage_does_not_mutate_input(rng):
    lay = ParamLayout(NetworkSpec((3, 2, 1)))
    old = ShrinkageState.initial(lay)
    before = old.gamma.copy()
    update_shrinkage(_fg_for(lay, rng.standard_normal(lay.n_theta), 0.3), lay, old)
    np.testing.assert_array_equal(old.gamma, before)


def test_update_shrinkage_scale_consistency():
    # doubling m with E_q[w'w] fixed scales gamma by sqrt((2m + 1) / (m + 1))
    m = 3
    res = {}
    for mm in (m, 2 * m):
        lay = ParamLayout(NetworkSpec((2, mm, 1)))
        var = np.full(lay.n_theta, 1.0)
        var[np.concatenate(lay.groups)] = 1.0 / mm  # E_q[w'w] = 1 per group
        fg = _fg_for(lay, 0.0, var)
        res[mm] = update_shrinkage(fg, lay, ShrinkageState.initial(lay)).gamma
    np.testing.assert_allclose(res[2 * m] / res[m], np.sqrt((2 * m + 1) / (m + 1)), rtol=1e-14)


def test_shrinkage_stays_positive(rng):
    lay = ParamLayout(NetworkSpec((4, 3, 1)))
    state = ShrinkageState.initial(lay)
    for _ in range(50):
        fg = _fg_for(lay, rng.standard_normal(lay.n_theta) * rng.uniform(0, 5), rng.uniform(1e-6, 3))
        state = update_shrinkage(fg, lay, state)
        assert np.all(state.gamma > 0) and np.all(state.alpha_tau > 0) and state.gamma_w > 0
        assert np.all(np.isfinite(state.mean_tau)) and np.all(state.mean_tau > 0)


def test_shrinkage_state_rejects_nonpositive():
    with pytest.raises(ConfigurationError):
        ShrinkageState(np.array([1.0, 0.0]), np.ones(2), np.ones(2), 1.0, 2)
    with pytest.raises(ConfigurationError):
        ShrinkageState(np.ones(2), np.ones(2), np.ones(2), -1.0, 2)


# ------------------------------------------------------------ assemble_h


def test_prior_only_h(rng):
    lay = ParamLayout(NetworkSpec((2, 3, 1)))
    X, y = rng.standard_normal((5, 2)), rng.integers(0, 2, 5).astype(float)
    obj = assemble_h(lay, X, y, likelihood_weight=0.0)
    theta = rng.standard_normal(lay.n_theta)
    v, g = obj(theta)
    pv, pg = log_prior_and_grad(lay, theta, obj.shrink)
    assert v == pv
    np.testing.assert_array_equal(g, pg)


def test_h_is_additive_over_rows(rng):
    lay = ParamLayout(NetworkSpec((2, 3, 1), "poisson"))
    X, y = rng.standard_normal((5, 2)), rng.poisson(1.0, 5).astype(float)
    obj = assemble_h(lay, X, y)
    theta = 0.3 * rng.standard_normal(lay.n_theta)
    v, g = obj(theta)
    pv, pg = log_prior_and_grad(lay, theta, obj.shrink)
    parts = [loglik_and_grad(lay, theta, X[i : i + 1], y[i : i + 1]) for i in range(5)]
    assert v == pytest.approx(pv + sum(p[0] for p in parts), rel=1e-12)
    np.testing.assert_allclose(g, pg + sum(p[1] for p in parts), rtol=1e-12, atol=1e-12)


def test_minibatch_h_is_unbiased(rng):
    lay = ParamLayout(NetworkSpec((2, 2, 1)))
    X, y = rng.standard_normal((5, 2)), np.array([0, 1, 1, 0, 1.0])
    theta = rng.standard_normal(lay.n_theta)
    full = assemble_h(lay, X, y)(theta)
    obj = assemble_h(lay, X, y, batch_size=2)
    vals, grads = [], []
    for idx in itertools.combinations(range(5), 2):
        obj.set_batch(idx)
        v, g = obj(theta)
        vals.append(v)
        grads.append(g)
    assert np.mean(vals) == pytest.approx(full[0], rel=1e-12)
    np.testing.assert_allclose(np.mean(grads, axis=0), full[1], rtol=1e-12, atol=1e-12)


def test_objective_validation():
    lay = ParamLayout(NetworkSpec((2, 1)))
    with pytest.raises(DataError):
        assemble_h(lay, np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(DataError):
        assemble_h(lay, np.zeros((2, 2)), np.array([0.0, 3.0]))

import math

import numpy as np
import pytest

from conftest import ConjugateBLR
from nagvac.deepglm import NetworkSpec, ParamLayout
from nagvac.errors import ConfigurationError, DegenerateLoadingError, DivergenceError
from nagvac.factor_gaussian import FactorGaussian, grad_log_q, log_q
from nagvac.natural_gradient import natgrad_cg
from nagvac.trainer import TrainConfig, init_variational, learning_rate, smoothed_stop, train


# ------------------------------------------------------------------ init


def test_init_bounds_and_constants():
    lay = ParamLayout(NetworkSpec((9, 5, 1)))
    fg = init_variational(lay, 2, np.random.default_rng(0))
    sl, fan_in, fan_out = lay.glorot[0]
    assert (fan_in, fan_out) == (9, 5)
    bound = math.sqrt(6 / 14)
    assert bound == pytest.approx(0.6547, abs=1e-4)
    assert np.all(np.abs(fg.mu[sl]) <= bound)
    assert np.all(fg.mu[lay.bias_idx] == 0.0)
    assert np.all(fg.c == 0.01)
    assert np.all(fg.B[np.triu_indices(2, 1)] == 0.0)
    assert 0.005 < fg.B[np.tril_indices(fg.d, 0, 2)].std() < 0.02


def test_init_is_deterministic():
    lay = ParamLayout(NetworkSpec((4, 3, 1), "gaussian"))
    a = init_variational(lay, 1, np.random.default_rng(3), n_extra=2)
    b = init_variational(lay, 1, np.random.default_rng(3), n_extra=2)
    np.testing.assert_array_equal(a.pack(), b.pack())
    assert a.d == lay.n_theta + 2
    assert np.all(a.mu[lay.n_theta :] == 0.0) and a.mu[lay.disp_idx] == 0.0


# ------------------------------------------------------------- schedule


def test_learning_rate_examples():
    cfg = TrainConfig(eps0=0.01, tau=1000)
    assert learning_rate(1, cfg) == 0.01
    assert learning_rate(1000, cfg) == 0.01
    assert learning_rate(2000, cfg) == 0.005
    with pytest.raises(ConfigurationError):
        learning_rate(0, cfg)


def test_learning_rate_tail_is_harmonic():
    # a_t = eps0 tau / t beyond the knee: sum diverges, sum of squares converges
    cfg = TrainConfig(eps0=0.1, tau=10)
    t = np.arange(11, 2000)
    a = np.array([learning_rate(int(s), cfg) for s in t])
    np.testing.assert_allclose(a * t, cfg.eps0 * cfg.tau)


def test_config_validation():
    for kw in ({"eps0": 0.0}, {"tau": 0.5}, {"momentum": 1.5}, {"S": 0}, {"window": 0}, {"patience": 0}, {"factors": 0}):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)


# ------------------------------------------------------------- stopping


def test_increasing_series_never_stops():
    stop, best = smoothed_stop(np.arange(1000.0), K=10, P=20)
    assert not stop and best == 1000


def test_peaked_series_stops_after_patience():
    lb = np.concatenate([np.arange(100.0), 99 - np.arange(1, 200.0)])
    stop, best = smoothed_stop(lb, K=1, P=50)
    assert stop and best == 100
    # the trainer's rule stops at exactly t = 150 on this series
    for t in range(1, lb.size + 1):
        if smoothed_stop(lb[:t], 1, 50)[0]:
            break
    assert t == 150


def test_constant_series_stops_at_k_plus_p():
    K, P = 5, 7
    lb = np.zeros(100)
    for t in range(1, 101):
        stop, best = smoothed_stop(lb[:t], K, P)
        if stop:
            break
    assert t == K + P and best == K


def test_improvement_is_strict_with_tolerance():
    lb = np.array([0.0, 0.0, 5e-7, 1e-6, 3e-6])
    stop, best = smoothed_stop(lb, K=1, P=3)
    assert stop and best == 1


# ------------------------------------------------------------- training


def test_conjugate_regression_reaches_evidence():
    prob = ConjugateBLR()
    cfg = TrainConfig(eps0=0.01, factors=3, S=20, max_iter=4000)
    res = train(prob, prob.init(), cfg)
    tr = res.trace
    assert abs(tr.best_lb_smoothed - prob.log_evidence) <= 0.05
    assert prob.log_evidence - prob.exact_lb(res.fg) <= 0.05
    assert np.max(np.abs(res.fg.mu - prob.post_mean)) <= 0.02
    # the windowed bound never exceeds the evidence beyond 3 standard errors
    se = np.array(tr.lb_se)
    se_window = np.sqrt(np.convolve(se**2, np.ones(cfg.window) / cfg.window, "valid") / cfg.window)
    assert len(tr.lb_smoothed) == max(0, tr.iterations - cfg.window + 1)
    assert np.all(np.array(tr.lb_smoothed) <= prob.log_evidence + 3 * se_window)


def test_zero_gradient_target_keeps_lambda_fixed():
    rng = np.random.default_rng(0)
    fg = FactorGaussian(rng.standard_normal(4), 0.3 * rng.standard_normal((4, 1)), rng.uniform(0.5, 1, 4))

    def h(th):  # the target is q itself, so every gradient estimate is zero
        return log_q(fg, th), grad_log_q(fg, th)

    res = train(h, fg, TrainConfig(S=1, max_iter=30, window=5, patience=100))
    np.testing.assert_allclose(res.fg.pack(), fg.pack(), atol=1e-12)
    assert res.trace.stop_iter == 30


def test_zero_momentum_runs_are_bit_identical():
    prob = ConjugateBLR()
    cfg = TrainConfig(momentum=0.0, factors=3, S=5, max_iter=60, window=10, seed=4)
    a = train(prob, prob.init(), cfg).trace
    b = train(prob, prob.init(), cfg).trace
    assert a.lb == b.lb and a.natgrad_norm == b.natgrad_norm


def test_best_lambda_matches_recorded_bound():
    prob = ConjugateBLR()
    cfg = TrainConfig(eps0=0.01, factors=3, S=20, max_iter=400, window=20, patience=50)
    res = train(prob, prob.init(), cfg)
    tr = res.trace
    best = tr.best_iter
    assert tr.lb_smoothed[best - cfg.window] == tr.best_lb_smoothed
    assert tr.best_lb_smoothed == max(tr.lb_smoothed) or tr.best_lb_smoothed >= max(tr.lb_smoothed) - cfg.improve_tol
    # the returned parameters are those in effect at the best iteration
    replay = train(prob, prob.init(), TrainConfig(**{**cfg.__dict__, "max_iter": best}), sink=None)
    np.testing.assert_array_equal(replay.fg.pack(), res.fg.pack())


def test_small_natural_step_increases_exact_bound():
    prob = ConjugateBLR()
    fg = prob.init()
    lam = fg.pack()

    def lb_of(v):
        return prob.exact_lb(FactorGaussian.unpack(v, 3, 3))

    step = 1e-6
    g = np.array([(lb_of(lam + step * e) - lb_of(lam - step * e)) / (2 * step) for e in np.eye(lam.size)])
    nat = natgrad_cg(fg, g).x
    assert lb_of(lam + 1e-4 * nat) > lb_of(lam)


def test_sink_receives_every_row():
    prob = ConjugateBLR()
    rows = []
    train(prob, prob.init(), TrainConfig(factors=3, max_iter=12, window=5), sink=rows.append)
    assert [r["iteration"] for r in rows] == list(range(1, 13))
    assert rows[3]["lb_smoothed"] is None and rows[4]["lb_smoothed"] is not None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    fg = FactorGaussian(np.zeros(2), np.full((2, 1), 0.1), np.ones(2))
    calls = []

    def h(th):
        calls.append(1)
        return (np.nan if len(calls) > 3 else 0.0), np.zeros(2)

    with pytest.raises(DivergenceError, match="iteration 4"):
        train(h, fg, TrainConfig(max_iter=10))

    def huge(th):
        return 0.0, np.full(2, 1e308)

    with pytest.raises(DivergenceError):
        train(huge, fg, TrainConfig(max_iter=10, max_grad_norm=None, natural=False))


def test_degenerate_loading_error():
    fg = FactorGaussian(np.zeros(3), np.zeros((3, 1)), np.ones(3))
    with pytest.raises(DegenerateLoadingError):
        train(lambda th: (0.0, -th), fg, TrainConfig(max_iter=3))
    with pytest.raises(ConfigurationError):
        train(lambda th: (0.0, -th), fg, TrainConfig(factors=2))

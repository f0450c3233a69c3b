import numpy as np
import pytest

from nagvac.datagen import gen_binary_sim, gen_panel_sim, split_panel
from nagvac.deepglm import NetworkSpec
from nagvac.errors import DataError
from nagvac.evalpredict import accuracy, pps
from nagvac.model import FittedModel, fit_deepglm, fit_deepglmm
from nagvac.traceio import TraceWriter, read_trace
from nagvac.trainer import TrainConfig

FAST = TrainConfig(max_iter=60, window=10, patience=40)


def test_fit_deepglm_and_round_trip(tmp_path):
    ds = gen_binary_sim(300, seed=0)
    model = fit_deepglm(ds.X, ds.y, NetworkSpec((20, 5, 1)), FAST)
    assert model.summary["iterations"] == model.result.trace.iterations
    path = tmp_path / "m.json"
    model.save(path)
    back = FittedModel.load(path)
    np.testing.assert_array_equal(back.fg.pack(), model.fg.pack())
    np.testing.assert_array_equal(back.shrink.gamma, model.shrink.gamma)
    np.testing.assert_array_equal(back.predict(back.fg.mu, ds.X), model.predict(model.fg.mu, ds.X))
    assert pps(back, back.fg.mu, ds.X, ds.y) == pps(model, model.fg.mu, ds.X, ds.y)


def test_gaussian_response_is_standardised():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((200, 2))
    y = 50 + 10 * X[:, 0] + rng.standard_normal(200)
    model = fit_deepglm(X, y, NetworkSpec((2, 1), "gaussian"), TrainConfig(max_iter=3000))
    assert model.y_center == pytest.approx(y.mean())
    assert model.y_scale == pytest.approx(y.std())
    # predictions and MSE live on the original scale
    assert accuracy(model, model.fg.mu, X, y) < 2.0
    ll = model.loglik_rows(model.fg.mu, X, y)
    assert np.all(np.isfinite(ll)) and abs(np.mean(ll) + 1.42) < 0.2  # N(0, 1) noise


def test_mixed_model_round_trip(tmp_path):
    ds = gen_panel_sim(12, 6, seed=1)
    tr, te = split_panel(ds, 4)
    model = fit_deepglmm(tr.X, tr.y, tr.subject, NetworkSpec((5, 3, 1)), FAST, N=5)
    assert model.is_mixed and model.mixed.q == 4
    assert "laplace_failures" in model.summary
    model.save(tmp_path / "m.json")
    back = FittedModel.load(tmp_path / "m.json")
    subj = te.subject.astype(str)
    np.testing.assert_array_equal(back.predict(back.fg.mu, te.X, subj), model.predict(model.fg.mu, te.X, subj))
    with pytest.raises(DataError):
        model.predict(model.fg.mu, te.X)


def test_model_file_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("not json")
    with pytest.raises(DataError):
        FittedModel.load(p)
    p.write_text('{"schema": "other/9"}')
    with pytest.raises(DataError, match="schema"):
        FittedModel.load(p)
    ds = gen_binary_sim(50, seed=0)
    model = fit_deepglm(ds.X, ds.y, NetworkSpec((20, 1)), TrainConfig(max_iter=5, window=2))
    with pytest.raises(DataError, match="covariates"):
        model.predict(model.fg.mu, ds.X[:, :5])


def test_trace_file_round_trip(tmp_path):
    ds = gen_binary_sim(200, seed=2)
    path = tmp_path / "trace.csv"
    spec = NetworkSpec((20, 4, 1))
    with TraceWriter(path, 20) as sink:
        model = fit_deepglm(ds.X, ds.y, spec, FAST, sink=sink)
    live = model.result.trace
    back = read_trace(path)
    assert back.lb == live.lb
    np.testing.assert_array_equal(back.lb_se, live.lb_se)  # NaN when S = 1
    assert back.lb_smoothed == live.lb_smoothed
    assert back.step_size == live.step_size
    assert back.grad_norm == live.grad_norm and back.natgrad_norm == live.natgrad_norm
    assert len(back.gamma) == len(live.gamma)
    np.testing.assert_array_equal(np.array(back.gamma), np.array(live.gamma))
    assert back.stop_iter == live.stop_iter
    assert back.best_lb_smoothed == live.best_lb_smoothed

"""Predictive scores, accuracy metrics and posterior-predictive intervals.

The functions take a fitted model (:class:`nagvac.model.FittedModel` or
anything with ``eta``, ``loglik_rows``, ``family`` and ``to_response``)
and covariates on the original scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import InputError
from .factor_gaussian import FactorGaussian

__all__ = [
    "PredictionReport",
    "PredictiveDraws",
    "accuracy",
    "build_report",
    "conditional_mean",
    "point_prediction",
    "pps",
    "predictive_draws",
]


def point_prediction(family: str, eta) -> np.ndarray:
    """Class ``[eta >= 0]`` for binomial, the mean for gaussian and poisson."""
    eta = np.asarray(eta, dtype=float)
    if family == "binomial":
        return (eta >= 0.0).astype(float)
    if family == "poisson":
        return np.exp(eta)
    return eta


def conditional_mean(family: str, eta) -> np.ndarray:
    """``E(y | x, theta)`` given the linear predictor."""
    eta = np.asarray(eta, dtype=float)
    if family == "binomial":
        return expit(eta)
    if family == "poisson":
        return np.exp(eta)
    return eta


def pps(model, theta_hat, X, y, subject=None) -> float:
    """Partial predictive score: mean negative log predictive density at ``theta_hat``.

    Mixed models plug in each subject's Laplace mode at ``theta_hat``.
    """
    ll = model.loglik_rows(theta_hat, X, y, subject)
    if ll.size == 0:
        raise InputError("no test rows")
    return float(-np.mean(ll))


def accuracy(model, theta_hat, X, y, subject=None) -> float:
    """MCR for binomial responses, MSE on the original scale otherwise."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise InputError("no test rows")
    pred = model.predict(theta_hat, X, subject)
    if model.family == "binomial":
        return float(np.mean(pred != y))
    return float(np.mean((y - pred) ** 2))


@dataclass
class PredictiveDraws:
    """Posterior-predictive draws for a set of rows.

    ``cond_means`` holds ``E(y | x, theta_m)`` for each parameter draw; the
    interval is the mean of those plus/minus one standard deviation.
    """

    y: np.ndarray
    cond_means: np.ndarray
    mean: np.ndarray
    sd: np.ndarray

    @property
    def lower(self) -> np.ndarray:
        return self.mean - self.sd

    @property
    def upper(self) -> np.ndarray:
        return self.mean + self.sd


def _sample_response(family, rng, mean, sigma):
    if family == "binomial":
        return (rng.random(mean.shape) < mean).astype(float)
    if family == "poisson":
        return rng.poisson(mean).astype(float)
    return mean + sigma * rng.standard_normal(mean.shape)


def predictive_draws(fg: FactorGaussian, model, X, M: int = 1000, rng=None, subject=None) -> PredictiveDraws:
    """Draw ``theta_m ~ q`` then ``y_m ~ p(y | x, theta_m)`` for every row of ``X``.

    All quantities are on the original response scale.
    """
    if M < 2:
        raise InputError("M must be >= 2")
    rng = np.random.default_rng() if rng is None else rng
    E1 = rng.standard_normal((M, fg.f))
    E2 = rng.standard_normal((M, fg.d))
    thetas = fg.mu + E1 @ fg.B.T + fg.c * E2
    alpha = model.plugin_effects(fg.mu, X, subject)
    n = np.atleast_2d(X).shape[0]
    means = np.empty((M, n))
    ys = np.empty((M, n))
    for m in range(M):
        eta = model.eta(thetas[m], X, subject, alpha=alpha)
        mean = model.to_response(conditional_mean(model.family, eta))
        means[m] = mean
        ys[m] = _sample_response(model.family, rng, mean, model.response_sd(thetas[m]))
    return PredictiveDraws(ys, means, means.mean(axis=0), means.std(axis=0, ddof=1))


@dataclass
class PredictionReport:
    """Test-set scores plus per-row predictions and intervals."""

    pps: float | None
    metric: float | None
    metric_kind: str
    prediction: np.ndarray
    predictive_mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    probability: np.ndarray | None = None

    def rows(self):
        """Iterate ``(row, prediction, mean, lower, upper, probability)`` tuples."""
        prob = self.probability if self.probability is not None else [None] * len(self.prediction)
        for i, (p, m, lo, hi, pr) in enumerate(
            zip(self.prediction, self.predictive_mean, self.lower, self.upper, prob)
        ):
            yield i, p, m, lo, hi, pr


def build_report(model, fg: FactorGaussian, X, y=None, subject=None, M: int = 1000, rng=None) -> PredictionReport:
    """Predictions at the variational mean together with predictive intervals.

    Scores are computed only when ``y`` is given.
    """
    theta_hat = fg.mu
    draws = predictive_draws(fg, model, X, M, rng, subject)
    pred = model.predict(theta_hat, X, subject)
    prob = None
    if model.family == "binomial":
        prob = conditional_mean("binomial", model.eta(theta_hat, X, subject))
    kind = "mcr" if model.family == "binomial" else "mse"
    score = metric = None
    if y is not None:
        score = pps(model, theta_hat, X, y, subject)
        metric = accuracy(model, theta_hat, X, y, subject)
    return PredictionReport(score, metric, kind, pred, draws.mean, draws.lower, draws.upper, prob)

"""Stochastic natural-gradient optimisation of the lower bound."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateLoadingError,
    DivergenceError,
    NotPositiveDefiniteError,
    NumericalError,
    SingularScaleError,
)
from .factor_gaussian import FactorGaussian, estimate_lb_gradient, tril_mask
from .natural_gradient import CGConfig, natgrad_cg, natgrad_rank1

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    eps0: float = 0.01
    tau: float = 1000.0
    momentum: float = 0.9
    S: int = 1
    window: int = 50
    patience: int = 500
    max_iter: int = 5000
    factors: int = 1
    cg: CGConfig = CGConfig()
    seed: int = 0
    natural: bool = True
    batch_size: int | None = None
    improve_tol: float = 1e-6
    max_grad_norm: float | None = 100.0

    def __post_init__(self):
        if not self.eps0 > 0:
            raise ConfigurationError("eps0 must be positive")
        if not self.tau >= 1:
            raise ConfigurationError("tau must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError("momentum must lie in [0, 1]")
        if self.S < 1 or self.window < 1 or self.patience < 1 or self.max_iter < 1:
            raise ConfigurationError("S, window, patience and max_iter must be >= 1")
        if self.factors < 1:
            raise ConfigurationError("factors must be >= 1")


def learning_rate(t: int, cfg: TrainConfig) -> float:
    """``eps0`` up to the knee ``tau``, then ``eps0 * tau / t``."""
    if t < 1:
        raise ConfigurationError("iteration counter starts at 1")
    return cfg.eps0 if t <= cfg.tau else cfg.eps0 * cfg.tau / t


def init_variational(layout, f: int, rng: np.random.Generator, n_extra: int = 0) -> FactorGaussian:
    """Glorot-uniform weight means, zero biases/dispersion, small random loadings.

    ``n_extra`` trailing coordinates (e.g. log random-effect variances) start at 0.
    """
    d = layout.n_theta + n_extra
    mu = np.zeros(d)
    for sl, fan_in, fan_out in layout.glorot:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        mu[sl] = rng.uniform(-bound, bound, size=sl.stop - sl.start)
    B = rng.normal(0.0, 0.01, size=(d, f))
    B[~tril_mask(d, f)] = 0.0
    c = np.full(d, 0.01)
    return FactorGaussian(mu, B, c)


class _Smoother:
    """Moving-window mean with best-so-far tracking.

    The window mean is recomputed from the buffer each push; a running sum
    drifts by roundoff and can fake an improvement near the tolerance.
    """

    def __init__(self, K: int, P: int, tol: float = 1e-6):
        self.K, self.P, self.tol = K, P, tol
        self._buf = deque(maxlen=K)
        self.best = -np.inf
        self.best_iter = None
        self.t = 0

    def push(self, value: float):
        self.t += 1
        self._buf.append(value)
        if len(self._buf) < self.K:
            return None
        sm = math.fsum(self._buf) / self.K
        if self.best_iter is None or sm > self.best + self.tol:
            self.best, self.best_iter = sm, self.t
        return sm

    @property
    def stop(self) -> bool:
        return self.best_iter is not None and self.t - self.best_iter >= self.P


def smoothed_stop(lb, K: int, P: int, tol: float = 1e-6):
    """Evaluate the moving-average stopping rule on a raw lower-bound series.

    Returns ``(stop, best_iter)`` with 1-based iteration numbers; ``stop`` is
    true once ``P`` iterations have passed since the last strict improvement
    of the ``K``-window mean.
    """
    sm = _Smoother(K, P, tol)
    for v in lb:
        sm.push(float(v))
        if sm.stop:
            return True, sm.best_iter
    return False, sm.best_iter


@dataclass
class TrainTrace:
    lb: list = field(default_factory=list)
    lb_se: list = field(default_factory=list)
    lb_smoothed: list = field(default_factory=list)
    step_size: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    natgrad_norm: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    best_lb_smoothed: float = -np.inf
    best_iter: int | None = None
    stop_iter: int = 0
    cg_failures: int = 0

    @property
    def iterations(self) -> int:
        return len(self.lb)


@dataclass
class TrainResult:
    fg: FactorGaussian
    objective: object
    trace: TrainTrace

    @property
    def shrink(self):
        return getattr(self.objective, "shrink", None)


def _row(trace: TrainTrace, t: int, smoothed):
    return {
        "iteration": t,
        "lb": trace.lb[-1],
        "lb_se": trace.lb_se[-1],
        "lb_smoothed": smoothed,
        "step_size": trace.step_size[-1],
        "grad_norm": trace.grad_norm[-1],
        "natgrad_norm": trace.natgrad_norm[-1],
        "gamma": trace.gamma[-1] if trace.gamma else None,
    }


def train(objective, fg_init: FactorGaussian, cfg: TrainConfig = TrainConfig(), sink=None) -> TrainResult:
    """Run the momentum natural-gradient loop until the smoothed bound stalls.

    ``objective`` is a callable ``theta -> (h, grad h)``.  Optional methods:
    ``resample(rng)`` (called first in every iteration), ``update_shrinkage(fg)``
    (called after every step) and ``trace_values()`` (recorded in the trace).
    ``sink`` receives one dict per iteration.  The returned ``fg`` is the
    iterate at the best smoothed lower bound.
    """
    if fg_init.f != cfg.factors:
        raise ConfigurationError(f"initial q has {fg_init.f} factors, config asks for {cfg.factors}")
    rng = np.random.default_rng(cfg.seed)
    fg = fg_init.copy()
    d, f = fg.d, fg.f
    lam = fg.pack()
    gbar = None
    nat_prev = None
    trace = TrainTrace()
    smoother = _Smoother(cfg.window, cfg.patience, cfg.improve_tol)
    best_lam = lam.copy()
    resample = getattr(objective, "resample", None)
    post_step = getattr(objective, "update_shrinkage", None)
    trace_values = getattr(objective, "trace_values", None)

    for t in range(1, cfg.max_iter + 1):
        if resample is not None:
            resample(rng)
        try:
            est = estimate_lb_gradient(fg, objective, cfg.S, rng)
            g = est.pack()
            if not cfg.natural:
                nat = g
            elif f == 1:
                nat = natgrad_rank1(fg, g)
            else:
                res = natgrad_cg(fg, g, cfg.cg, nat_prev)
                if not res.converged:
                    trace.cg_failures += 1
                nat = res.x
        except (SingularScaleError, DegenerateLoadingError, NotPositiveDefiniteError):
            raise
        except NumericalError as exc:
            last = trace.grad_norm[-1] if trace.grad_norm else float("nan")
            raise DivergenceError(f"training diverged at iteration {t} (last |grad| = {last:.3g}): {exc}") from exc
        nat_prev = nat
        nn = float(np.linalg.norm(nat))
        if cfg.max_grad_norm is not None and nn > cfg.max_grad_norm:
            nat = nat * (cfg.max_grad_norm / nn)
        gbar = nat.copy() if gbar is None else cfg.momentum * gbar + (1.0 - cfg.momentum) * nat
        a_t = learning_rate(t, cfg)

        trace.lb.append(est.lb_value)
        trace.lb_se.append(est.lb_se)
        trace.step_size.append(a_t)
        trace.grad_norm.append(float(np.linalg.norm(g)))
        trace.natgrad_norm.append(nn)
        sm = smoother.push(est.lb_value)
        if sm is not None:
            trace.lb_smoothed.append(sm)
            if smoother.best_iter == t:
                best_lam = lam.copy()

        lam = lam + a_t * gbar
        if not np.all(np.isfinite(lam)):
            raise DivergenceError(
                f"non-finite variational parameters at iteration {t} "
                f"(|grad| = {trace.grad_norm[-1]:.3g}, |natgrad| = {nn:.3g})"
            )
        fg = FactorGaussian.unpack(lam, d, f)
        if post_step is not None:
            post_step(fg)
        if trace_values is not None:
            trace.gamma.append(np.asarray(trace_values(), dtype=float))
        if sink is not None:
            sink(_row(trace, t, sm))
        if smoother.stop:
            break

    trace.stop_iter = t
    trace.best_iter = smoother.best_iter
    trace.best_lb_smoothed = smoother.best
    if smoother.best_iter is None:
        best_lam = lam
    log.debug("stopped at %d, best smoothed LB %.4f at %s", t, smoother.best, smoother.best_iter)
    return TrainResult(FactorGaussian.unpack(best_lam, d, f), objective, trace)

"""DeepGLMM: random output-layer effects on top of a DeepGLM network.

For subject ``i`` the linear predictor is ``N(x_it, w, beta + alpha_i)``
with ``alpha_i ~ N(0, Gamma)``, ``Gamma`` diagonal.  The variational
parameter is ``theta_tilde = (theta, log Gamma)`` where ``theta`` follows
the DeepGLM layout.  Likelihood contributions and their gradients are
estimated by importance sampling around each subject's Laplace mode; see
:mod:`nagvac._kernels` for the per-subject computation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from ._kernels import panel_laplace_is
from .deepglm import (
    ParamLayout,
    ShrinkageState,
    _forward_cache,
    backward_hidden,
    check_response,
    family_loglik,
    log_prior_and_grad,
    output_grads,
    split_covariates,
    update_shrinkage,
)
from .errors import ConfigurationError, DataError, DegenerateProposalError, InputError, NumericalError

log = logging.getLogger(__name__)

RANDOM_EFFECTS = ("output", "intercept")


@dataclass
class PanelData:
    """Rows grouped by subject.

    Rows are stably reordered so that each subject's rows are contiguous
    (subjects in order of first appearance, rows in file order within a
    subject).  ``order`` maps the stored rows back to the input rows.
    """

    X: np.ndarray
    y: np.ndarray
    subject_ids: np.ndarray
    offsets: np.ndarray
    order: np.ndarray

    @classmethod
    def from_arrays(cls, X, y, subject) -> "PanelData":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        subject = np.asarray(subject)
        if not (X.shape[0] == y.shape[0] == subject.shape[0]):
            raise DataError("X, y and subject ids have different row counts")
        ids, first, inv = np.unique(subject, return_index=True, return_inverse=True)
        rank = np.empty(ids.size, dtype=int)
        rank[np.argsort(first, kind="stable")] = np.arange(ids.size)
        key = rank[inv.ravel()]
        order = np.argsort(key, kind="stable")
        counts = np.bincount(key, minlength=ids.size)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return cls(X[order], y[order], ids[np.argsort(first, kind="stable")], offsets, order)

    @property
    def n_subjects(self) -> int:
        return self.offsets.size - 1

    @property
    def n(self) -> int:
        return self.y.size

    def rows(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def panel(self, i: int):
        sl = self.rows(i)
        return self.X[sl], self.y[sl]

    def subset_subjects(self, idx) -> "PanelData":
        idx = np.asarray(idx, dtype=int)
        rows = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in idx])
        counts = np.diff(self.offsets)[idx]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return PanelData(self.X[rows], self.y[rows], self.subject_ids[idx], offsets, self.order[rows])


class MixedLayout:
    """``theta_tilde = (theta, log Gamma)`` on top of a :class:`ParamLayout`.

    ``random_effects="output"`` gives every output weight (intercept and
    the last hidden units) a random effect; ``"intercept"`` keeps only the
    random intercept.
    """

    def __init__(self, base: ParamLayout, random_effects: str = "output"):
        if random_effects not in RANDOM_EFFECTS:
            raise ConfigurationError(f"random_effects must be one of {RANDOM_EFFECTS}")
        self.base = base
        self.spec = base.spec
        self.random_effects = random_effects
        m_last = base.beta_tilde_slice.stop - base.beta_tilde_slice.start
        self.q = m_last + 1 if random_effects == "output" else 1
        self.log_gamma_slice = slice(base.n_theta, base.n_theta + self.q)
        self.n_theta = base.n_theta + self.q

    def split(self, theta_tilde):
        theta_tilde = np.asarray(theta_tilde, dtype=float)
        if theta_tilde.shape != (self.n_theta,):
            raise InputError(f"theta has shape {theta_tilde.shape}, expected ({self.n_theta},)")
        return theta_tilde[: self.base.n_theta], theta_tilde[self.log_gamma_slice]

    def unpack(self, theta_tilde) -> "MixedParams":
        theta, lg = self.split(theta_tilde)
        return MixedParams(self.base.unpack(theta), lg)


@dataclass
class MixedParams:
    base: object
    log_gamma: np.ndarray

    @property
    def gamma(self) -> np.ndarray:
        return np.exp(self.log_gamma)


@dataclass
class LaplaceFit:
    mode: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int


def _design(layout: MixedLayout, theta, X):
    """Fixed-effect predictor ``eta0``, random-effect design ``R`` and the forward cache."""
    spec = layout.spec
    params = layout.base.unpack(theta)
    X_net, X_lin = split_covariates(spec, X)
    pres, acts = _forward_cache(spec, params, X_net)
    z = acts[-1]
    eta0 = params.beta0 + z @ params.beta_tilde + X_lin @ params.beta_lin
    ones = np.ones((X_net.shape[0], 1))
    R = np.hstack([ones, z]) if layout.random_effects == "output" else ones
    return params, eta0, R, z, X_lin, pres, acts


def _sigma2(params) -> float:
    return 1.0 if params.log_dispersion is None else float(np.exp(params.log_dispersion))


@dataclass
class PanelISResult:
    """Per-subject IS output plus the summed gradient of ``sum_i log L_i``."""

    loglik: np.ndarray
    grad: np.ndarray
    modes: np.ndarray
    covariances: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    @property
    def total(self) -> float:
        return float(self.loglik.sum())


def panel_is(
    layout: MixedLayout,
    theta_tilde,
    panel: PanelData,
    N: int = 20,
    rng: np.random.Generator | None = None,
    *,
    proposal_scale: float = 1.0,
    alpha0=None,
    tol: float = 1e-8,
    max_iter: int = 100,
    eps=None,
) -> PanelISResult:
    """IS estimates of every ``log L_i`` and of ``grad sum_i log L_i``.

    ``proposal_scale`` inflates the Laplace covariance of the proposal
    (1 is the plain Laplace proposal).  ``alpha0`` warm-starts Newton.
    """
    if N < 1:
        raise InputError("N must be >= 1")
    if not proposal_scale > 0:
        raise InputError("proposal_scale must be positive")
    theta, log_gamma = layout.split(theta_tilde)
    params, eta0, R, z, X_lin, pres, acts = _design(layout, theta, panel.X)
    ns, q = panel.n_subjects, layout.q
    if eps is None:
        rng = np.random.default_rng() if rng is None else rng
        eps = rng.standard_normal((ns, N, q))
    if alpha0 is None:
        alpha0 = np.zeros((ns, q))
    sigma2 = _sigma2(params)
    gamma = np.exp(log_gamma)
    modes, covs, iters, conv, status, logL, rbar, dR, dlg, dls2 = panel_laplace_is(
        layout.spec.family, eta0, R, panel.y, panel.offsets, gamma, sigma2,
        alpha0, eps, proposal_scale, tol, max_iter,
    )
    if np.any(status == 1):
        i = int(np.flatnonzero(status == 1)[0])
        raise NumericalError(f"Laplace Hessian not positive definite for subject {panel.subject_ids[i]!r}")
    if np.any(status == 2):
        i = int(np.flatnonzero(status == 2)[0])
        raise DegenerateProposalError(
            f"all importance weights underflowed for subject {panel.subject_ids[i]!r}; "
            "increase N or the proposal scale"
        )
    if not conv.all():
        log.debug("Laplace mode did not converge for %d of %d subjects", int((~conv).sum()), ns)

    base = layout.base
    grad = np.zeros(layout.n_theta)
    output_grads(base, grad, z, X_lin, rbar)
    dz = np.outer(rbar, params.beta_tilde)
    if layout.random_effects == "output":
        dz += dR[:, 1:]
    gW, gb = backward_hidden(layout.spec, params, pres, acts, dz)
    for s, g in zip(base.w_slices, gW):
        grad[s] = g.ravel()
    for s, g in zip(base.b_slices, gb):
        grad[s] = g
    if base.disp_idx is not None:
        grad[base.disp_idx] = dls2
    grad[layout.log_gamma_slice] = dlg
    return PanelISResult(logL, grad, modes, covs, iters, conv)


def _single_panel(X_i, y_i) -> PanelData:
    X_i = np.atleast_2d(np.asarray(X_i, dtype=float))
    y_i = np.asarray(y_i, dtype=float)
    if y_i.size == 0:
        raise DataError("panel is empty")
    return PanelData.from_arrays(X_i, y_i, np.zeros(y_i.size, dtype=int))


def laplace_mode(layout: MixedLayout, theta_tilde, X_i, y_i, *, tol=1e-8, max_iter=100, alpha0=None) -> LaplaceFit:
    """Mode and inverse negative Hessian of ``p(alpha_i | y_i, theta)``.

    Newton from ``alpha0`` (default 0) with step halving; closed form for
    the gaussian family.
    """
    panel = _single_panel(X_i, y_i)
    check_response(layout.spec.family, panel.y)
    a0 = None if alpha0 is None else np.asarray(alpha0, dtype=float).reshape(1, layout.q)
    res = panel_is(layout, theta_tilde, panel, 1, eps=np.zeros((1, 1, layout.q)), alpha0=a0, tol=tol, max_iter=max_iter)
    return LaplaceFit(res.modes[0], res.covariances[0], bool(res.converged[0]), int(res.iterations[0]))


def is_gradient_contribution(layout, theta_tilde, X_i, y_i, N=20, rng=None, *, proposal_scale=1.0):
    """IS estimate of ``grad log L_i`` with respect to ``theta_tilde`` (Fisher's identity)."""
    panel = _single_panel(X_i, y_i)
    check_response(layout.spec.family, panel.y)
    return panel_is(layout, theta_tilde, panel, N, rng, proposal_scale=proposal_scale).grad


def is_loglik_contribution(layout, theta_tilde, X_i, y_i, N=1000, rng=None, *, proposal_scale=1.0) -> float:
    """``log`` of the IS average of the unnormalised weights, an estimate of ``log L_i``."""
    panel = _single_panel(X_i, y_i)
    check_response(layout.spec.family, panel.y)
    return float(panel_is(layout, theta_tilde, panel, N, rng, proposal_scale=proposal_scale).loglik[0])


def log_gamma_prior(log_gamma, a0: float = 1.0, b0: float = 0.1):
    """Gamma(a0, b0) log density of ``exp(log_gamma)`` plus the log-Jacobian, and its gradient."""
    lg = np.asarray(log_gamma, dtype=float)
    e = np.exp(lg)
    val = float(np.sum(a0 * math.log(b0) - gammaln(a0) + a0 * lg - b0 * e))
    return val, a0 - b0 * e


class DeepGLMMObjective:
    """Callable ``theta_tilde -> (h, grad h)`` for a DeepGLMM.

    ``h = sum_i log L_i_hat + log p(w, beta | shrinkage) + log p(log Gamma)``,
    with ``log L_i_hat`` the IS estimate.  Each call draws fresh IS noise
    and warm-starts Newton from the previous modes.
    """

    def __init__(
        self,
        layout: MixedLayout,
        panel: PanelData,
        shrink: ShrinkageState | None = None,
        *,
        N: int = 20,
        a0: float = 1.0,
        b0: float = 0.1,
        bias_var: float = 100.0,
        proposal_scale: float = 1.0,
        use_prior: bool = True,
        seed: int | None = 0,
        batch_subjects: int | None = None,
    ):
        if N < 1:
            raise ConfigurationError("N must be >= 1")
        if not (a0 > 0 and b0 > 0):
            raise ConfigurationError("Gamma prior hyperparameters must be positive")
        check_response(layout.spec.family, panel.y)
        self.layout = layout
        self.panel = panel
        self.shrink = shrink if shrink is not None else ShrinkageState.initial(layout.base)
        self.N, self.a0, self.b0 = int(N), float(a0), float(b0)
        self.bias_var = bias_var
        self.proposal_scale = proposal_scale
        self.use_prior = use_prior
        self.rng = np.random.default_rng(seed)
        self.modes = np.zeros((panel.n_subjects, layout.q))
        ns = panel.n_subjects
        self.batch_subjects = None if batch_subjects is None or batch_subjects >= ns else int(batch_subjects)
        self._batch = None
        self.last = None
        self.laplace_failures = 0

    @property
    def n_theta(self) -> int:
        return self.layout.n_theta

    def resample(self, rng: np.random.Generator) -> None:
        if self.batch_subjects is not None:
            self._batch = np.sort(rng.choice(self.panel.n_subjects, self.batch_subjects, replace=False))

    def __call__(self, theta_tilde):
        if self.panel.n_subjects == 0:
            val, grad = 0.0, np.zeros(self.layout.n_theta)
        else:
            if self._batch is None:
                panel, idx, scale = self.panel, slice(None), 1.0
            else:
                idx = self._batch
                panel = self.panel.subset_subjects(idx)
                scale = self.panel.n_subjects / idx.size
            res = panel_is(
                self.layout, theta_tilde, panel, self.N, self.rng,
                proposal_scale=self.proposal_scale, alpha0=self.modes[idx],
            )
            self.modes[idx] = res.modes
            self.laplace_failures += int((~res.converged).sum())
            self.last = res
            val, grad = scale * res.total, scale * res.grad
        theta, lg = self.layout.split(theta_tilde)
        if self.use_prior:
            pv, pg = log_prior_and_grad(self.layout.base, theta, self.shrink, self.bias_var)
            val += pv
            grad[: self.layout.base.n_theta] += pg
        gv, gg = log_gamma_prior(lg, self.a0, self.b0)
        val += gv
        grad[self.layout.log_gamma_slice] += gg
        return val, grad

    def update_shrinkage(self, fg) -> None:
        if self.use_prior:
            self.shrink = update_shrinkage(fg, self.layout.base, self.shrink)

    def trace_values(self) -> np.ndarray:
        return self.shrink.gamma.copy()


def assemble_h_glmm(layout: MixedLayout, panel: PanelData, shrink=None, N: int = 20, **kwargs) -> DeepGLMMObjective:
    """Build the ``h`` callback for a DeepGLMM on a panel."""
    return DeepGLMMObjective(layout, panel, shrink, N=N, **kwargs)


@dataclass
class PanelPrediction:
    prediction: np.ndarray
    eta: np.ndarray
    unseen: np.ndarray
    modes: np.ndarray


def subject_modes(layout: MixedLayout, theta_tilde, panel: PanelData, *, tol=1e-8, max_iter=100) -> np.ndarray:
    """Laplace modes of every subject in ``panel`` at ``theta_tilde``."""
    q = layout.q
    eps = np.zeros((panel.n_subjects, 1, q))
    return panel_is(layout, theta_tilde, panel, 1, eps=eps, tol=tol, max_iter=max_iter).modes


def random_effect_eta(layout: MixedLayout, theta_tilde, X, alpha) -> np.ndarray:
    """Linear predictor with per-row random effects ``alpha`` (rows of shape ``(n, q)``)."""
    theta, _ = layout.split(theta_tilde)
    _, eta0, R, *_ = _design(layout, theta, X)
    return eta0 + np.einsum("nq,nq->n", R, alpha)


def panel_predict(layout: MixedLayout, theta_bar, train: PanelData, X_new, subject_new) -> PanelPrediction:
    """Predict new rows using each subject's Laplace mode from its training rows.

    The network output weights become ``beta + mode_i``; subjects without
    training rows use ``alpha = 0`` and are flagged in ``unseen``.
    Binomial predictions are classes ``[eta >= 0]``, gaussian predictions
    are ``eta`` and poisson predictions ``exp(eta)``.
    """
    from .evalpredict import point_prediction

    modes = subject_modes(layout, theta_bar, train)
    lookup = {s: i for i, s in enumerate(train.subject_ids.tolist())}
    subj = np.asarray(subject_new).tolist()
    pos = np.array([lookup.get(s, -1) for s in subj], dtype=int)
    unseen = pos < 0
    if unseen.any():
        log.warning("%d prediction rows belong to subjects without training rows", int(unseen.sum()))
    alpha = np.zeros((len(subj), layout.q))
    alpha[~unseen] = modes[pos[~unseen]]
    eta = random_effect_eta(layout, theta_bar, X_new, alpha)
    return PanelPrediction(point_prediction(layout.spec.family, eta), eta, unseen, alpha)


def conditional_loglik(layout: MixedLayout, theta_tilde, X, y, alpha) -> np.ndarray:
    """Per-row ``log p(y | x, theta, alpha)`` with plug-in random effects."""
    theta, _ = layout.split(theta_tilde)
    params = layout.base.unpack(theta)
    eta = random_effect_eta(layout, theta_tilde, X, alpha)
    ll, _, _ = family_loglik(layout.spec.family, np.asarray(y, dtype=float), eta, params.log_dispersion)
    return ll

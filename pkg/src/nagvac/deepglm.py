"""Feedforward-network GLM: parameter layout, likelihoods, priors, shrinkage.

The flat parameter vector ``theta`` is laid out as::

    W1, b1, ..., WL, bL, beta0, beta_tilde, beta_lin, [log sigma^2]

with each ``W_l`` of shape ``(m_l, m_{l-1})`` flattened row-major.  Column
``j`` of ``W1`` is the weight group of network covariate ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, gammaln

from .errors import ConfigurationError, DataError, InputError
from .factor_gaussian import FactorGaussian, sigma_diag

FAMILIES = ("gaussian", "binomial", "poisson")
LOG_2PI = np.log(2.0 * np.pi)


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(pre, act):
    return (pre > 0.0).astype(float)


def _tanh_grad(pre, act):
    return 1.0 - act * act


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture and response family.

    ``layer_sizes`` is ``(p_net, m_1, ..., m_L, 1)``.  If
    ``linear_part_indices`` is given, those columns of the covariate matrix
    enter the linear predictor directly and the remaining ``p_net`` columns
    feed the network; ``n_covariates`` is then the total column count.
    ``layer_sizes = (p, 1)`` is an ordinary GLM.
    """

    layer_sizes: tuple
    family: str = "binomial"
    activation: str = "relu"
    linear_part_indices: tuple | None = None
    n_covariates: int | None = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or sizes[-1] != 1 or min(sizes) < 1:
            raise ConfigurationError(f"layer_sizes must be (p, m_1, ..., 1), got {sizes}")
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        lin = tuple(sorted(int(i) for i in (self.linear_part_indices or ())))
        if len(set(lin)) != len(lin):
            raise ConfigurationError("linear_part_indices has duplicates")
        object.__setattr__(self, "linear_part_indices", lin)
        p = self.n_covariates if self.n_covariates is not None else sizes[0] + len(lin)
        object.__setattr__(self, "n_covariates", int(p))
        if sizes[0] + len(lin) != p or (lin and (lin[0] < 0 or lin[-1] >= p)):
            raise ConfigurationError(
                f"{sizes[0]} network inputs plus {len(lin)} linear columns != {p} covariates"
            )

    @property
    def network_indices(self) -> np.ndarray:
        lin = set(self.linear_part_indices)
        return np.array([j for j in range(self.n_covariates) if j not in lin], dtype=int)

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    @property
    def has_dispersion(self) -> bool:
        return self.family == "gaussian"


@dataclass
class ModelParams:
    """Structured view of ``theta``; arrays may be views into the flat vector."""

    weights: list
    biases: list
    beta0: float
    beta_tilde: np.ndarray
    beta_lin: np.ndarray
    log_dispersion: float | None = None


class ParamLayout:
    """Index map between the flat ``theta`` and :class:`ModelParams`."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        sizes = spec.layer_sizes
        pos = 0
        self.w_slices, self.b_slices, self.w_shapes = [], [], []
        glorot = []
        for l in range(1, len(sizes) - 1):
            shape = (sizes[l], sizes[l - 1])
            n = shape[0] * shape[1]
            self.w_slices.append(slice(pos, pos + n))
            self.w_shapes.append(shape)
            glorot.append((slice(pos, pos + n), sizes[l - 1], sizes[l]))
            pos += n
            self.b_slices.append(slice(pos, pos + sizes[l]))
            pos += sizes[l]
        self.beta0_idx = pos
        pos += 1
        m_last = sizes[-2]
        self.beta_tilde_slice = slice(pos, pos + m_last)
        glorot.append((self.beta_tilde_slice, m_last, 1))
        pos += m_last
        n_lin = len(spec.linear_part_indices)
        self.beta_lin_slice = slice(pos, pos + n_lin)
        if n_lin:
            glorot.append((self.beta_lin_slice, n_lin, 1))
        pos += n_lin
        self.disp_idx = None
        if spec.has_dispersion:
            self.disp_idx = pos
            pos += 1
        self.n_theta = pos
        self.glorot = glorot

        if spec.n_hidden:
            m1, p_net = self.w_shapes[0]
            start = self.w_slices[0].start
            self.groups = [start + np.arange(m1) * p_net + j for j in range(p_net)]
            self.m_first = m1
        else:
            self.groups = []
            self.m_first = 0
        ridge = [np.arange(s.start, s.stop) for s in self.w_slices[1:]]
        ridge.append(np.arange(self.beta_tilde_slice.start, self.beta_tilde_slice.stop))
        ridge.append(np.arange(self.beta_lin_slice.start, self.beta_lin_slice.stop))
        self.ridge_idx = np.concatenate(ridge).astype(int)
        bias = [np.arange(s.start, s.stop) for s in self.b_slices] + [np.array([self.beta0_idx])]
        self.bias_idx = np.concatenate(bias).astype(int)
        self.bias_mask = np.zeros(self.n_theta, dtype=bool)
        self.bias_mask[self.bias_idx] = True

    def unpack(self, theta: np.ndarray) -> ModelParams:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_theta,):
            raise InputError(f"theta has shape {theta.shape}, expected ({self.n_theta},)")
        return ModelParams(
            weights=[theta[s].reshape(shape) for s, shape in zip(self.w_slices, self.w_shapes)],
            biases=[theta[s] for s in self.b_slices],
            beta0=theta[self.beta0_idx],
            beta_tilde=theta[self.beta_tilde_slice],
            beta_lin=theta[self.beta_lin_slice],
            log_dispersion=None if self.disp_idx is None else theta[self.disp_idx],
        )

    def pack(self, params: ModelParams) -> np.ndarray:
        theta = np.zeros(self.n_theta)
        for s, W in zip(self.w_slices, params.weights):
            theta[s] = np.ravel(W)
        for s, b in zip(self.b_slices, params.biases):
            theta[s] = b
        theta[self.beta0_idx] = params.beta0
        theta[self.beta_tilde_slice] = params.beta_tilde
        theta[self.beta_lin_slice] = params.beta_lin
        if self.disp_idx is not None:
            theta[self.disp_idx] = 0.0 if params.log_dispersion is None else params.log_dispersion
        return theta


def split_covariates(spec: NetworkSpec, X: np.ndarray):
    """Return ``(X_net, X_lin)`` column blocks."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != spec.n_covariates:
        raise InputError(f"X has {X.shape[1]} columns, expected {spec.n_covariates}")
    if not spec.linear_part_indices:
        return X, X[:, :0]
    return X[:, spec.network_indices], X[:, list(spec.linear_part_indices)]


def _forward_cache(spec, params, X_net):
    act, _ = ACTIVATIONS[spec.activation]
    pres, acts = [], [X_net]
    a = X_net
    for W, b in zip(params.weights, params.biases):
        pre = a @ W.T + b
        a = act(pre)
        pres.append(pre)
        acts.append(a)
    return pres, acts


def forward(spec: NetworkSpec, params: ModelParams, X: np.ndarray):
    """Return ``(z, eta)``: last hidden layer and linear predictor.

    For a single covariate vector the outputs are 1-D and scalar.
    """
    single = np.ndim(X) == 1
    X_net, X_lin = split_covariates(spec, X)
    _, acts = _forward_cache(spec, params, X_net)
    z = acts[-1]
    eta = params.beta0 + z @ params.beta_tilde + X_lin @ params.beta_lin
    if single:
        return z[0], float(eta[0])
    return z, eta


def backward_hidden(spec, params, pres, acts, dz):
    """Backpropagate ``dL/dz`` of the last hidden layer to the hidden weights."""
    _, dact = ACTIVATIONS[spec.activation]
    gW, gb = [], []
    L = len(params.weights)
    if L == 0:
        return gW, gb
    delta = dz * dact(pres[-1], acts[-1])
    for l in range(L - 1, -1, -1):
        gW.append(delta.T @ acts[l])
        gb.append(delta.sum(axis=0))
        if l > 0:
            delta = (delta @ params.weights[l]) * dact(pres[l - 1], acts[l])
    return gW[::-1], gb[::-1]


def check_response(family: str, y: np.ndarray) -> None:
    y = np.asarray(y, dtype=float)
    bad = ~np.isfinite(y)
    if family == "binomial":
        bad |= (y != 0.0) & (y != 1.0)
        what = "binary"
    elif family == "poisson":
        bad |= (y < 0) | (y != np.round(y))
        what = "a non-negative integer"
    else:
        what = "finite"
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"response {y[i]!r} is not {what} for family {family}", row=i)


def family_loglik(family: str, y, eta, log_disp=None):
    """Per-observation log density, its eta-derivative and log-dispersion derivative."""
    if family == "binomial":
        ll = y * eta - np.logaddexp(0.0, eta)
        return ll, y - expit(eta), None
    if family == "poisson":
        mu = np.exp(eta)
        return y * eta - mu - gammaln(y + 1.0), y - mu, None
    s2 = np.exp(log_disp)
    r = y - eta
    ll = -0.5 * (LOG_2PI + log_disp) - 0.5 * r * r / s2
    return ll, r / s2, -0.5 + 0.5 * r * r / s2


def output_grads(layout: ParamLayout, grad, z, X_lin, deta):
    """Accumulate output-layer gradients given ``dL/deta`` per row."""
    grad[layout.beta0_idx] += deta.sum()
    grad[layout.beta_tilde_slice] += z.T @ deta
    if X_lin.shape[1]:
        grad[layout.beta_lin_slice] += X_lin.T @ deta


def loglik_and_grad(layout: ParamLayout, theta, X, y, scale: float = 1.0, *, checked=False):
    """``scale * sum_i log p(y_i | x_i, theta)`` and its gradient by backprop."""
    spec = layout.spec
    y = np.asarray(y, dtype=float)
    if not checked:
        check_response(spec.family, y)
    params = layout.unpack(theta)
    X_net, X_lin = split_covariates(spec, X)
    pres, acts = _forward_cache(spec, params, X_net)
    z = acts[-1]
    eta = params.beta0 + z @ params.beta_tilde + X_lin @ params.beta_lin
    ll, deta, ddisp = family_loglik(spec.family, y, eta, params.log_dispersion)
    grad = np.zeros(layout.n_theta)
    output_grads(layout, grad, z, X_lin, deta)
    gW, gb = backward_hidden(spec, params, pres, acts, np.outer(deta, params.beta_tilde))
    for s, g in zip(layout.w_slices, gW):
        grad[s] = g.ravel()
    for s, g in zip(layout.b_slices, gb):
        grad[s] = g
    if ddisp is not None:
        grad[layout.disp_idx] = ddisp.sum()
    return scale * float(ll.sum()), scale * grad


@dataclass
class ShrinkageState:
    """Adaptive group-lasso and ridge hyperparameters.

    ``alpha_tau`` is the mean of the inverse-Gaussian factor for ``1/tau_j``
    (so it acts as the prior precision of group ``j``), ``beta_tau`` its shape.
    """

    gamma: np.ndarray
    alpha_tau: np.ndarray
    beta_tau: np.ndarray
    gamma_w: float
    m_first: int

    @classmethod
    def initial(cls, layout: ParamLayout, gamma0: float = 1.0, gamma_w0: float = 1.0):
        p = len(layout.groups)
        g = np.full(p, float(gamma0))
        return cls(g, g.copy(), g * g, float(gamma_w0), layout.m_first)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.alpha_tau = np.asarray(self.alpha_tau, dtype=float)
        self.beta_tau = np.asarray(self.beta_tau, dtype=float)
        for name in ("gamma", "alpha_tau", "beta_tau"):
            if np.any(~(getattr(self, name) > 0)):
                raise ConfigurationError(f"{name} must be strictly positive")
        if not self.gamma_w > 0:
            raise ConfigurationError("gamma_w must be strictly positive")

    @property
    def mean_tau(self) -> np.ndarray:
        return 1.0 / self.alpha_tau + 1.0 / self.beta_tau

    def copy(self) -> "ShrinkageState":
        return replace(
            self,
            gamma=self.gamma.copy(),
            alpha_tau=self.alpha_tau.copy(),
            beta_tau=self.beta_tau.copy(),
        )


def log_prior_and_grad(layout: ParamLayout, theta, shrink: ShrinkageState, bias_var: float = 100.0):
    """Gaussian-form log prior (constants dropped) and its gradient.

    Group ``j`` has precision ``alpha_tau[j]``, the ridge set precision
    ``gamma_w`` and biases precision ``1 / bias_var``.  The log-dispersion
    prior is flat.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros(layout.n_theta)
    val = 0.0
    for j, idx in enumerate(layout.groups):
        w = theta[idx]
        a = shrink.alpha_tau[j]
        val -= 0.5 * a * float(w @ w)
        grad[idx] = -a * w
    w = theta[layout.ridge_idx]
    val -= 0.5 * shrink.gamma_w * float(w @ w)
    grad[layout.ridge_idx] = -shrink.gamma_w * w
    b = theta[layout.bias_idx]
    val -= 0.5 * float(b @ b) / bias_var
    grad[layout.bias_idx] = -b / bias_var
    return val, grad


def update_shrinkage(fg: FactorGaussian, layout: ParamLayout, shrink: ShrinkageState) -> ShrinkageState:
    """One empirical-Bayes sweep under the current ``q``; returns a new state.

    Order: inverse-Gaussian factors from the current ``gamma``, then
    ``gamma`` from those factors, then the ridge parameter.
    """
    second_moment = fg.mu[: layout.n_theta] ** 2 + sigma_diag(fg)[: layout.n_theta]
    new = shrink.copy()
    if layout.groups:
        E = np.array([second_moment[idx].sum() for idx in layout.groups])
        new.alpha_tau = shrink.gamma / np.sqrt(E)
        new.beta_tau = shrink.gamma**2
        new.gamma = np.sqrt((shrink.m_first + 1) / (1.0 / new.alpha_tau + 1.0 / new.beta_tau))
    if layout.ridge_idx.size:
        new.gamma_w = layout.ridge_idx.size / float(second_moment[layout.ridge_idx].sum())
    return new


class DeepGLMObjective:
    """Callable ``theta -> (h(theta), grad h(theta))`` with ``h = log prior + log lik``.

    The likelihood is evaluated on the current minibatch and scaled by
    ``n / batch`` so that ``h`` is unbiased for the full-data value.
    """

    def __init__(
        self,
        layout: ParamLayout,
        X,
        y,
        shrink: ShrinkageState | None = None,
        *,
        batch_size: int | None = None,
        bias_var: float = 100.0,
        likelihood_weight: float = 1.0,
        use_prior: bool = True,
    ):
        self.layout = layout
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float)
        if self.X.shape[0] == 0 or self.X.shape[0] != self.y.shape[0]:
            raise DataError("X and y must be non-empty with matching rows")
        check_response(layout.spec.family, self.y)
        self.n = self.y.shape[0]
        self.shrink = shrink if shrink is not None else ShrinkageState.initial(layout)
        self.batch_size = None if batch_size is None or batch_size >= self.n else int(batch_size)
        self.bias_var = bias_var
        self.likelihood_weight = likelihood_weight
        self.use_prior = use_prior
        self._batch = None

    @property
    def n_theta(self) -> int:
        return self.layout.n_theta

    def set_batch(self, idx) -> None:
        self._batch = None if idx is None else np.asarray(idx, dtype=int)

    def resample(self, rng: np.random.Generator) -> None:
        if self.batch_size is not None:
            self._batch = rng.choice(self.n, size=self.batch_size, replace=False)

    def __call__(self, theta):
        if self.likelihood_weight:
            if self._batch is None:
                X, y, scale = self.X, self.y, 1.0
            else:
                X, y = self.X[self._batch], self.y[self._batch]
                scale = self.n / self._batch.size
            val, grad = loglik_and_grad(
                self.layout, theta, X, y, scale * self.likelihood_weight, checked=True
            )
        else:
            val, grad = 0.0, np.zeros(self.layout.n_theta)
        if self.use_prior:
            pv, pg = log_prior_and_grad(self.layout, theta, self.shrink, self.bias_var)
            val += pv
            grad += pg
        return val, grad

    def update_shrinkage(self, fg: FactorGaussian) -> None:
        if self.use_prior:
            self.shrink = update_shrinkage(fg, self.layout, self.shrink)

    def trace_values(self) -> np.ndarray:
        return self.shrink.gamma.copy()


def assemble_h(layout: ParamLayout, X, y, shrink=None, **kwargs) -> DeepGLMObjective:
    """Build the ``h`` callback for a DeepGLM on ``(X, y)``."""
    return DeepGLMObjective(layout, X, y, shrink, **kwargs)

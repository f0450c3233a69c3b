"""Gaussian variational family with factor covariance ``Sigma = B B' + diag(c**2)``.

All products with ``Sigma^{-1}`` go through the Woodbury identity, so no
``d x d`` matrix is ever formed.  The flattened variational parameter is
``lambda = (mu, vec(B) restricted to the lower triangle, c)`` with ``vec``
stacking columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .errors import InputError, NumericalError, SingularScaleError

C_MIN = 1e-8
LOG_2PI = np.log(2.0 * np.pi)


def tril_mask(d: int, f: int) -> np.ndarray:
    """Boolean ``d x f`` mask of the free loadings (``B_ij`` with ``j <= i``)."""
    return np.arange(d)[:, None] >= np.arange(f)[None, :]


def n_free_loadings(d: int, f: int) -> int:
    return int(tril_mask(d, f).sum())


@dataclass
class FactorGaussian:
    """Variational parameters ``(mu, B, c)``.

    ``B`` is kept with its upper triangle at exactly zero; ``c`` is stored
    unconstrained (only ``c**2`` enters ``Sigma``).
    """

    mu: np.ndarray
    B: np.ndarray
    c: np.ndarray
    _mask: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.B = np.array(self.B, dtype=float)
        if self.B.ndim == 1:
            self.B = self.B[:, None]
        self.c = np.asarray(self.c, dtype=float)
        d = self.mu.shape[0]
        if self.mu.ndim != 1 or self.c.shape != (d,) or self.B.ndim != 2 or self.B.shape[0] != d:
            raise InputError(
                f"inconsistent shapes mu{self.mu.shape}, B{self.B.shape}, c{self.c.shape}"
            )
        self._mask = tril_mask(d, self.B.shape[1])
        self.B[~self._mask] = 0.0

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    @property
    def f(self) -> int:
        return self.B.shape[1]

    @property
    def n_params(self) -> int:
        return 2 * self.d + int(self._mask.sum())

    def pack(self) -> np.ndarray:
        """Flatten to ``lambda``."""
        return np.concatenate([self.mu, self.B.T[self._mask.T], self.c])

    @classmethod
    def unpack(cls, lam: np.ndarray, d: int, f: int) -> "FactorGaussian":
        mu, B, c = unpack_blocks(lam, d, f)
        return cls(mu.copy(), B, c.copy())

    def copy(self) -> "FactorGaussian":
        return FactorGaussian(self.mu.copy(), self.B.copy(), self.c.copy())

    def dense_sigma(self) -> np.ndarray:
        """Dense covariance; for tests and small problems only."""
        return self.B @ self.B.T + np.diag(self.c**2)


def unpack_blocks(lam: np.ndarray, d: int, f: int):
    """Split a flat ``lambda``-shaped vector into ``(x_mu, X_B, x_c)``.

    ``X_B`` is a fresh ``d x f`` array with zeros in the upper triangle.
    """
    lam = np.asarray(lam, dtype=float)
    mask = tril_mask(d, f)
    nb = int(mask.sum())
    if lam.shape != (2 * d + nb,):
        raise InputError(f"expected flat vector of length {2 * d + nb}, got {lam.shape}")
    XB = np.zeros((f, d))
    XB[mask.T] = lam[d : d + nb]
    return lam[:d], XB.T, lam[d + nb :]


def pack_blocks(x_mu: np.ndarray, X_B: np.ndarray, x_c: np.ndarray) -> np.ndarray:
    d, f = X_B.shape
    mask = tril_mask(d, f)
    return np.concatenate([x_mu, X_B.T[mask.T], x_c])


def _check_scales(c: np.ndarray) -> np.ndarray:
    ac = np.abs(c)
    if not np.all(np.isfinite(ac)):
        raise NumericalError("non-finite idiosyncratic scale c")
    if np.any(ac < C_MIN):
        i = int(np.argmin(ac))
        raise SingularScaleError(f"|c_{i}| = {ac[i]:.3g} is below {C_MIN:g}")
    with np.errstate(over="ignore"):
        return 1.0 / (c * c)


class _Woodbury:
    """Cached pieces of the Woodbury inverse for one ``(B, c)``."""

    def __init__(self, fg: FactorGaussian):
        self.B = fg.B
        self.dinv2 = _check_scales(fg.c)
        self.DB = self.dinv2[:, None] * fg.B
        with np.errstate(over="ignore", invalid="ignore"):
            M = np.eye(fg.f) + fg.B.T @ self.DB
        if not np.all(np.isfinite(M)):
            raise NumericalError("I + B'D^-2B is not finite")
        try:
            self.chol = linalg.cho_factor(M, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError("I + B'D^-2B is not positive definite") from exc
        self.logdet = 2.0 * np.sum(np.log(np.abs(fg.c))) + 2.0 * np.sum(
            np.log(np.diag(self.chol[0]))
        )

    def solve(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        vec = X.ndim == 1
        if vec:
            X = X[:, None]
        Y = self.dinv2[:, None] * X
        Z = linalg.cho_solve(self.chol, self.B.T @ Y)
        out = Y - self.DB @ Z
        return out[:, 0] if vec else out


def sigma_inv_mult(fg: FactorGaussian, X: np.ndarray) -> np.ndarray:
    """Return ``Sigma^{-1} X`` for a vector or a ``d x k`` matrix.

    Cost is ``O(d f k + f^3)``.  Raises :class:`SingularScaleError` when some
    ``|c_i| < 1e-8``.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[0] != fg.d:
        raise InputError(f"X has {X.shape[0]} rows, expected {fg.d}")
    return _Woodbury(fg).solve(X)


def sigma_mult(fg: FactorGaussian, X: np.ndarray) -> np.ndarray:
    """Return ``Sigma X`` without forming ``Sigma``."""
    X = np.asarray(X, dtype=float)
    c2 = fg.c**2
    if X.ndim == 1:
        return fg.B @ (fg.B.T @ X) + c2 * X
    return fg.B @ (fg.B.T @ X) + c2[:, None] * X


def sigma_diag(fg: FactorGaussian) -> np.ndarray:
    """Diagonal of ``Sigma``: ``sum_j B_ij**2 + c_i**2``."""
    return np.einsum("ij,ij->i", fg.B, fg.B) + fg.c**2


def log_det_sigma(fg: FactorGaussian) -> float:
    """``log|Sigma|`` by the matrix determinant lemma."""
    return _Woodbury(fg).logdet


def sample_theta(fg: FactorGaussian, eps1: np.ndarray, eps2: np.ndarray) -> np.ndarray:
    """``mu + B eps1 + c * eps2``; batched if ``eps`` are 2-D (one draw per row)."""
    eps1 = np.asarray(eps1, dtype=float)
    eps2 = np.asarray(eps2, dtype=float)
    if eps1.shape[-1] != fg.f or eps2.shape[-1] != fg.d or eps1.shape[:-1] != eps2.shape[:-1]:
        raise InputError(
            f"noise shapes {eps1.shape}, {eps2.shape} do not match d={fg.d}, f={fg.f}"
        )
    return fg.mu + eps1 @ fg.B.T + fg.c * eps2


def grad_log_q(fg: FactorGaussian, theta: np.ndarray) -> np.ndarray:
    """``grad_theta log q(theta) = -Sigma^{-1} (theta - mu)``."""
    theta = np.asarray(theta, dtype=float)
    return -sigma_inv_mult(fg, theta - fg.mu)


def log_q(fg: FactorGaussian, theta: np.ndarray) -> np.ndarray | float:
    """Log density; ``theta`` may be ``(d,)`` or ``(S, d)``."""
    wb = _Woodbury(fg)
    R = np.atleast_2d(np.asarray(theta, dtype=float) - fg.mu)
    quad = np.einsum("sd,sd->s", R, wb.solve(R.T).T)
    out = -0.5 * (fg.d * LOG_2PI + wb.logdet + quad)
    return out if np.ndim(theta) > 1 else float(out[0])


@dataclass
class LBGradientEstimate:
    """Monte Carlo estimate of the lower-bound gradient and value."""

    grad_mu: np.ndarray
    grad_B: np.ndarray
    grad_c: np.ndarray
    lb_value: float
    lb_samples: np.ndarray

    def pack(self) -> np.ndarray:
        return pack_blocks(self.grad_mu, self.grad_B, self.grad_c)

    @property
    def lb_se(self) -> float:
        s = self.lb_samples
        return float(np.std(s, ddof=1) / np.sqrt(s.size)) if s.size > 1 else np.nan


HAndGrad = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def estimate_lb_gradient(
    fg: FactorGaussian,
    h_and_grad: HAndGrad,
    S: int = 1,
    rng: np.random.Generator | None = None,
    *,
    vectorized: bool = False,
    antithetic: bool = False,
) -> LBGradientEstimate:
    """Reparametrised lower-bound gradient with the score term dropped.

    For each draw ``theta_s = mu + B eps1 + c * eps2`` the vector
    ``u_s = grad h(theta_s) + Sigma^{-1}(B eps1 + c * eps2)`` gives
    ``grad_mu = u_s``, ``grad_B = u_s eps1'`` (lower triangle) and
    ``grad_c = u_s * eps2``, all averaged over ``S`` draws.  The same draws give
    the lower-bound estimate ``mean(h(theta_s) - log q(theta_s))``.

    Parameters
    ----------
    fg : FactorGaussian
    h_and_grad : callable
        ``theta -> (h(theta), grad h(theta))``.  With ``vectorized=True`` it
        receives an ``(S, d)`` array and returns ``(S,)`` and ``(S, d)``.
    S : int
        Number of draws.
    rng : numpy.random.Generator
    antithetic : bool
        Pair each draw with its negation (``S`` must be even).
    """
    if S < 1:
        raise InputError("S must be >= 1")
    if rng is None:
        rng = np.random.default_rng()
    d, f = fg.d, fg.f
    if antithetic:
        if S % 2:
            raise InputError("antithetic sampling needs an even S")
        e1 = rng.standard_normal((S // 2, f))
        e2 = rng.standard_normal((S // 2, d))
        E1, E2 = np.vstack([e1, -e1]), np.vstack([e2, -e2])
    else:
        E1 = rng.standard_normal((S, f))
        E2 = rng.standard_normal((S, d))
    R = E1 @ fg.B.T + fg.c * E2
    thetas = fg.mu + R

    if vectorized:
        H, G = h_and_grad(thetas)
        H = np.asarray(H, dtype=float).reshape(S)
        G = np.asarray(G, dtype=float).reshape(S, d)
    else:
        H = np.empty(S)
        G = np.empty((S, d))
        for s in range(S):
            hs, gs = h_and_grad(thetas[s])
            H[s] = hs
            G[s] = gs
    bad = ~(np.isfinite(H) & np.all(np.isfinite(G), axis=1))
    if bad.any():
        s = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"h or its gradient is not finite at draw {s}")

    wb = _Woodbury(fg)
    SiR = wb.solve(R.T).T
    U = G + SiR
    grad_mu = U.mean(axis=0)
    grad_B = (U.T @ E1) / S
    grad_B[~tril_mask(d, f)] = 0.0
    grad_c = np.einsum("sd,sd->d", U, E2) / S
    logq = -0.5 * (d * LOG_2PI + wb.logdet + np.einsum("sd,sd->s", R, SiR))
    lb = H - logq
    return LBGradientEstimate(grad_mu, grad_B, grad_c, float(lb.mean()), lb)

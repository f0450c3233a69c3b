"""Natural gradients for the factor-Gaussian family.

The Fisher information over ``lambda = (mu, vec(B), c)`` is block diagonal
once the ``(B, c)`` cross block is dropped.  For ``f > 1`` the ``c`` block is
further replaced by its diagonal-``Sigma`` approximation and the system is
solved by matrix-free conjugate gradients.  For ``f = 1`` every block has a
closed-form inverse and the natural gradient costs ``O(d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateLoadingError,
    InputError,
    NotPositiveDefiniteError,
    SingularBlockError,
)
from .factor_gaussian import (
    FactorGaussian,
    _check_scales,
    _Woodbury,
    pack_blocks,
    sigma_diag,
    tril_mask,
    unpack_blocks,
)

DENSE_ORACLE_MAX_PARAMS = 4000


@dataclass(frozen=True)
class CGConfig:
    """Conjugate-gradient settings.  ``jitter=None`` picks a scale-aware default."""

    tol: float = 1e-4
    max_iter: int = 200
    jitter: float | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigurationError("CG tol must be positive")
        if self.max_iter < 1:
            raise ConfigurationError("CG max_iter must be >= 1")
        if self.jitter is not None and self.jitter < 0:
            raise ConfigurationError("CG jitter must be >= 0")


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    rel_residual: float


class FisherOperator:
    """Matrix-free approximate Fisher ``I_F(lambda)`` with cached Woodbury pieces.

    Memory is ``O(d f)``.
    """

    def __init__(self, fg: FactorGaussian, jitter: float = 0.0):
        self.d, self.f = fg.d, fg.f
        self._wb = _Woodbury(fg)
        self._BtSiB = fg.B.T @ self._wb.solve(fg.B)
        sd = sigma_diag(fg)
        self.i33 = 2.0 * fg.c**2 / sd**2
        self._mask = tril_mask(self.d, self.f)
        self.jitter = float(jitter)

    @classmethod
    def default_jitter(cls, fg: FactorGaussian) -> float:
        _check_scales(fg.c)
        sd = sigma_diag(fg)
        return 1e-6 * float(np.mean(2.0 * fg.c**2 / sd**2))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x_mu, X_B, x_c = unpack_blocks(x, self.d, self.f)
        Si = self._wb.solve(np.column_stack([x_mu, X_B]))
        out_B = 2.0 * Si[:, 1:] @ self._BtSiB
        out_B[~self._mask] = 0.0
        out = pack_blocks(Si[:, 0], out_B, self.i33 * x_c)
        if self.jitter:
            out += self.jitter * x
        return out

    __call__ = matvec


def fisher_vec_product(fg: FactorGaussian, x: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Apply the approximate Fisher (cross block zero, diagonal ``c`` block) to ``x``."""
    return FisherOperator(fg, jitter).matvec(x)


def conjugate_gradient(matvec, g: np.ndarray, tol: float, max_iter: int, x0=None) -> CGResult:
    """Plain CG for a symmetric positive definite operator."""
    g = np.asarray(g, dtype=float)
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return CGResult(np.zeros_like(g), True, 0, 0.0)
    if x0 is None or not np.all(np.isfinite(x0)):
        x = np.zeros_like(g)
        r = g.copy()
    else:
        x = np.array(x0, dtype=float)
        r = g - matvec(x)
    p = r.copy()
    rs = float(r @ r)
    best_x, best_res = x.copy(), np.sqrt(rs) / gnorm
    it = 0
    while it < max_iter and np.sqrt(rs) > tol * gnorm:
        Ap = matvec(p)
        pAp = float(p @ Ap)
        if not pAp > 0.0:
            raise NotPositiveDefiniteError(
                f"non-positive curvature {pAp:.3g} at CG iteration {it}; increase the jitter"
            )
        a = rs / pAp
        x += a * p
        r -= a * Ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1
        res = np.sqrt(rs) / gnorm
        if res < best_res:
            best_x, best_res = x.copy(), res
    converged = best_res <= tol
    return CGResult(x if converged else best_x, converged, it, float(best_res))


def natgrad_cg(
    fg: FactorGaussian,
    g: np.ndarray,
    cfg: CGConfig = CGConfig(),
    x0: np.ndarray | None = None,
) -> CGResult:
    """Solve ``I_F x = g`` by CG using only Fisher-vector products.

    ``x0`` warm-starts the iteration (typically the previous natural
    gradient).  If CG stops at ``max_iter`` the best iterate is returned with
    ``converged=False``.
    """
    jitter = FisherOperator.default_jitter(fg) if cfg.jitter is None else cfg.jitter
    op = FisherOperator(fg, jitter)
    return conjugate_gradient(op.matvec, g, cfg.tol, cfg.max_iter, x0)


@dataclass(frozen=True)
class Rank1Workspace:
    """Scalars and vectors of the closed-form ``f = 1`` inverse Fisher.

    With ``b`` the loading vector, ``kappa1 = sum b**2 / c**2`` and
    ``h = b / c**2 / sqrt(1 + kappa1)`` so that ``Sigma^{-1} = D^-2 - h h'``.
    The exact ``c`` block is ``2 (diag(v1) + v2 v2')`` with ``v1 = c**-2 - 2 h**2``
    and ``v2 = c * h**2``.
    """

    kappa1: float
    kappa2: float
    h_vec: np.ndarray
    v1: np.ndarray
    v2: np.ndarray

    @classmethod
    def from_factors(cls, b: np.ndarray, c: np.ndarray) -> "Rank1Workspace":
        dinv2 = _check_scales(c)
        kappa1 = float(np.sum(b * b * dinv2))
        if kappa1 == 0.0:
            raise DegenerateLoadingError("loading vector B is zero; re-initialise B")
        h = b * dinv2 / np.sqrt(1.0 + kappa1)
        h2 = h * h
        v1 = dinv2 - 2.0 * h2
        if np.any(v1 == 0.0):
            raise SingularBlockError(f"v1 vanishes at index {int(np.flatnonzero(v1 == 0.0)[0])}")
        v2 = c * h2
        denom = 1.0 + float(np.sum(v2 * v2 / v1))
        if denom == 0.0 or not np.isfinite(denom):
            raise SingularBlockError("the c block of the Fisher information is singular")
        kappa2 = 0.5 / denom
        return cls(kappa1, kappa2, h, v1, v2)


def natgrad_rank1(fg: FactorGaussian, g: np.ndarray) -> np.ndarray:
    """Closed-form natural gradient for one factor, ``O(d)`` time and memory.

    ``g`` is laid out as ``(g_mu, g_B, g_c)``, each of length ``d``.
    """
    if fg.f != 1:
        raise InputError(f"natgrad_rank1 needs f = 1, got f = {fg.f}")
    d = fg.d
    g = np.asarray(g, dtype=float)
    if g.shape != (3 * d,):
        raise InputError(f"gradient length {g.shape} does not match 3d = {3 * d}")
    b, c = fg.B[:, 0], fg.c
    ws = Rank1Workspace.from_factors(b, c)
    c2 = c * c
    g1, g2, g3 = g[:d], g[d : 2 * d], g[2 * d :]
    out = np.empty(3 * d)
    out[:d] = (g1 @ b) * b + c2 * g1
    out[d : 2 * d] = (1.0 + ws.kappa1) / (2.0 * ws.kappa1) * ((g2 @ b) * b + c2 * g2)
    u = ws.v2 / ws.v1
    # Sherman-Morrison on diag(v1) + v2 v2' subtracts the rank-one correction.
    out[2 * d :] = 0.5 * g3 / ws.v1 - ws.kappa2 * (u @ g3) * u
    return out


def fisher_dense_oracle(fg: FactorGaussian, exact_c_block: bool | None = None) -> np.ndarray:
    """Densely assembled Fisher over the flattened ``lambda``; tests only.

    ``exact_c_block`` defaults to ``True`` for ``f = 1`` (the closed-form
    rank-1 system) and ``False`` otherwise (the diagonal-``Sigma`` block used
    by :func:`fisher_vec_product`).  The ``(B, c)`` cross block is zero in
    both cases.
    """
    if fg.n_params > DENSE_ORACLE_MAX_PARAMS:
        raise ConfigurationError(
            f"{fg.n_params} parameters exceeds the dense oracle limit {DENSE_ORACLE_MAX_PARAMS}"
        )
    if exact_c_block is None:
        exact_c_block = fg.f == 1
    _check_scales(fg.c)
    d, f = fg.d, fg.f
    Sigma = fg.dense_sigma()
    Sinv = np.linalg.inv(Sigma)
    Sinv = 0.5 * (Sinv + Sinv.T)
    keep = tril_mask(d, f).ravel(order="F")
    I22 = 2.0 * np.kron(fg.B.T @ Sinv @ fg.B, Sinv)[np.ix_(keep, keep)]
    if exact_c_block:
        D = np.diag(fg.c)
        I33 = 2.0 * (D @ Sinv) * (Sinv @ D)
    else:
        I33 = np.diag(2.0 * fg.c**2 / np.diag(Sigma) ** 2)
    nb = int(keep.sum())
    n = 2 * d + nb
    M = np.zeros((n, n))
    M[:d, :d] = Sinv
    M[d : d + nb, d : d + nb] = I22
    M[d + nb :, d + nb :] = I33
    return 0.5 * (M + M.T)

"""Per-subject Laplace fits and importance-sampled likelihood/score terms.

For subject ``i`` with rows ``t`` the linear predictor is
``eta0[t] + R[t] @ alpha_i`` where ``R`` holds the random-effect design
(``[1, z_t]`` for output-layer effects).  Every subject is processed
independently:

1. Newton iterations (step halving, warm start) find the mode of
   ``f(alpha) = sum_t log p(y_t | eta_t) - alpha' Gamma^-1 alpha / 2``;
   for the gaussian family the mode is the conjugate closed form.
2. ``N`` draws from ``N(mode, s * H^-1)`` (``H`` the negative Hessian at
   the mode, ``s`` the proposal scale) give log weights
   ``log p(y | alpha) + log N(alpha; 0, Gamma) - log proposal(alpha)``.
3. The self-normalised weights average the complete-data scores
   (Fisher's identity).

Two implementations share this contract: a numba kernel with explicit
loops and a numpy fallback that vectorises over draws.  ``NAGVAC_DISABLE_NUMBA``
selects the fallback.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, gammaln, logsumexp

from ._jit import USE_NUMBA, njit

GAUSSIAN, BINOMIAL, POISSON = 0, 1, 2
FAMILY_CODES = {"gaussian": GAUSSIAN, "binomial": BINOMIAL, "poisson": POISSON}
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_MAX_HALVINGS = 50
_DEC_TOL = 1e-10


# ---------------------------------------------------------------- numba path


@njit
def _ll(family, y, eta, sigma2):
    if family == GAUSSIAN:
        r = y - eta
        return -_HALF_LOG_2PI - 0.5 * math.log(sigma2) - 0.5 * r * r / sigma2
    if family == BINOMIAL:
        # y * eta - log(1 + e^eta), overflow-safe
        return y * eta - (max(eta, 0.0) + math.log1p(math.exp(-abs(eta))))
    return y * eta - math.exp(eta) - math.lgamma(y + 1.0)


@njit
def _dll(family, y, eta, sigma2):
    if family == GAUSSIAN:
        return (y - eta) / sigma2
    if family == BINOMIAL:
        if eta >= 0.0:
            return y - 1.0 / (1.0 + math.exp(-eta))
        e = math.exp(eta)
        return y - e / (1.0 + e)
    return y - math.exp(eta)


@njit
def _curv(family, eta, sigma2):
    """Negative second derivative of the log density in eta."""
    if family == GAUSSIAN:
        return 1.0 / sigma2
    if family == BINOMIAL:
        p = 1.0 / (1.0 + math.exp(-eta))
        return p * (1.0 - p)
    return math.exp(eta)


@njit
def _cholesky(A, L):
    """Lower Cholesky factor of ``A`` into ``L``; returns False if not PD."""
    q = A.shape[0]
    for j in range(q):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, q):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
        for i in range(j):
            L[i, j] = 0.0
    return True


@njit
def _chol_solve(L, b, out):
    q = L.shape[0]
    for i in range(q):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]
    for i in range(q - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, q):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]


@njit
def _objective(family, eta0, R, y, a, b, gamma, sigma2, alpha):
    q = alpha.shape[0]
    val = 0.0
    for t in range(a, b):
        e = eta0[t]
        for k in range(q):
            e += R[t, k] * alpha[k]
        val += _ll(family, y[t], e, sigma2)
    for k in range(q):
        val -= 0.5 * alpha[k] * alpha[k] / gamma[k]
    return val


@njit
def _grad_hess(family, eta0, R, y, a, b, gamma, sigma2, alpha, g, H):
    q = alpha.shape[0]
    for k in range(q):
        g[k] = -alpha[k] / gamma[k]
        for l in range(q):
            H[k, l] = 0.0
        H[k, k] = 1.0 / gamma[k]
    for t in range(a, b):
        e = eta0[t]
        for k in range(q):
            e += R[t, k] * alpha[k]
        r = _dll(family, y[t], e, sigma2)
        w = _curv(family, e, sigma2)
        for k in range(q):
            g[k] += r * R[t, k]
            for l in range(q):
                H[k, l] += w * R[t, k] * R[t, l]


@njit
def _panel_numba(family, eta0, R, y, offsets, gamma, sigma2, alpha0, eps, scale, tol, max_iter):
    n, q = R.shape
    ns = offsets.shape[0] - 1
    N = eps.shape[1]
    modes = np.empty((ns, q))
    covs = np.empty((ns, q, q))
    iters = np.zeros(ns, dtype=np.int64)
    conv = np.zeros(ns, dtype=np.bool_)
    status = np.zeros(ns, dtype=np.int64)
    logL = np.empty(ns)
    rbar = np.zeros(n)
    dR = np.zeros((n, q))
    dlog_gamma = np.zeros(q)
    dlog_sigma2 = 0.0

    g = np.empty(q)
    H = np.empty((q, q))
    L = np.zeros((q, q))
    step = np.empty(q)
    alpha = np.empty(q)
    cand = np.empty(q)
    draws = np.empty((N, q))
    logw = np.empty(N)
    zero = np.zeros(q)
    log_det_gamma = 0.0
    for k in range(q):
        log_det_gamma += math.log(gamma[k])
    sqrt_s = math.sqrt(scale)

    for i in range(ns):
        a, b = offsets[i], offsets[i + 1]
        # --- Laplace mode
        if family == GAUSSIAN:
            _grad_hess(family, eta0, R, y, a, b, gamma, sigma2, zero, g, H)
            if not _cholesky(H, L):
                status[i] = 1
                continue
            _chol_solve(L, g, alpha)
            iters[i] = 1
            conv[i] = True
        else:
            for k in range(q):
                alpha[k] = alpha0[i, k]
            f = _objective(family, eta0, R, y, a, b, gamma, sigma2, alpha)
            for it in range(max_iter + 1):
                _grad_hess(family, eta0, R, y, a, b, gamma, sigma2, alpha, g, H)
                gmax = 0.0
                for k in range(q):
                    gmax = max(gmax, abs(g[k]))
                if gmax <= tol:
                    conv[i] = True
                    break
                if it == max_iter:
                    break
                if not _cholesky(H, L):
                    status[i] = 1
                    break
                _chol_solve(L, g, step)
                s = 1.0
                dec = 0.0
                for k in range(q):
                    dec += g[k] * step[k]
                # below the resolution of f a line search cannot judge the step
                accepted = dec <= _DEC_TOL * (1.0 + abs(f))
                if accepted:
                    for k in range(q):
                        cand[k] = alpha[k] + step[k]
                    fc = _objective(family, eta0, R, y, a, b, gamma, sigma2, cand)
                for _ in range(0 if accepted else _MAX_HALVINGS):
                    for k in range(q):
                        cand[k] = alpha[k] + s * step[k]
                    fc = _objective(family, eta0, R, y, a, b, gamma, sigma2, cand)
                    if fc >= f:
                        accepted = True
                        break
                    s *= 0.5
                if not accepted:
                    break
                for k in range(q):
                    alpha[k] = cand[k]
                f = fc
                iters[i] = it + 1
            if status[i] != 0:
                continue
            _grad_hess(family, eta0, R, y, a, b, gamma, sigma2, alpha, g, H)
            if not _cholesky(H, L):
                status[i] = 1
                continue
        for k in range(q):
            modes[i, k] = alpha[k]
        # covariance H^-1 column by column
        for k in range(q):
            for l in range(q):
                step[l] = 1.0 if l == k else 0.0
            _chol_solve(L, step, cand)
            for l in range(q):
                covs[i, l, k] = cand[l]

        # --- importance sampling: alpha = mode + sqrt(s) L^-T eps
        log_det_L = 0.0
        for k in range(q):
            log_det_L += math.log(L[k, k])
        lq_const = -q * _HALF_LOG_2PI + log_det_L - 0.5 * q * math.log(scale)
        lmax = -np.inf
        for j in range(N):
            ee = 0.0
            for k in range(q - 1, -1, -1):
                s = eps[i, j, k]
                for l in range(k + 1, q):
                    s -= L[l, k] * step[l]
                step[k] = s / L[k, k]
                ee += eps[i, j, k] * eps[i, j, k]
            lp = -q * _HALF_LOG_2PI - 0.5 * log_det_gamma
            for k in range(q):
                draws[j, k] = alpha[k] + sqrt_s * step[k]
                lp -= 0.5 * draws[j, k] * draws[j, k] / gamma[k]
            lw = lp - (lq_const - 0.5 * ee)
            for t in range(a, b):
                e = eta0[t]
                for k in range(q):
                    e += R[t, k] * draws[j, k]
                lw += _ll(family, y[t], e, sigma2)
            logw[j] = lw
            if lw > lmax:
                lmax = lw
        if not math.isfinite(lmax):
            status[i] = 2
            continue
        tot = 0.0
        for j in range(N):
            logw[j] = math.exp(logw[j] - lmax)
            tot += logw[j]
        logL[i] = lmax + math.log(tot) - math.log(N)
        for j in range(N):
            W = logw[j] / tot
            for t in range(a, b):
                e = eta0[t]
                for k in range(q):
                    e += R[t, k] * draws[j, k]
                r = _dll(family, y[t], e, sigma2)
                rbar[t] += W * r
                for k in range(q):
                    dR[t, k] += W * r * draws[j, k]
                if family == GAUSSIAN:
                    res = y[t] - e
                    dlog_sigma2 += W * (-0.5 + 0.5 * res * res / sigma2)
            for k in range(q):
                dlog_gamma[k] += W * (-0.5 + 0.5 * draws[j, k] * draws[j, k] / gamma[k])
    return modes, covs, iters, conv, status, logL, rbar, dR, dlog_gamma, dlog_sigma2


# ---------------------------------------------------------------- numpy path


def _np_terms(family, y, eta, sigma2):
    """Log density, score and curvature in eta (vectorised)."""
    if family == GAUSSIAN:
        r = y - eta
        return -_HALF_LOG_2PI - 0.5 * np.log(sigma2) - 0.5 * r * r / sigma2, r / sigma2, np.full_like(eta, 1.0 / sigma2)
    if family == BINOMIAL:
        p = expit(eta)
        return y * eta - np.logaddexp(0.0, eta), y - p, p * (1.0 - p)
    mu = np.exp(eta)
    return y * eta - mu - gammaln(y + 1.0), y - mu, mu


def _np_laplace(family, e0, Ri, yi, gamma, sigma2, alpha, tol, max_iter):
    """Return ``(mode, H, iterations, converged)`` for one subject."""
    ginv = 1.0 / gamma

    def fval(a):
        return _np_terms(family, yi, e0 + Ri @ a, sigma2)[0].sum() - 0.5 * np.sum(a * a * ginv)

    def grad_hess(a):
        _, r, w = _np_terms(family, yi, e0 + Ri @ a, sigma2)
        return Ri.T @ r - a * ginv, (Ri.T * w) @ Ri + np.diag(ginv)

    if family == GAUSSIAN:
        g, H = grad_hess(np.zeros_like(alpha))
        return np.linalg.solve(H, g), H, 1, True
    f = fval(alpha)
    it = 0
    while True:
        g, H = grad_hess(alpha)
        if np.max(np.abs(g)) <= tol:
            return alpha, H, it, True
        if it == max_iter:
            return alpha, H, it, False
        step = np.linalg.solve(H, g)
        if g @ step <= _DEC_TOL * (1.0 + abs(f)):
            cand = alpha + step
            fc = fval(cand)
        else:
            s = 1.0
            for _ in range(_MAX_HALVINGS):
                cand = alpha + s * step
                fc = fval(cand)
                if fc >= f:
                    break
                s *= 0.5
            else:
                _, H = grad_hess(alpha)
                return alpha, H, it, False
        alpha, f = cand, fc
        it += 1


def _panel_numpy(family, eta0, R, y, offsets, gamma, sigma2, alpha0, eps, scale, tol, max_iter):
    n, q = R.shape
    ns = offsets.shape[0] - 1
    N = eps.shape[1]
    modes = np.empty((ns, q))
    covs = np.empty((ns, q, q))
    iters = np.zeros(ns, dtype=np.int64)
    conv = np.zeros(ns, dtype=bool)
    status = np.zeros(ns, dtype=np.int64)
    logL = np.empty(ns)
    rbar = np.zeros(n)
    dR = np.zeros((n, q))
    dlog_gamma = np.zeros(q)
    dlog_sigma2 = 0.0
    log_det_gamma = np.sum(np.log(gamma))

    for i in range(ns):
        sl = slice(offsets[i], offsets[i + 1])
        e0, Ri, yi = eta0[sl], R[sl], y[sl]
        mode, H, iters[i], conv[i] = _np_laplace(
            family, e0, Ri, yi, gamma, sigma2, alpha0[i].copy(), tol, max_iter
        )
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            status[i] = 1
            continue
        modes[i] = mode
        covs[i] = np.linalg.inv(H)
        A = mode + np.sqrt(scale) * solve_triangular(L, eps[i].T, lower=True, trans="T").T
        log_prop = (
            -q * _HALF_LOG_2PI
            + np.sum(np.log(np.diag(L)))
            - 0.5 * q * np.log(scale)
            - 0.5 * np.sum(eps[i] ** 2, axis=1)
        )
        log_prior = -q * _HALF_LOG_2PI - 0.5 * log_det_gamma - 0.5 * np.sum(A * A / gamma, axis=1)
        E = e0[None, :] + A @ Ri.T  # (N, T)
        ll, r, _ = _np_terms(family, yi[None, :], E, sigma2)
        lw = ll.sum(axis=1) + log_prior - log_prop
        if not np.isfinite(lw.max()):
            status[i] = 2
            continue
        logL[i] = logsumexp(lw) - np.log(N)
        W = np.exp(lw - lw.max())
        W /= W.sum()
        Wr = W[:, None] * r  # (N, T)
        rbar[sl] = Wr.sum(axis=0)
        dR[sl] = Wr.T @ A
        dlog_gamma += W @ (-0.5 + 0.5 * A * A / gamma)
        if family == GAUSSIAN:
            res = yi[None, :] - E
            dlog_sigma2 += float(np.sum(W[:, None] * (-0.5 + 0.5 * res * res / sigma2)))
    return modes, covs, iters, conv, status, logL, rbar, dR, dlog_gamma, dlog_sigma2


def panel_laplace_is(
    family: str,
    eta0,
    R,
    y,
    offsets,
    gamma,
    sigma2: float,
    alpha0,
    eps,
    scale: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 100,
    *,
    use_numba: bool | None = None,
):
    """Run the per-subject Laplace + IS kernel.

    Rows of ``eta0``, ``R`` and ``y`` must be grouped by subject, subject
    ``i`` owning rows ``offsets[i]:offsets[i + 1]``.  ``eps`` is an
    ``(n_subjects, N, q)`` array of standard normals.

    Returns
    -------
    tuple
        ``(modes, covs, iters, converged, status, logL, rbar, dR,
        dlog_gamma, dlog_sigma2)`` where ``status`` is 0 (ok),
        1 (Hessian not positive definite) or 2 (all weights underflowed),
        ``rbar[t]`` and ``dR[t]`` are the weighted derivatives of the
        log-likelihood with respect to ``eta0[t]`` and ``R[t]``, and the
        last two entries are derivatives with respect to ``log Gamma`` and
        ``log sigma^2`` summed over subjects.
    """
    fam = FAMILY_CODES[family]
    args = (
        fam,
        np.ascontiguousarray(eta0, dtype=np.float64),
        np.ascontiguousarray(R, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(gamma, dtype=np.float64),
        float(sigma2),
        np.ascontiguousarray(alpha0, dtype=np.float64),
        np.ascontiguousarray(eps, dtype=np.float64),
        float(scale),
        float(tol),
        int(max_iter),
    )
    if use_numba is None:
        use_numba = USE_NUMBA
    return (_panel_numba if use_numba else _panel_numpy)(*args)

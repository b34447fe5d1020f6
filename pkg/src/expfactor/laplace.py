"""Per-row latent posterior machinery.

Fisher scoring for the row modes (with or without the N(0, I) prior), the
expected Hessian ``V^T D_i V`` and the Gaussian posterior approximation. The
``*_rows`` functions process all rows of a data matrix at once; the per-row
functions are thin wrappers around them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .family import QuasiFamily
from .model import EFMParams

MAX_ITER = 100
TOL = 1e-8
MAX_HALVINGS = 20


@dataclass
class PosteriorApprox:
    """Gaussian approximation of ``Lam_i | X_i`` (batched over leading axes)."""

    mode: np.ndarray
    precision: np.ndarray
    post_mean: np.ndarray
    post_cov: np.ndarray
    converged: np.ndarray | bool = True


def working_response(fam: QuasiFamily, x, eta):
    """``Z = eta + (x - mu) / (g^-1)'(eta)``."""
    eta = np.asarray(eta, dtype=float)
    d = fam.mu_eta(eta)
    return eta + (np.asarray(x, dtype=float) - fam.linkinv(eta)) / d


def _row_objective(X, W, Lam, theta, fam, prior):
    # integral term only; the normalization term does not depend on Lam
    mu = fam.linkinv(Lam @ theta.V.T + theta.eta0)
    obj = np.sum(W / theta.phi * fam.kernel(X, mu), axis=1)
    if prior:
        obj -= 0.5 * np.sum(Lam ** 2, axis=1)
    return obj


def pair_products(A):
    """Row-wise outer products ``a a^T`` flattened, shape (rows, k*k)."""
    k = A.shape[-1]
    return (A[:, :, None] * A[:, None, :]).reshape(A.shape[0], k * k)


def _weighted_gram(S, V):
    # stack of V^T Diag(S_i) V as one matrix product
    q = V.shape[1]
    return (S @ pair_products(V)).reshape(S.shape[0], q, q)


def expected_hessian_rows(X, W, Lam, theta: EFMParams, fam: QuasiFamily) -> np.ndarray:
    """Stack of ``V^T Diag(S_i) V`` for each row, shape (n, q, q)."""
    eta = Lam @ theta.V.T + theta.eta0
    S, _ = fam.score_terms(X, eta, theta.phi, W)
    return _weighted_gram(S, theta.V)


def _solve_psd(A, b):
    q = A.shape[-1]
    A = A.copy()
    ev = np.linalg.eigvalsh(A)
    top = np.maximum(ev[:, -1], 0.0)
    sing = ev[:, 0] <= 1e-12 * np.maximum(top, 1e-300)
    if np.any(sing):
        tr = np.trace(A, axis1=1, axis2=2)
        ridge = np.maximum(1e-8 * tr / q, 1e-12)
        A[sing] += ridge[sing, None, None] * np.eye(q)
    return np.linalg.solve(A, b[..., None])[..., 0], sing


def fisher_scoring_rows(X, W, theta: EFMParams, fam: QuasiFamily, prior: bool,
                        lam0=None, max_iter: int = MAX_ITER, tol: float = TOL):
    """Fisher scoring for the row modes of all rows.

    Solves ``(V^T D_i V + [I]) lam = V^T D_i (Z_i - eta0)`` iteratively, in the
    equivalent increment form, with step-halving whenever the (penalized)
    row objective decreases. Returns ``(Lam, converged, singular)``.
    """
    X = np.atleast_2d(X)
    W = np.atleast_2d(W)
    n, q = X.shape[0], theta.q
    Lam = np.zeros((n, q)) if lam0 is None else np.array(lam0, dtype=float).reshape(n, q)
    converged = np.zeros(n, dtype=bool)
    singular = np.zeros(n, dtype=bool)
    active = np.arange(n)
    obj = _row_objective(X, W, Lam, theta, fam, prior)
    eye = np.eye(q)
    for _ in range(max_iter):
        if active.size == 0:
            break
        Xa, Wa, La = X[active], W[active], Lam[active]
        eta = La @ theta.V.T + theta.eta0
        S, G = fam.score_terms(Xa, eta, theta.phi, Wa)
        A = _weighted_gram(S, theta.V)
        grad = G @ theta.V
        if prior:
            A = A + eye
            grad = grad - La
        step, sing = _solve_psd(A, grad)
        singular[active] |= sing
        obj_a = obj[active]
        t = np.ones(active.size)
        new = La + step
        new_obj = _row_objective(Xa, Wa, new, theta, fam, prior)
        for _h in range(MAX_HALVINGS):
            worse = ~(new_obj >= obj_a - 1e-12 * np.abs(obj_a))
            if not np.any(worse):
                break
            t[worse] *= 0.5
            new[worse] = La[worse] + t[worse, None] * step[worse]
            new_obj[worse] = _row_objective(Xa[worse], Wa[worse], new[worse], theta, fam, prior)
        delta = np.max(np.abs(new - La), axis=1)
        Lam[active] = new
        obj[active] = new_obj
        done = delta < tol
        converged[active[done]] = True
        active = active[~done]
    return Lam, converged, singular


def likelihood_modes(X, W, theta, fam, lam0=None):
    return fisher_scoring_rows(X, W, theta, fam, prior=False, lam0=lam0)


def map_modes(X, W, theta, fam, lam0=None):
    return fisher_scoring_rows(X, W, theta, fam, prior=True, lam0=lam0)


def gaussian_product(mode, H):
    """Combine N(mode, H^-1) with the N(0, I) prior: returns ``(mean, cov)``.

    Uses ``(I + H)^-1 H mode``, which stays defined when ``H`` is singular.
    """
    q = H.shape[-1]
    P = H + np.eye(q)
    cov = np.linalg.inv(P)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    mean = np.linalg.solve(P, (H @ mode[..., None]))[..., 0]
    return mean, cov


def posterior_rows(X, W, theta: EFMParams, fam: QuasiFamily, center: str = "likelihood",
                   lam0=None) -> PosteriorApprox:
    """Gaussian posterior approximation for every row.

    ``center="likelihood"`` expands around the likelihood-only stationary point
    and multiplies in the prior; ``center="map"`` uses the penalized mode with
    precision ``H + I`` directly. Rows whose likelihood mode is not unique or
    does not exist (singular ``H``, all-zero counts under a log link) fall back
    to the ``"map"`` center.
    """
    if center == "likelihood":
        mode, conv, sing = likelihood_modes(X, W, theta, fam, lam0)
        bad = ~conv | sing | ~np.all(np.isfinite(mode), axis=1)
        mode = np.where(bad[:, None], 0.0, mode)
        H = expected_hessian_rows(X, W, mode, theta, fam)
        ev = np.linalg.eigvalsh(H)
        bad |= ev[:, 0] < 1e-6 * np.maximum(ev[:, -1], 1.0)
        if np.any(bad):
            sub = None if lam0 is None else np.asarray(lam0, dtype=float)[bad]
            fb = posterior_rows(X[bad], W[bad], theta, fam, "map", sub)
        mean, cov = gaussian_product(mode, H)
        if np.any(bad):
            mode[bad], H[bad] = fb.mode, fb.precision
            mean[bad], cov[bad] = fb.post_mean, fb.post_cov
            conv = conv.copy()
            conv[bad] = fb.converged
    elif center == "map":
        mode, conv, _ = map_modes(X, W, theta, fam, lam0)
        H = expected_hessian_rows(X, W, mode, theta, fam)
        mean = mode.copy()
        cov = np.linalg.inv(H + np.eye(theta.q))
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    else:
        raise ValueError(f"unknown center {center!r}")
    return PosteriorApprox(mode, H, mean, cov, conv)


# -- per-row API ------------------------------------------------------------


def _row(x_row, w_row):
    x = np.asarray(x_row, dtype=float).reshape(1, -1)
    w = np.asarray(w_row, dtype=float).reshape(1, -1)
    return x, w


def likelihood_mode(x_row, w_row, theta, fam, lam0=None):
    x, w = _row(x_row, w_row)
    return likelihood_modes(x, w, theta, fam, lam0)[0][0]


def map_mode(x_row, w_row, theta, fam, lam0=None):
    x, w = _row(x_row, w_row)
    return map_modes(x, w, theta, fam, lam0)[0][0]


def expected_hessian(lam, x_row, w_row, theta, fam):
    x, w = _row(x_row, w_row)
    return expected_hessian_rows(x, w, np.reshape(lam, (1, -1)), theta, fam)[0]


def posterior_approx(x_row, w_row, theta, fam, center="likelihood") -> PosteriorApprox:
    x, w = _row(x_row, w_row)
    post = posterior_rows(x, w, theta, fam, center)
    return PosteriorApprox(post.mode[0], post.precision[0], post.post_mean[0],
                           post.post_cov[0], bool(post.converged[0]))

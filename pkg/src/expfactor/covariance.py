"""Model-implied covariance, the sample covariance and estimation losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .family import parse_family
from .model import EFMParams


@dataclass(frozen=True)
class CovEstimate:
    sigma: np.ndarray
    mc_draws: int = 0


def model_covariance(theta: EFMParams, fam, S_mc: int = 100_000, rng=None,
                     lam_mean=None, lam_cov=None, w=1.0) -> CovEstimate:
    """Covariance of a new observation by the law of total variance.

    ``lam_mean``/``lam_cov`` replace the standard normal factor distribution
    and ``w`` (scalar or per column) is the weight of the new observation.
    Gaussian/identity uses the closed form ``Phi / w + V C V^T``; otherwise one
    common stream of ``S_mc`` factor draws feeds both terms.
    """
    fam = parse_family(fam)
    p, q = theta.p, theta.q
    m = np.zeros(q) if lam_mean is None else np.asarray(lam_mean, dtype=float)
    C = np.eye(q) if lam_cov is None else np.asarray(lam_cov, dtype=float)
    w = np.broadcast_to(np.asarray(w, dtype=float), (p,))
    if fam.kind == "gaussian":
        sigma = np.diag(theta.phi / w) + theta.V @ C @ theta.V.T
        return CovEstimate(0.5 * (sigma + sigma.T), 0)
    if S_mc < 2:
        raise ValueError("Monte Carlo covariance needs S_mc >= 2")
    rng = np.random.default_rng(rng)
    Lc = np.linalg.cholesky(C)
    lam = m + rng.standard_normal((S_mc, q)) @ Lc.T
    mu = fam.linkinv(lam @ theta.V.T + theta.eta0)
    diag = theta.phi / w * fam.variance(mu).mean(axis=0)
    dev = mu - mu.mean(axis=0)
    sigma = dev.T @ dev / (S_mc - 1) + np.diag(diag)
    return CovEstimate(0.5 * (sigma + sigma.T), S_mc)


def sample_covariance(X) -> CovEstimate:
    """Column-centered p x p covariance with divisor ``n - 1``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two rows")
    D = X - X.mean(axis=0)
    sigma = D.T @ D / (n - 1)
    return CovEstimate(0.5 * (sigma + sigma.T), 0)


def _chol(S, name):
    try:
        return cho_factor(S, lower=True)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} covariance is not positive definite") from None


def cov_errors(est, truth):
    """Return ``(frobenius, entropy, normalized)`` losses of ``est`` against ``truth``."""
    Sh = est.sigma if isinstance(est, CovEstimate) else np.asarray(est, dtype=float)
    S = truth.sigma if isinstance(truth, CovEstimate) else np.asarray(truth, dtype=float)
    p = S.shape[0]
    cS = _chol(S, "truth")
    cSh = _chol(Sh, "estimated")
    frob = float(np.linalg.norm(Sh - S))
    tr = np.trace(cho_solve(cS, Sh))
    logdet = 2 * np.sum(np.log(np.diag(cSh[0]))) - 2 * np.sum(np.log(np.diag(cS[0])))
    entropy = float(max(tr - logdet - p, 0.0))
    L = np.tril(cS[0])
    M = solve_triangular(L, Sh - S, lower=True)
    M = solve_triangular(L, M.T, lower=True)
    normalized = float(np.linalg.norm(M) / np.sqrt(p))
    return frob, entropy, normalized

"""Approximate EM: Laplace-adapted Gauss-Hermite E-step, quasi-GLM M-step."""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .family import QuasiFamily, parse_family
from .laplace import _solve_psd, expected_hessian_rows, map_modes, pair_products
from .model import Dataset, EFMParams, identify, prior_logdensity, row_loglik
from .trace import EM_COLUMNS, FitTrace

MAX_NODES = 100_000
PHI_FLOOR = 1e-8


@dataclass(frozen=True)
class EMConfig:
    q: int
    m: int = 3
    T: int = 100
    tol: float = 1e-6
    seed: int = 0
    expand: bool = True

    def __post_init__(self):
        if self.q < 1 or self.m < 1 or self.T < 1 or not self.tol > 0:
            raise ValueError(f"invalid EM configuration {self}")
        if self.m ** self.q > MAX_NODES:
            raise ValueError(f"m^q = {self.m ** self.q} cubature nodes per row exceeds {MAX_NODES}; "
                             "use a smaller m or the SGD optimizer")


@dataclass
class CubatureRule:
    """Tensor-product Gauss-Hermite rule mapped onto the Laplace Gaussian.

    ``nodes`` has shape (..., m^q, q); ``weights`` (m^q,) is shared by all rows.
    """

    nodes: np.ndarray
    weights: np.ndarray
    center: np.ndarray
    scale: np.ndarray


def gh_rule_1d(m: int):
    """Probabilists' Gauss-Hermite rule normalized to the N(0, 1) density."""
    if not 1 <= m <= 50:
        raise ValueError(f"rule order m={m} outside [1, 50]")
    x, w = hermegauss(m)
    # enforce the exact symmetry so odd moments cancel term by term
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    w = w / w.sum()
    return x, w


def tensor_rule(m: int, q: int):
    x, w = gh_rule_1d(m)
    grids = np.meshgrid(*([x] * q), indexing="ij")
    Z = np.stack([g.ravel() for g in grids], axis=-1)
    wg = np.meshgrid(*([w] * q), indexing="ij")
    W = np.prod(np.stack([g.ravel() for g in wg], axis=-1), axis=-1)
    return Z, W / W.sum()


def _inverse_sqrt_factor(P):
    """L with L L^T = P^-1 for a stack of SPD matrices."""
    try:
        C = np.linalg.cholesky(P)
        Cinv = np.linalg.inv(C)
        return np.swapaxes(Cinv, -1, -2)
    except np.linalg.LinAlgError:
        ev, Q = np.linalg.eigh(P)
        ev = np.maximum(ev, 1e-10)
        return Q / np.sqrt(ev)[..., None, :]


def adapted_cubature(center, H, m: int) -> CubatureRule:
    """Map the base rule onto N(center, (H + I)^-1); batched over leading axes."""
    center = np.asarray(center, dtype=float)
    H = np.asarray(H, dtype=float)
    q = center.shape[-1]
    L = _inverse_sqrt_factor(H + np.eye(q))
    Z, w = tensor_rule(m, q)
    nodes = center[..., None, :] + np.einsum("...kl,ml->...mk", L, Z)
    return CubatureRule(nodes, w, center, L)


def initialize(data: Dataset, fam: QuasiFamily, q: int, rng=None):
    """SVD start from link-transformed, column-centered data.

    Unobserved entries are filled with the column mean. Returns
    ``(theta0, Lam0)``; dispersions come from Pearson residuals at the start.
    """
    X, W = data.X, data.W
    n, p = X.shape
    obs = W > 0
    Z = fam.linkfun(fam.init_mean(X, W))
    cnt = np.maximum(obs.sum(axis=0), 1)
    eta0 = np.where(obs, Z, 0.0).sum(axis=0) / cnt
    C = np.where(obs, Z - eta0, 0.0)
    U, s, Vt = np.linalg.svd(C, full_matrices=False)
    k = min(q, s.size)
    V = np.zeros((p, q))
    V[:, :k] = Vt[:k].T * (s[:k] / np.sqrt(n))
    Lam = np.zeros((n, q))
    Lam[:, :k] = U[:, :k] * np.sqrt(n)
    phi = np.ones(p)
    if fam.free_dispersion:
        mu = fam.linkinv(Lam @ V.T + eta0)
        r = np.where(obs, W * (X - mu) ** 2 / fam.variance(mu), 0.0)
        phi = np.maximum(r.sum(axis=0) / cnt, PHI_FLOOR)
    return EFMParams(V, eta0, phi), Lam


def e_step(data: Dataset, theta: EFMParams, fam: QuasiFamily, m: int, lam0=None):
    """Penalized Fisher-scoring modes and adapted rules for all rows.

    Returns ``(rule, modes, ok)`` where ``ok`` flags rows with finite modes.
    """
    modes, conv, _ = map_modes(data.X, data.W, theta, fam, lam0)
    ok = np.all(np.isfinite(modes), axis=1)
    modes = np.where(ok[:, None], modes, 0.0)
    H = expected_hessian_rows(data.X, data.W, modes, theta, fam)
    H = np.where(ok[:, None, None], H, 0.0)
    return adapted_cubature(modes, H, m), modes, ok


def _column_objective(Xr, Wr, c, A, beta, fam):
    mu = fam.linkinv(A @ beta.T)
    return np.sum(c[:, None] * Wr * fam.kernel(Xr, mu), axis=0)


def m_step(data: Dataset, rule: CubatureRule, theta_prev: EFMParams, fam: QuasiFamily,
           row_ok=None, max_iter: int = 50, tol: float = 1e-8):
    """Column-wise IRLS of X_j on the cubature nodes with an intercept.

    Each (row, node) replicate enters with weight ``c_l * w_ij``. Returns
    ``(V, eta0, failed)`` where ``failed`` flags columns that kept their
    previous coefficients.
    """
    n, p = data.X.shape
    M, q = rule.nodes.shape[-2:]
    c_row = np.ones(n) if row_ok is None else row_ok.astype(float)
    c = (c_row[:, None] * rule.weights[None, :]).ravel()
    A = np.concatenate([rule.nodes.reshape(n * M, q), np.ones((n * M, 1))], axis=1)
    AA = pair_products(A)
    Xr = np.repeat(data.X, M, axis=0)
    Wr = np.repeat(data.W, M, axis=0)
    beta = np.concatenate([theta_prev.V, theta_prev.eta0[:, None]], axis=1)
    beta_prev = beta.copy()
    obj = _column_objective(Xr, Wr, c, A, beta, fam)
    active = np.arange(p)
    k = q + 1
    for _ in range(max_iter):
        if active.size == 0:
            break
        b = beta[active]
        eta = A @ b.T
        if active.size == p:
            Xa, Wa = Xr, Wr
        else:
            Xa, Wa = Xr[:, active], Wr[:, active]
        S, G = fam.score_terms(Xa, eta, 1.0, Wa)
        info = ((c[:, None] * S).T @ AA).reshape(active.size, k, k)
        score = (A.T @ (c[:, None] * G)).T
        step, _ = _solve_psd(info, score)
        t = np.ones(active.size)
        new = b + step
        new_obj = _column_objective(Xa, Wa, c, A, new, fam)
        for _h in range(20):
            worse = ~(new_obj >= obj[active] - 1e-12 * np.abs(obj[active]))
            if not np.any(worse):
                break
            t[worse] *= 0.5
            new[worse] = b[worse] + t[worse, None] * step[worse]
            cols = active[worse]
            new_obj[worse] = _column_objective(Xr[:, cols], Wr[:, cols], c, A, new[worse], fam)
        delta = np.max(np.abs(new - b), axis=1)
        beta[active] = new
        obj[active] = new_obj
        active = active[delta >= tol]
    failed = ~np.all(np.isfinite(beta), axis=1) | ~np.isfinite(obj)
    beta[failed] = beta_prev[failed]
    return beta[:, :q], beta[:, q], failed


def update_dispersion(data: Dataset, rule: CubatureRule, theta: EFMParams, fam: QuasiFamily,
                      row_ok=None) -> np.ndarray:
    """Weighted Pearson estimate of the column dispersions.

    ``phi_j = (1 / n_j) sum_i sum_l c_l w_ij (x_ij - mu_ijl)^2 / V(mu_ijl)``
    over the ``n_j`` observed entries of column j, with cubature weights
    ``c_l`` summing to one per row.
    """
    if not fam.free_dispersion:
        return np.ones(theta.p)
    obs = data.W > 0
    if row_ok is not None:
        obs = obs & row_ok[:, None]
    mu = fam.linkinv(rule.nodes @ theta.V.T + theta.eta0)
    X = data.X[:, None, :]
    r = data.W[:, None, :] * (X - mu) ** 2 / fam.variance(mu)
    r = np.einsum("l,nlj->nj", rule.weights, r)
    cnt = obs.sum(axis=0)
    num = np.where(obs, r, 0.0).sum(axis=0)
    phi = np.where(cnt > 0, num / np.maximum(cnt, 1), theta.phi)
    return np.maximum(phi, PHI_FLOOR)


def expand_step(rule: CubatureRule, theta: EFMParams, row_ok=None):
    """Parameter-expansion re-standardization of the factor distribution.

    The cubature-weighted mean ``m`` and covariance ``C = K K^T`` of the
    factors are folded into the loadings: ``V <- V K``, ``eta0 <- eta0 + V m``.
    The linear predictor at every node is unchanged, and the prior stays
    N(0, I) in the new coordinates. Returns ``(theta, m, K)``.
    """
    nodes = rule.nodes
    if row_ok is not None:
        nodes = nodes[row_ok]
    if nodes.shape[0] == 0:
        q = theta.q
        return theta, np.zeros(q), np.eye(q)
    w = rule.weights
    m = np.einsum("l,nlk->k", w, nodes) / nodes.shape[0]
    D = nodes - m
    C = np.einsum("l,nlk,nlr->kr", w, D, D) / nodes.shape[0]
    try:
        K = np.linalg.cholesky(0.5 * (C + C.T))
    except np.linalg.LinAlgError:
        return theta, np.zeros(theta.q), np.eye(theta.q)
    return EFMParams(theta.V @ K, theta.eta0 + theta.V @ m, theta.phi), m, K


def penalized_objective(data, modes, theta, fam):
    """Sum over rows of ``log f(X_i | lam_i) + log N(lam_i; 0, I)`` at the modes."""
    return float(np.sum(row_loglik(data.X, data.W, modes, theta, fam) + prior_logdensity(modes)))


def fit_em(data: Dataset, fam, cfg: EMConfig, theta0: EFMParams | None = None,
           callback=None):
    """Approximate EM for the exponential factor model.

    Returns ``(theta, Lam, trace)`` with canonical loadings and ``Lam`` the
    Laplace posterior means (penalized modes) rotated consistently.
    ``callback(t, theta)`` is called after every iteration if given.
    """
    fam = parse_family(fam)
    data = data.validate(cfg.q, fam)
    if theta0 is None:
        theta, _ = initialize(data, fam, cfg.q)
    else:
        theta = theta0
    trace = FitTrace(EM_COLUMNS)
    modes = None
    prev = None
    t0 = time.perf_counter()
    for it in range(1, cfg.T + 1):
        rule, modes, ok = e_step(data, theta, fam, cfg.m, lam0=modes)
        if not np.all(ok):
            trace.warn("estep_row_failures", np.sum(~ok))
        surrogate = penalized_objective(data, modes, theta, fam)
        V, eta0, failed = m_step(data, rule, theta, fam, ok)
        if np.any(failed):
            trace.warn("mstep_column_failures", np.sum(failed))
        theta = EFMParams(V, eta0, theta.phi)
        theta = EFMParams(V, eta0, update_dispersion(data, rule, theta, fam, ok))
        if cfg.expand:
            theta, m, K = expand_step(rule, theta, ok)
            modes = np.linalg.solve(K, (modes - m).T).T
        trace.add(iter=it, surrogate_obj=surrogate, wall_ms=1e3 * (time.perf_counter() - t0))
        if callback is not None:
            callback(it, theta)
        if prev is not None and abs(surrogate - prev) <= cfg.tol * abs(prev):
            break
        prev = surrogate
    modes, _, _ = map_modes(data.X, data.W, theta, fam, modes)
    Lam, theta = identify(modes, theta, strict=False)
    if trace.warnings:
        warnings.warn(f"EM finished with {trace.warnings}")
    return theta, Lam, trace

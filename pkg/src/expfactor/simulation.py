"""Data generators: factor-model draws, covariance-study priors, multiplex weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .family import QuasiFamily, parse_family
from .model import Dataset, EFMParams, linear_predictor


def simulate_data(fam, Lam, theta: EFMParams, W=None, rng=None) -> np.ndarray:
    """Draw X given factors; entries with ``w == 0`` hold the family placeholder.

    Conditional moments are ``mu = g^-1(eta)`` and ``phi V(mu) / w`` for the
    gaussian, gamma and binomial (proportions of ``w`` trials) families.
    Poisson and negative binomial ignore ``w`` beyond masking; quasi-Poisson
    uses a gamma-Poisson mixture with variance ``phi mu``.
    """
    fam = parse_family(fam)
    rng = np.random.default_rng(rng)
    mu = fam.linkinv(linear_predictor(Lam, theta))
    W = np.ones_like(mu) if W is None else np.asarray(W, dtype=float)
    phi = np.broadcast_to(theta.phi, mu.shape)
    obs = W > 0
    ws = np.where(obs, W, 1.0)
    k = fam.kind
    if k == "gaussian":
        X = rng.normal(mu, np.sqrt(phi / ws))
    elif k == "poisson":
        X = rng.poisson(mu).astype(float)
    elif k == "quasi_poisson":
        if np.any(theta.phi < 1):
            raise ValueError("quasi-Poisson sampling needs phi >= 1")
        over = phi > 1
        ex = np.where(over, phi - 1, 1.0)
        rate = np.where(over, rng.gamma(np.where(over, mu / ex, 1.0), ex), mu)
        X = rng.poisson(rate).astype(float)
    elif k == "negative_binomial":
        a = fam.shape
        X = rng.poisson(rng.gamma(1.0 / a, a * mu)).astype(float)
    elif k == "binomial":
        trials = np.rint(ws).astype(np.int64)
        if not np.allclose(trials, ws):
            raise ValueError("binomial weights must be integer trial counts")
        X = rng.binomial(trials, mu) / trials
    elif k == "gamma":
        X = rng.gamma(ws / phi, mu * phi / ws)
    else:  # pragma: no cover
        raise ValueError(k)
    return np.where(obs, X, fam.placeholder)


def simulate_factor_model(n: int, p: int, q: int, fam, rng=None, scale=(1.0, 0.5),
                          eta0_mean=0.0, eta0_sd=0.3, phi=1.0, missing: float = 0.0,
                          trials: int | None = None):
    """Generic scenario with canonical loadings ``V = U D``.

    The singular values are ``linspace(*scale, q) * sqrt(p / q)``, so the
    linear predictor has variance ``mean(linspace(*scale, q)^2)`` whatever p.
    Returns ``(data, theta, Lam)``.
    """
    fam = parse_family(fam)
    rng = np.random.default_rng(rng)
    U, _ = np.linalg.qr(rng.standard_normal((p, q)))
    U = U * np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(q)])
    V = U * (np.linspace(scale[0], scale[1], q) * np.sqrt(p / q))
    eta0 = eta0_mean + eta0_sd * rng.standard_normal(p)
    if not fam.free_dispersion:
        phi = 1.0
    theta = EFMParams(V, eta0, np.broadcast_to(np.asarray(phi, dtype=float), (p,)).copy(),
                      canonical=True)
    Lam = rng.standard_normal((n, q))
    W = np.ones((n, p))
    if fam.kind == "binomial" and trials is not None:
        W = np.full((n, p), float(trials))
    if missing > 0:
        W = np.where(rng.random((n, p)) < missing, 0.0, W)
    X = simulate_data(fam, Lam, theta, W, rng)
    return Dataset(X, W), theta, Lam


# -- covariance study priors -------------------------------------------------


@dataclass(frozen=True)
class FanPriors:
    lam_mean: np.ndarray = field(default_factory=lambda: np.array([0.023558, 0.012989, 0.020714]))
    lam_cov: np.ndarray = field(default_factory=lambda: np.diag([1.2507, 0.31564, 0.19303]))
    v_mean: np.ndarray = field(default_factory=lambda: np.array([0.78282, 0.51803, 0.41003]))
    v_cov: np.ndarray = field(default_factory=lambda: np.array([
        [0.029145, 0.023873, 0.010184],
        [0.023873, 0.053951, -0.006967],
        [0.010184, -0.006967, 0.086856]]))
    phi_shape: float = 4.0713
    phi_rate: float = 0.1623
    w_poisson_mean: float = 20.0


@dataclass
class FanTruth:
    """Generating values of a covariance-study draw.

    ``theta`` is the equivalent standard-prior parameterization
    (``V chol(lam_cov)``, ``eta0 = V lam_mean``); ``V`` and ``Lam`` are the raw draws.
    """

    theta: EFMParams
    V: np.ndarray
    Lam: np.ndarray
    lam_mean: np.ndarray
    lam_cov: np.ndarray


FAN_FAMILIES = ("quasi_poisson", "negative_binomial", "binomial", "poisson")


def fan_scenario(n: int, p: int, fam, rng=None, priors: FanPriors | None = None):
    """Draw a covariance-study dataset; returns ``(data, truth)`` with q = 3."""
    fam = parse_family(fam)
    if fam.kind not in FAN_FAMILIES:
        raise ValueError(f"family {fam} is not part of the covariance study")
    pr = priors or FanPriors()
    rng = np.random.default_rng(rng)
    Lam = rng.multivariate_normal(pr.lam_mean, pr.lam_cov, size=n)
    V = rng.multivariate_normal(pr.v_mean, pr.v_cov, size=p)
    if fam.kind == "quasi_poisson":
        phi = rng.gamma(pr.phi_shape, 1.0 / pr.phi_rate, size=p)
        phi = np.maximum(phi, 1.0)
    else:
        phi = np.ones(p)
    if fam.kind == "binomial":
        W = rng.poisson(pr.w_poisson_mean, size=(n, p)).astype(float)
    else:
        W = np.ones((n, p))
    raw = EFMParams(V, np.zeros(p), phi)
    X = simulate_data(fam, Lam, raw, W, rng)
    theta = EFMParams(V @ np.linalg.cholesky(pr.lam_cov), V @ pr.lam_mean, phi)
    return Dataset(X, W), FanTruth(theta, V, Lam, pr.lam_mean.copy(), pr.lam_cov.copy())


# -- multiplex networks ---------------------------------------------------------


@dataclass
class MultiplexStack:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ValueError("need at least one layer")
        n = self.layers[0].shape[0]
        for A in self.layers:
            A = np.asarray(A)
            if A.shape != (n, n):
                raise ValueError("layers must share one n x n shape")
            if not np.array_equal(A, A.T):
                raise ValueError("layers must be symmetric")
            if np.any(np.diag(A) != 0):
                raise ValueError("layers must have zero diagonal")
            if not np.all((A == 0) | (A == 1)):
                raise ValueError("layers must be binary")

    @classmethod
    def from_edges(cls, edges, n: int | None = None):
        """Build from rows ``(i, j, layer)`` with 0-based node and layer ids."""
        edges = np.asarray(edges, dtype=int).reshape(-1, 3)
        if n is None:
            n = int(edges[:, :2].max()) + 1
        k = int(edges[:, 2].max()) + 1
        layers = [np.zeros((n, n)) for _ in range(k)]
        for i, j, l in edges:
            if i != j:
                layers[l][i, j] = layers[l][j, i] = 1.0
        return cls(layers)


def largest_eigenvalue(A, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Power iteration on ``A + s I`` (``s`` = max row sum) for the top eigenvalue."""
    A = np.asarray(A, dtype=float)
    s = np.max(np.abs(A).sum(axis=1))
    if s == 0:
        return 0.0
    x = np.ones(A.shape[0]) / np.sqrt(A.shape[0])
    lam = 0.0
    for _ in range(max_iter):
        y = A @ x + s * x
        new = float(x @ y)
        x = y / np.linalg.norm(y)
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    return lam - s


def multiplex_weights(stack: MultiplexStack):
    """Aggregate layers into a binary adjacency ``A`` and weight matrix ``W``.

    Interacting pairs get ``sum_l A_l / lambda_max(A_l)``, other off-diagonal
    pairs the smallest such value, and the diagonal zero.
    """
    layers = [np.asarray(A, dtype=float) for A in stack.layers]
    lmax = []
    for l, A in enumerate(layers):
        lam = largest_eigenvalue(A)
        if lam <= 0:
            raise ValueError(f"layer {l} has no edges (largest eigenvalue {lam})")
        lmax.append(lam)
    A = np.max(layers, axis=0)
    S = sum(Al / lam for Al, lam in zip(layers, lmax))
    inter = A > 0
    W = np.where(inter, S, S[inter].min())
    np.fill_diagonal(W, 0.0)
    return A, W

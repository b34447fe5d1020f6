"""Parameters, datasets and the complete-data likelihood of the factor model."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .family import QuasiFamily, parse_family

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class EFMParams:
    """Model parameters ``theta = (V, eta0, phi)``.

    ``V`` is p x q, ``eta0`` and ``phi`` have length p. ``canonical`` marks
    loadings in the identified ``U D`` form.
    """

    V: np.ndarray
    eta0: np.ndarray
    phi: np.ndarray
    canonical: bool = False

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        eta0 = np.asarray(self.eta0, dtype=float).reshape(-1)
        phi = np.asarray(self.phi, dtype=float).reshape(-1)
        if V.shape[0] != eta0.size or phi.size != eta0.size:
            raise ValueError(f"inconsistent shapes V{V.shape}, eta0({eta0.size}), phi({phi.size})")
        if np.any(phi <= 0):
            raise ValueError("dispersions must be positive")
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "eta0", eta0)
        object.__setattr__(self, "phi", phi)

    @property
    def p(self) -> int:
        return self.V.shape[0]

    @property
    def q(self) -> int:
        return self.V.shape[1]

    def copy(self, **changes) -> "EFMParams":
        new = dict(V=self.V.copy(), eta0=self.eta0.copy(), phi=self.phi.copy(), canonical=False)
        new.update(changes)
        return EFMParams(**new)


@dataclass(frozen=True)
class Dataset:
    """Observations ``X`` with entry weights ``W`` (0 marks a missing entry)."""

    X: np.ndarray
    W: np.ndarray = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        W = np.ones_like(X) if self.W is None else np.atleast_2d(np.asarray(self.W, dtype=float))
        if W.shape != X.shape:
            raise ValueError(f"W has shape {W.shape}, X has shape {X.shape}")
        if np.any(W < 0) or not np.all(np.isfinite(W)):
            raise ValueError("weights must be finite and nonnegative")
        if not np.all(np.isfinite(X[W > 0])):
            raise ValueError("observed entries of X must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "W", W)

    @property
    def shape(self):
        return self.X.shape

    def validate(self, q: int, fam: QuasiFamily | None = None) -> "Dataset":
        """Check that every row and column has at least ``q`` observed entries.

        With ``fam`` given, unobserved entries of X are replaced by the family's
        placeholder value and observed entries are checked against its domain.
        """
        obs = self.W > 0
        bad_rows = np.flatnonzero(obs.sum(axis=1) < q)
        bad_cols = np.flatnonzero(obs.sum(axis=0) < q)
        if bad_rows.size or bad_cols.size:
            raise ValueError(f"fewer than q={q} observed entries in rows {bad_rows[:10].tolist()} "
                             f"/ columns {bad_cols[:10].tolist()}")
        if fam is None:
            return self
        from .family import _check_obs
        _check_obs(fam, self.X[obs])
        X = np.where(obs, self.X, fam.placeholder)
        return Dataset(X, self.W)

    def rows(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.W[idx])


def linear_predictor(Lam, theta: EFMParams) -> np.ndarray:
    """``eta = Lam V^T + 1 eta0^T``; extra leading axes of ``Lam`` broadcast."""
    Lam = np.asarray(Lam, dtype=float)
    if Lam.shape[-1] != theta.q:
        raise ValueError(f"factors have {Lam.shape[-1]} columns, loadings have {theta.q}")
    return Lam @ theta.V.T + theta.eta0


def _sign_fix(U):
    idx = np.argmax(np.abs(U), axis=0)
    s = np.sign(U[idx, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    return s


def identify(Lam, theta: EFMParams, strict: bool = True, scale: str = "rotation"):
    """Canonicalize ``(Lam, V)`` so that ``V = U D`` with sorted positive ``D``.

    The product ``Lam V^T`` is unchanged. With ``scale="rotation"`` (default)
    the factors are rotated orthogonally, which keeps the N(0, I) prior and
    ``V V^T`` intact. ``scale="product"`` instead takes the left singular
    vectors of ``Lam V^T`` scaled to unit second moment as the new factors.

    Sign convention: the largest-magnitude entry of each column of ``U`` is
    positive. Tied singular values are left in the order the SVD returns.
    """
    Lam = np.atleast_2d(np.asarray(Lam, dtype=float))
    q = theta.q
    if Lam.shape[1] != q:
        raise ValueError(f"factors have {Lam.shape[1]} columns, loadings have {q}")
    if scale == "rotation":
        U, d, Tt = np.linalg.svd(theta.V, full_matrices=False)
    elif scale == "product":
        L, d, Ut = np.linalg.svd(Lam @ theta.V.T, full_matrices=False)
        U = Ut[:q].T
        d = d[:q]
    else:
        raise ValueError(f"unknown scale {scale!r}")
    if strict and (d[0] == 0 or d[-1] <= 1e-10 * d[0]):
        raise ValueError(f"numerical rank below q={q}: singular values {d.tolist()}")
    s = _sign_fix(U)
    U = U * s
    if scale == "rotation":
        T = Tt.T * s
        new_lam = Lam @ T
        new_V = U * d
    else:
        n = Lam.shape[0]
        new_lam = L[:, :q] * s * np.sqrt(n)
        new_V = U * (d / np.sqrt(n))
    return new_lam, replace(theta, V=new_V, canonical=True)


def prior_logdensity(Lam) -> np.ndarray:
    """Row-wise log N(lam; 0, I)."""
    Lam = np.asarray(Lam, dtype=float)
    return -0.5 * np.sum(Lam ** 2, axis=-1) - 0.5 * Lam.shape[-1] * LOG_2PI


def row_loglik(X, W, Lam, theta: EFMParams, fam: QuasiFamily) -> np.ndarray:
    """Row-wise ``log f(X_i | Lam_i)`` (no prior); ``Lam`` may carry extra axes."""
    mu = fam.linkinv(linear_predictor(Lam, theta))
    if Lam.ndim == X.ndim + 1:
        X = X[:, None, :]
        W = W[:, None, :]
    return fam.logdensity(X, mu, theta.phi, W).sum(axis=-1)


def complete_loglik(data: Dataset, Lam, theta: EFMParams, fam: QuasiFamily) -> float:
    """``sum_i log f(X_i | Lam_i) + log N(Lam_i; 0, I)``."""
    Lam = np.atleast_2d(np.asarray(Lam, dtype=float))
    if Lam.shape[0] != data.X.shape[0]:
        raise ValueError("one factor row per observation row is required")
    if data.X.shape[1] != theta.p:
        raise ValueError(f"data has {data.X.shape[1]} columns, parameters have {theta.p}")
    ll = row_loglik(data.X, data.W, Lam, theta, fam)
    return float(np.sum(ll + prior_logdensity(Lam)))


# -- CSV formats ------------------------------------------------------------


def read_matrix(path) -> np.ndarray:
    """Dense numeric CSV with an optional header row."""
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.strip().split(",") if v.strip()]
        skip = 0
    except ValueError:
        skip = 1
    M = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    return M


def write_matrix(path, M, header=None):
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    np.savetxt(path, M, delimiter=",", fmt="%.17g",
               header="" if header is None else ",".join(header), comments="")


def save_params(outdir, theta: EFMParams, fam: QuasiFamily, seed=None, **meta):
    os.makedirs(outdir, exist_ok=True)
    write_matrix(os.path.join(outdir, "V.csv"), theta.V)
    write_matrix(os.path.join(outdir, "eta0.csv"), theta.eta0)
    write_matrix(os.path.join(outdir, "phi.csv"), theta.phi)
    info = {"family": str(fam), "q": theta.q, "seed": seed, "canonical": theta.canonical}
    info.update(meta)
    with open(os.path.join(outdir, "meta.json"), "w") as fh:
        json.dump(info, fh, indent=1, sort_keys=True)


def load_params(indir):
    """Inverse of :func:`save_params`; returns ``(theta, fam, meta)``."""
    with open(os.path.join(indir, "meta.json")) as fh:
        meta = json.load(fh)
    V = read_matrix(os.path.join(indir, "V.csv"))
    eta0 = read_matrix(os.path.join(indir, "eta0.csv")).ravel()
    phi = read_matrix(os.path.join(indir, "phi.csv")).ravel()
    theta = EFMParams(V.reshape(eta0.size, -1), eta0, phi, bool(meta.get("canonical", False)))
    return theta, parse_family(meta["family"]), meta

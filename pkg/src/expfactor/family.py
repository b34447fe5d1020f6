"""Quasi-likelihood families: links, variance functions, deviances.

All ``QuasiFamily`` methods are vectorized and unchecked so they can be used in
the inner loops of the optimizers. The module-level functions
(``mean_from_eta``, ``variance_function``, ...) validate their inputs and are
the public per-entry API.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, xlogy

FAMILIES = ("gaussian", "poisson", "quasi_poisson", "binomial", "negative_binomial", "gamma")
LINKS = ("identity", "log", "logit")

CANONICAL_LINK = {
    "gaussian": "identity",
    "poisson": "log",
    "quasi_poisson": "log",
    "negative_binomial": "log",
    "gamma": "log",
    "binomial": "logit",
}

# floor for V(x) in the normalization term of the extended quasi-likelihood
VAR_FLOOR = 1e-8

_ETA_CLIP = {"log": 40.0, "logit": 35.0}

_ALIASES = {
    "normal": "gaussian",
    "quasipoisson": "quasi_poisson",
    "quasi-poisson": "quasi_poisson",
    "negbin": "negative_binomial",
    "nb": "negative_binomial",
    "bernoulli": "binomial",
}


@dataclass(frozen=True)
class QuasiFamily:
    """Mean/variance specification of an exponential factor model.

    Parameters
    ----------
    kind : one of ``FAMILIES``
    link : one of ``LINKS``; defaults to the canonical link
    shape : negative binomial ``alpha`` in ``V(mu) = mu + alpha mu^2``
    """

    kind: str
    link: str = ""
    shape: float = 0.0

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValueError(f"unknown family {self.kind!r}")
        if not self.link:
            object.__setattr__(self, "link", CANONICAL_LINK[self.kind])
        if self.link != CANONICAL_LINK[self.kind]:
            raise ValueError(f"unsupported link {self.link!r} for family {self.kind!r}")
        if self.kind == "negative_binomial" and not self.shape > 0:
            raise ValueError("negative binomial needs a positive shape alpha")

    def __str__(self):
        if self.kind == "negative_binomial":
            return f"negbin({self.shape:g}):{self.link}"
        return f"{self.kind}:{self.link}"

    @property
    def free_dispersion(self) -> bool:
        """Whether ``phi`` is estimated (otherwise it is fixed at 1)."""
        return self.kind in ("gaussian", "quasi_poisson", "gamma")

    @property
    def placeholder(self) -> float:
        """Domain-valid value stored in X under zero weight."""
        return {"binomial": 0.5, "gamma": 1.0}.get(self.kind, 0.0)

    # -- link ---------------------------------------------------------------

    def clip_eta(self, eta):
        c = _ETA_CLIP.get(self.link)
        if c is None:
            return eta
        return np.clip(eta, -c, c)

    def linkinv(self, eta):
        eta = self.clip_eta(np.asarray(eta, dtype=float))
        if self.link == "identity":
            return eta
        if self.link == "log":
            return np.exp(eta)
        return expit(eta)

    def mu_eta(self, eta):
        """Derivative of the inverse link, d mu / d eta."""
        eta = self.clip_eta(np.asarray(eta, dtype=float))
        if self.link == "identity":
            return np.ones_like(eta)
        if self.link == "log":
            return np.exp(eta)
        return expit(eta) * expit(-eta)

    def linkfun(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.link == "identity":
            return mu
        if self.link == "log":
            return np.log(mu)
        return np.log(mu) - np.log1p(-mu)

    # -- variance and deviance ----------------------------------------------

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return np.ones_like(mu)
        if self.kind in ("poisson", "quasi_poisson"):
            return mu
        if self.kind == "binomial":
            return mu * (1.0 - mu)
        if self.kind == "gamma":
            return mu * mu
        return mu + self.shape * mu * mu

    def deviance(self, x, mu):
        """Unit quasi-deviance ``Q(x; mu) = 2 int_mu^x (x - t) / V(t) dt``."""
        x = np.asarray(x, dtype=float)
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return (x - mu) ** 2
        if self.kind in ("poisson", "quasi_poisson"):
            return 2.0 * (xlogy(x, x) - xlogy(x, mu) - (x - mu))
        if self.kind == "binomial":
            return 2.0 * (xlogy(x, x) - xlogy(x, mu)
                          + xlogy(1.0 - x, 1.0 - x) - xlogy(1.0 - x, 1.0 - mu))
        if self.kind == "gamma":
            return 2.0 * (-np.log(x / mu) + (x - mu) / mu)
        a = self.shape
        return 2.0 * (xlogy(x, x) - xlogy(x, mu)
                      - (x + 1.0 / a) * (np.log1p(a * x) - np.log1p(a * mu)))

    def kernel(self, x, mu):
        """``int^mu (x - t) / V(t) dt`` up to terms free of mu; equals ``-Q/2 + c(x)``."""
        x = np.asarray(x, dtype=float)
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return x * mu - 0.5 * mu * mu
        if self.kind in ("poisson", "quasi_poisson"):
            return xlogy(x, mu) - mu
        if self.kind == "binomial":
            return xlogy(x, mu) + xlogy(1.0 - x, 1.0 - mu)
        if self.kind == "gamma":
            return -x / mu - np.log(mu)
        a = self.shape
        return xlogy(x, mu) - (x + 1.0 / a) * np.log1p(a * mu)

    def logdensity(self, x, mu, phi, w):
        """Extended quasi-log-density per entry; zero where ``w == 0``."""
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)
        phi = np.asarray(phi, dtype=float)
        obs = w > 0
        ws = np.where(obs, w, 1.0)
        vx = np.maximum(self.variance(x), VAR_FLOOR)
        out = -0.5 * ws / phi * self.deviance(x, mu) - 0.5 * np.log(2 * np.pi * phi * vx / ws)
        return np.where(obs, out, 0.0)

    def score_terms(self, x, eta, phi, w):
        """Per-entry Fisher information ``S`` and scaled score ``G`` in eta."""
        mu = self.linkinv(eta)
        d = self.mu_eta(eta)
        v = self.variance(mu)
        r = np.asarray(w, dtype=float) / np.asarray(phi, dtype=float) * d / v
        return r * d, r * (np.asarray(x, dtype=float) - mu)

    def init_mean(self, x, w=None):
        """Project observations into the interior of the mean domain."""
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            return x
        if self.kind == "binomial":
            w = np.ones_like(x) if w is None else np.asarray(w, dtype=float)
            return (w * x + 0.5) / (w + 1.0)
        if self.kind == "gamma":
            return np.maximum(x, 1e-3)
        return x + 0.1


def parse_family(spec: str | QuasiFamily) -> QuasiFamily:
    """Parse identifiers such as ``"poisson:log"`` or ``"negbin(0.1):log"``."""
    if isinstance(spec, QuasiFamily):
        return spec
    m = re.fullmatch(r"\s*([A-Za-z_\-]+)\s*(?:\(\s*([0-9.eE+\-]+)\s*\))?\s*(?::\s*([a-z]+)\s*)?",
                     spec)
    if m is None:
        raise ValueError(f"cannot parse family {spec!r}")
    kind = m.group(1).lower()
    kind = _ALIASES.get(kind, kind)
    shape = float(m.group(2)) if m.group(2) else 0.0
    return QuasiFamily(kind, m.group(3) or "", shape)


# -- checked per-entry API --------------------------------------------------


def _check_mean(fam: QuasiFamily, mu):
    mu = np.asarray(mu, dtype=float)
    if not np.all(np.isfinite(mu)):
        raise ValueError("mean must be finite")
    if fam.link == "log" and np.any(mu <= 0):
        raise ValueError(f"mean outside (0, inf) for {fam}")
    if fam.link == "logit" and np.any((mu <= 0) | (mu >= 1)):
        raise ValueError(f"mean outside (0, 1) for {fam}")
    return mu


def _check_obs(fam: QuasiFamily, x):
    x = np.asarray(x, dtype=float)
    if fam.kind in ("poisson", "quasi_poisson", "negative_binomial") and np.any(x < 0):
        raise ValueError(f"negative observation for {fam}")
    if fam.kind == "binomial" and np.any((x < 0) | (x > 1)):
        raise ValueError("binomial observations are proportions in [0, 1]")
    if fam.kind == "gamma" and np.any(x <= 0):
        raise ValueError("gamma observations must be positive")
    return x


def mean_from_eta(fam: QuasiFamily, eta):
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValueError("eta must be finite")
    return fam.linkinv(eta)


def variance_function(fam: QuasiFamily, mu):
    return fam.variance(_check_mean(fam, mu))


def quasi_deviance(fam: QuasiFamily, x, mu):
    return fam.deviance(_check_obs(fam, x), _check_mean(fam, mu))


def quasi_logdensity(fam: QuasiFamily, x, mu, phi, w):
    if np.any(np.asarray(phi) <= 0):
        raise ValueError("dispersion must be positive")
    if np.any(np.asarray(w) < 0):
        raise ValueError("weights must be nonnegative")
    return fam.logdensity(_check_obs(fam, x), _check_mean(fam, mu), phi, w)


def score_terms(fam: QuasiFamily, x, eta, phi, w):
    """Return ``(S, G)``; see :meth:`QuasiFamily.score_terms`."""
    if np.any(np.asarray(phi) <= 0):
        raise ValueError("dispersion must be positive")
    return fam.score_terms(x, eta, phi, w)

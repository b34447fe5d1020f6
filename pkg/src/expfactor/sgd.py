"""Adam SGD with Laplace, posterior-sampling and SML gradient evaluators."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .em import initialize
from .family import QuasiFamily, parse_family
from .laplace import map_modes, posterior_rows
from .likelihood import EvalConfig, simulated_marginal_loglik
from .model import Dataset, EFMParams, identify, prior_logdensity, row_loglik
from .trace import SGD_COLUMNS, FitTrace, substream

MODES = ("lapl", "ps", "sml")


@dataclass(frozen=True)
class SGDConfig:
    q: int
    B: int = 128
    S: int = 50
    alpha: float = 0.5
    T: int = 10
    mode: str = "ps"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: str = "epoch"
    center: str = "likelihood"
    eval_every: int = 1
    eval_R: int = 1500

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.q < 1 or self.B < 1 or self.S < 1 or not self.alpha > 0 or self.T < 1:
            raise ValueError(f"invalid SGD configuration {self}")
        if self.mode == "sml" and self.S < 2:
            raise ValueError("SML gradients need S >= 2")
        if self.decay not in ("epoch", "step"):
            raise ValueError("decay must be 'epoch' or 'step'")


@dataclass
class GradientBundle:
    """Ascent direction of the log-likelihood in (V, eta0, phi)."""

    dV: np.ndarray
    deta0: np.ndarray
    dphi: np.ndarray

    def scaled(self, c):
        return GradientBundle(c * self.dV, c * self.deta0, c * self.dphi)

    def norm(self):
        return float(np.sqrt(np.sum(self.dV ** 2) + np.sum(self.deta0 ** 2)
                             + np.sum(self.dphi ** 2)))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    nonfinite: int = 0


def weighted_grad(X, W, Lams, wts, theta: EFMParams, fam: QuasiFamily) -> GradientBundle:
    """Sum over rows and draws of ``wts * grad log f(x_i, lam_is)``.

    ``Lams`` has shape (B, S, q) and ``wts`` (B, S).
    """
    p, q = theta.p, theta.q
    eta = Lams @ theta.V.T + theta.eta0
    Xb = X[:, None, :]
    Wb = W[:, None, :]
    _, G = fam.score_terms(Xb, eta, theta.phi, Wb)
    Gw = G * wts[..., None]
    dV = Gw.reshape(-1, p).T @ Lams.reshape(-1, q)
    deta0 = Gw.sum(axis=(0, 1))
    dphi = np.zeros(p)
    if fam.free_dispersion:
        mu = fam.linkinv(eta)
        Q = fam.deviance(Xb, mu)
        obs = Wb > 0
        g = np.where(obs, (Wb * Q / theta.phi - 1.0) / (2 * theta.phi), 0.0)
        dphi = np.sum(g * wts[..., None], axis=(0, 1))
    return GradientBundle(dV, deta0, dphi)


def grad_complete(theta: EFMParams, fam, x_row, w_row, lam) -> GradientBundle:
    """Gradient of ``log f(x_row, lam)`` for one row."""
    fam = parse_family(fam)
    X = np.asarray(x_row, dtype=float).reshape(1, -1)
    W = np.asarray(w_row, dtype=float).reshape(1, -1)
    L = np.asarray(lam, dtype=float).reshape(1, 1, -1)
    return weighted_grad(X, W, L, np.ones((1, 1)), theta, fam)


def _as_batch(batch):
    if isinstance(batch, Dataset):
        return batch.X, batch.W
    X, W = batch
    return np.atleast_2d(X), np.atleast_2d(W)


def grad_lapl(theta, fam, batch, n=None, lam0=None, info=None) -> GradientBundle:
    """Complete-data gradient at the penalized modes, scaled by ``n / B``."""
    X, W = _as_batch(batch)
    B = X.shape[0]
    modes, _, _ = map_modes(X, W, theta, fam, lam0)
    ok = np.all(np.isfinite(modes), axis=1)
    if info is not None:
        info["modes"] = modes
        info["failures"] = int(np.sum(~ok))
        info["objective"] = float(np.sum(row_loglik(X[ok], W[ok], modes[ok], theta, fam)
                                         + prior_logdensity(modes[ok])))
    g = weighted_grad(X[ok], W[ok], modes[ok][:, None, :], np.ones((ok.sum(), 1)), theta, fam)
    return g.scaled((n or B) / B)


def sample_posterior(post, S, rng):
    """Draw (B, S, q) samples from the batched Gaussian posterior."""
    B, q = post.post_mean.shape
    L = np.linalg.cholesky(post.post_cov)
    z = rng.standard_normal((B, S, q))
    return post.post_mean[:, None, :] + z @ np.swapaxes(L, -1, -2)


def grad_ps(theta, fam, batch, S, rng, n=None, center="likelihood", lam0=None,
            info=None) -> GradientBundle:
    """Average complete-data gradient over draws from the Gaussian posterior."""
    X, W = _as_batch(batch)
    B = X.shape[0]
    post = posterior_rows(X, W, theta, fam, center, lam0)
    Lams = sample_posterior(post, S, rng)
    if info is not None:
        info["modes"] = post.mode
        info["objective"] = float(np.sum(row_loglik(X, W, post.post_mean, theta, fam)
                                         + prior_logdensity(post.post_mean)))
    g = weighted_grad(X, W, Lams, np.full((B, S), 1.0 / S), theta, fam)
    return g.scaled((n or B) / B)


def grad_sml(theta, fam, batch, S, rng, n=None, info=None) -> GradientBundle:
    """Self-normalized gradient over ``S`` prior draws per row (log-space weights)."""
    if S < 1:
        raise ValueError("S must be positive")
    X, W = _as_batch(batch)
    B = X.shape[0]
    Lams = rng.standard_normal((B, S, theta.q))
    return _sml_from_draws(theta, fam, X, W, Lams, n, info)


def _sml_from_draws(theta, fam, X, W, Lams, n=None, info=None):
    B, S = Lams.shape[:2]
    logf = row_loglik(X, W, Lams, theta, fam)
    wts = softmax(logf, axis=1)
    ess = 1.0 / np.sum(wts ** 2, axis=1)
    if info is not None:
        info["low_ess"] = int(np.sum(ess < 2)) if S >= 2 else 0
        info["objective"] = float(np.sum(logsumexp(logf, axis=1) - np.log(S)))
    g = weighted_grad(X, W, Lams, wts, theta, fam)
    return g.scaled((n or B) / B)


def learning_rate(alpha: float, t: int) -> float:
    return alpha / (1.0 + 0.5 * t)


def adam_step(state: AdamState, grad: GradientBundle, theta: EFMParams, alpha: float, t: int,
              fam: QuasiFamily | None = None, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam ascent step with learning rate ``alpha / (1 + 0.5 t)``.

    ``phi`` is updated through ``log phi`` and only for free-dispersion
    families (``fam=None`` updates it whenever ``dphi`` is nonzero).
    Returns ``(theta, state)``; ``state`` is updated in place.
    """
    grads = {"V": grad.dV, "eta0": grad.deta0, "logphi": grad.dphi * theta.phi}
    update_phi = fam.free_dispersion if fam is not None else bool(np.any(grad.dphi))
    if not update_phi:
        grads.pop("logphi")
    state.t += 1
    lr = learning_rate(alpha, t)
    new = {"V": theta.V.copy(), "eta0": theta.eta0.copy(), "logphi": np.log(theta.phi)}
    for k, g in grads.items():
        g = np.asarray(g, dtype=float)
        bad = ~np.isfinite(g)
        if np.any(bad):
            state.nonfinite += int(bad.sum())
            g = np.where(bad, 0.0, g)
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        mhat = m / (1 - beta1 ** state.t)
        vhat = v / (1 - beta2 ** state.t)
        new[k] = new[k] + lr * mhat / (np.sqrt(vhat) + eps)
    return EFMParams(new["V"], new["eta0"], np.exp(new["logphi"])), state


def fit_sgd(data: Dataset, fam, cfg: SGDConfig, theta0: EFMParams | None = None,
            eval_data: Dataset | None = None):
    """Adam SGD over mini-batches sampled with replacement.

    Every ``cfg.eval_every`` epochs (and before the first step) the simulated
    negative log-likelihood with ``cfg.eval_R`` draws is recorded; its cost is
    excluded from ``wall_ms``. Returns ``(theta, trace)`` with canonical loadings.
    """
    fam = parse_family(fam)
    data = data.validate(cfg.q, fam)
    n = data.X.shape[0]
    B = min(cfg.B, n)
    if theta0 is None:
        theta0, _ = initialize(data, fam, cfg.q)
    theta = theta0
    batch_rng = substream(cfg.seed, "batch")
    draw_rng = substream(cfg.seed, "draws")
    eval_seed = int(substream(cfg.seed, "eval").integers(2 ** 31))
    eval_cfg = EvalConfig(cfg.eval_R, eval_seed)
    eval_data = data if eval_data is None else eval_data
    trace = FitTrace(SGD_COLUMNS)
    state = AdamState()
    lam_cache = np.zeros((n, cfg.q))
    steps_per_epoch = math.ceil(n / B)
    base = dict(mode=cfg.mode, S=cfg.S, B=B)

    def evaluate():
        if cfg.eval_every <= 0:
            return None
        return -simulated_marginal_loglik(eval_data, theta, fam, eval_cfg).value

    trace.add(step=0, epoch=0, wall_ms=0.0, grad_norm=None, sim_nll=evaluate(), **base)
    elapsed = 0.0
    start_obj = None
    step = 0
    for epoch in range(cfg.T):
        for _ in range(steps_per_epoch):
            t0 = time.perf_counter()
            idx = batch_rng.integers(0, n, size=B)
            batch = (data.X[idx], data.W[idx])
            info = {}
            if cfg.mode == "lapl":
                g = grad_lapl(theta, fam, batch, n, lam0=lam_cache[idx], info=info)
            elif cfg.mode == "ps":
                g = grad_ps(theta, fam, batch, cfg.S, draw_rng, n, cfg.center,
                            lam0=lam_cache[idx], info=info)
            else:
                g = grad_sml(theta, fam, batch, cfg.S, draw_rng, n, info=info)
            if "modes" in info:
                good = np.all(np.isfinite(info["modes"]), axis=1)
                lam_cache[idx[good]] = info["modes"][good]
            for key in ("failures", "low_ess"):
                if info.get(key):
                    trace.warn(key, info[key])
            tcount = epoch if cfg.decay == "epoch" else step
            theta, state = adam_step(state, g, theta, cfg.alpha, tcount, fam,
                                     cfg.beta1, cfg.beta2, cfg.eps)
            step += 1
            elapsed += time.perf_counter() - t0
            rec = dict(step=step, epoch=epoch + 1, wall_ms=1e3 * elapsed,
                       grad_norm=g.norm(), sim_nll=None, **base)
            surrogate = -info["objective"] / B
            if start_obj is None:
                start_obj = surrogate
            elif not np.isfinite(surrogate) or surrogate - start_obj > 9 * abs(start_obj):
                trace.diverged = True
            last_in_epoch = step % steps_per_epoch == 0
            if trace.diverged or (last_in_epoch and cfg.eval_every > 0
                                  and (epoch + 1) % cfg.eval_every == 0):
                rec["sim_nll"] = evaluate()
            trace.add(**rec)
            if trace.diverged:
                break
        if trace.diverged:
            break
    if state.nonfinite:
        trace.warn("nonfinite_gradient", state.nonfinite)
    _, theta = identify(np.zeros((1, cfg.q)), theta, strict=False)
    return theta, trace

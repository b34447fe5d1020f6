"""Fit a Poisson factor model by EM and compare covariance estimates.

Draws count data from a three-factor model, fits it, and reports how far
the model-implied covariance and the sample covariance are from the truth.
Run: python3 demos/fit_and_covariance.py
"""
import numpy as np

from expfactor import (EMConfig, cov_errors, fit_em, model_covariance, parse_family,
                       sample_covariance, simulate_factor_model)

fam = parse_family("poisson")
data, truth, _ = simulate_factor_model(400, 40, 3, fam, rng=1, eta0_mean=1.0)

theta, lam, trace = fit_em(data, fam, EMConfig(q=3))
print(f"EM stopped after {len(trace.records)} iterations")
print("leading loading norms:", np.round(np.linalg.norm(theta.V, axis=0), 3))
print("true loading norms:   ", np.round(np.linalg.norm(truth.V, axis=0), 3))

sigma_true = model_covariance(truth, fam, rng=0)
for name, est in [("model", model_covariance(theta, fam, rng=1)),
                  ("sample", sample_covariance(data.X))]:
    frob, ent, norm = cov_errors(est, sigma_true)
    print(f"{name:>6}: frobenius {frob:8.3f}  entropy {ent:7.3f}  normalized {norm:6.3f}")

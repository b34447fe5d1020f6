"""Compare the three SGD gradient evaluators from one starting point.

Each run records the simulated negative log-likelihood after every epoch;
the printout lists the path per evaluator next to its compute time.
Run: python3 demos/optimizer_paths.py
"""
from expfactor import SGDConfig, fit_sgd, initialize, parse_family, simulate_factor_model

fam = parse_family("poisson")
data, _, _ = simulate_factor_model(500, 10, 2, fam, rng=0)
theta0, _ = initialize(data, fam, 2)

for mode, S in [("lapl", 1), ("ps", 50), ("sml", 50), ("sml", 500)]:
    cfg = SGDConfig(q=2, B=128, S=S, alpha=0.5, T=8, mode=mode)
    _, trace = fit_sgd(data, fam, cfg, theta0=theta0)
    ev = trace.evaluated()
    path = " ".join(f"{r['sim_nll']:.0f}" for r in ev)
    print(f"{mode}:{S:<4} {ev[-1]['wall_ms'] / 1e3:5.2f}s  {path}")

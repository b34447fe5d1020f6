"""Command-line interface: ``expfactor {fit,simulate,covariance,eval,bench,aggregate}``.

Every option may also be given in a flat ``key = value`` config file passed
with ``--config``; flags on the command line win. Failures print one JSON line
``{"error": ..., "message": ...}`` on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .covariance import cov_errors, model_covariance, sample_covariance
from .em import EMConfig, fit_em, initialize
from .family import parse_family
from .laplace import posterior_rows
from .likelihood import EvalConfig, simulated_marginal_loglik
from .model import Dataset, load_params, read_matrix, save_params, write_matrix
from .sgd import SGDConfig, fit_sgd
from .simulation import MultiplexStack, fan_scenario, multiplex_weights, simulate_factor_model
from .trace import SGD_COLUMNS, FitTrace, substream

COMMANDS = ("fit", "simulate", "covariance", "eval", "bench", "aggregate")

EM_ONLY = ("m", "tol")
SGD_ONLY = ("S", "B", "alpha", "decay", "center", "eval_every")

DEFAULTS = {
    "fit": dict(mode="em", T=None, m=3, tol=1e-6, S=50, B=128, alpha=0.5, decay="epoch",
                center="likelihood", eval_every=1, R=1500, weights=None),
    "simulate": dict(scenario="factor", n=500, p=10, q=2, family="poisson:log", phi=1.0,
                     missing=0.0, trials=None),
    "covariance": dict(truth=None, input=None, S_mc=100_000, w=1.0),
    "eval": dict(R=1500, weights=None, outdir=None),
    "bench": dict(modes="ps,lapl,sml", S=50, B=128, alpha=0.5, T=10, decay="epoch",
                  center="likelihood", eval_every=1, R=1500, weights=None),
    "aggregate": dict(n=None),
}
REQUIRED = {
    "fit": ("input", "family", "q", "outdir"),
    "simulate": ("outdir",),
    "covariance": ("params", "outdir"),
    "eval": ("params", "input"),
    "bench": ("input", "family", "q", "outdir"),
    "aggregate": ("input", "outdir"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    threads: int | None = None
    options: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["options"][name]
        except KeyError:
            raise AttributeError(name) from None


def _build_parser():
    p = _Parser(prog="expfactor", description=__doc__.splitlines()[0],
                argument_default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat key=value file; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="cap on BLAS threads")
        sp.add_argument("-o", "--outdir")

    def data_args(sp):
        sp.add_argument("-i", "--input", help="data matrix X (CSV)")
        sp.add_argument("-w", "--weights", help="weight matrix W (CSV, default all ones)")

    def sgd_args(sp):
        sp.add_argument("--S", type=int, help="draws per row")
        sp.add_argument("--B", type=int, help="batch size")
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--decay", choices=("epoch", "step"))
        sp.add_argument("--center", choices=("likelihood", "map"))
        sp.add_argument("--eval-every", dest="eval_every", type=int)
        sp.add_argument("--R", type=int, help="draws per row of the NLL evaluator")

    sp = sub.add_parser("fit", help="fit a model by EM or SGD",
                        argument_default=argparse.SUPPRESS)
    common(sp)
    data_args(sp)
    sp.add_argument("--family")
    sp.add_argument("--q", type=int)
    sp.add_argument("--mode", choices=("em", "ps", "lapl", "sml"))
    sp.add_argument("--T", type=int, help="EM iterations or SGD epochs")
    sp.add_argument("--m", type=int, help="Gauss-Hermite nodes per factor (EM)")
    sp.add_argument("--tol", type=float, help="relative objective tolerance (EM)")
    sgd_args(sp)

    sp = sub.add_parser("simulate", help="draw a synthetic dataset",
                        argument_default=argparse.SUPPRESS)
    common(sp)
    sp.add_argument("--scenario", choices=("factor", "fan"))
    sp.add_argument("--family")
    sp.add_argument("--n", type=int)
    sp.add_argument("--p", type=int)
    sp.add_argument("--q", type=int)
    sp.add_argument("--phi", type=float)
    sp.add_argument("--missing", type=float, help="fraction of entries with zero weight")
    sp.add_argument("--trials", type=int, help="binomial trials per entry")

    sp = sub.add_parser("covariance", help="model-implied covariance and losses",
                        argument_default=argparse.SUPPRESS)
    common(sp)
    sp.add_argument("--params", help="directory written by fit")
    sp.add_argument("--truth", help="parameter directory of the generating model")
    sp.add_argument("-i", "--input", help="data for the sample covariance")
    sp.add_argument("--S-mc", dest="S_mc", type=int)
    sp.add_argument("--w", type=float, help="weight of a new observation")

    sp = sub.add_parser("eval", help="simulated marginal log-likelihood",
                        argument_default=argparse.SUPPRESS)
    common(sp)
    data_args(sp)
    sp.add_argument("--params")
    sp.add_argument("--R", type=int)

    sp = sub.add_parser("bench", help="compare SGD gradients from one start",
                        argument_default=argparse.SUPPRESS)
    common(sp)
    data_args(sp)
    sp.add_argument("--family")
    sp.add_argument("--q", type=int)
    sp.add_argument("--modes", help="comma list of mode[:S], e.g. ps:50,sml:500,lapl")
    sp.add_argument("--T", type=int, help="epochs")
    sgd_args(sp)

    sp = sub.add_parser("aggregate", help="multiplex edge list to A.csv and W.csv",
                        argument_default=argparse.SUPPRESS)
    common(sp)
    sp.add_argument("-i", "--input", help="edge list CSV with columns i, j, layer")
    sp.add_argument("--n", type=int, help="number of nodes")
    return p


def _read_config_file(path):
    out = {}
    if not os.path.isfile(path):
        raise UsageError(f"--config: no such file: {path}")
    with open(path) as fh:
        for k, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{k}: expected key = value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = val
    return out


def parse_config(argv=None) -> RunConfig:
    """Parse flags and an optional config file into a validated :class:`RunConfig`."""
    parser = _build_parser()
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    sub = parser._subparsers._group_actions[0].choices[command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    given = {}
    if "config" in ns:
        for key, raw in _read_config_file(ns.pop("config")).items():
            if key not in actions:
                raise UsageError(f"unknown config key {key!r} for {command}")
            a = actions[key]
            try:
                val = a.type(raw) if a.type else raw
            except ValueError:
                raise UsageError(f"config key {key!r}: invalid value {raw!r}") from None
            if a.choices is not None and val not in a.choices:
                raise UsageError(f"config key {key!r}: {val!r} not in {list(a.choices)}")
            given[key] = val
    given.update(ns)

    opts = dict(DEFAULTS[command])
    opts.update(given)
    missing = [k for k in REQUIRED[command] if opts.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) " + ", ".join(f"--{k}" for k in missing))
    if command == "fit":
        mode = opts["mode"]
        bad = [k for k in (SGD_ONLY if mode == "em" else EM_ONLY) if k in given]
        if bad:
            raise UsageError(f"--{bad[0]} is incompatible with --mode {mode}")
        if opts["T"] is None:
            opts["T"] = 100 if mode == "em" else 10
    for key in ("input", "weights", "params", "truth", "config"):
        path = opts.get(key)
        if path is not None and not os.path.exists(path):
            raise UsageError(f"--{key}: no such file or directory: {path}")
    if "family" in opts and opts["family"] is not None:
        try:
            parse_family(opts["family"])
        except ValueError as exc:
            raise UsageError(f"--family: {exc}") from None
    seed = opts.pop("seed", 0)
    threads = opts.pop("threads", None)
    if threads is not None and threads < 1:
        raise UsageError("--threads must be at least 1")
    return RunConfig(command, seed, threads, opts)


# -- commands -------------------------------------------------------------------


def _load_data(cfg):
    X = read_matrix(cfg.input)
    W = read_matrix(cfg.weights) if cfg.options.get("weights") else None
    if W is not None and W.shape != X.shape:
        raise ValueError(f"W has shape {W.shape} but X has shape {X.shape}")
    return Dataset(X, W)


def _sgd_config(cfg, mode, S):
    return SGDConfig(q=cfg.q, B=cfg.B, S=S, alpha=cfg.alpha, T=cfg.T, mode=mode, seed=cfg.seed,
                     decay=cfg.decay, center=cfg.center, eval_every=cfg.eval_every,
                     eval_R=cfg.R)


def _cmd_fit(cfg):
    fam = parse_family(cfg.family)
    data = _load_data(cfg)
    os.makedirs(cfg.outdir, exist_ok=True)
    if cfg.mode == "em":
        ecfg = EMConfig(q=cfg.q, m=cfg.m, T=cfg.T, tol=cfg.tol, seed=cfg.seed)
        theta, Lam, trace = fit_em(data, fam, ecfg)
        meta = dict(mode="em", m=ecfg.m, T=ecfg.T, tol=ecfg.tol)
    else:
        scfg = _sgd_config(cfg, cfg.mode, cfg.S)
        theta, trace = fit_sgd(data, fam, scfg)
        d = data.validate(cfg.q, fam)
        Lam = posterior_rows(d.X, d.W, theta, fam, scfg.center).post_mean
        meta = dict(mode=cfg.mode, S=scfg.S, B=scfg.B, alpha=scfg.alpha, T=scfg.T,
                    decay=scfg.decay, center=scfg.center, diverged=trace.diverged)
    meta["warnings"] = trace.warnings
    save_params(cfg.outdir, theta, fam, cfg.seed, **meta)
    write_matrix(os.path.join(cfg.outdir, "lambda_post_mean.csv"), Lam)
    trace.to_csv(os.path.join(cfg.outdir, "trace.csv"))
    return dict(outdir=cfg.outdir, iterations=len(trace.records), warnings=trace.warnings)


def _cmd_simulate(cfg):
    fam = parse_family(cfg.family)
    rng = substream(cfg.seed, "simulate")
    if cfg.scenario == "fan":
        data, truth = fan_scenario(cfg.n, cfg.p, fam, rng)
        theta, Lam = truth.theta, truth.Lam
        extra = dict(scenario="fan", lam_mean=truth.lam_mean.tolist(),
                     lam_cov=truth.lam_cov.tolist())
    else:
        data, theta, Lam = simulate_factor_model(cfg.n, cfg.p, cfg.q, fam, rng, phi=cfg.phi,
                                                 missing=cfg.missing, trials=cfg.trials)
        extra = dict(scenario="factor")
    os.makedirs(cfg.outdir, exist_ok=True)
    write_matrix(os.path.join(cfg.outdir, "X.csv"), data.X)
    write_matrix(os.path.join(cfg.outdir, "W.csv"), data.W)
    tdir = os.path.join(cfg.outdir, "truth")
    save_params(tdir, theta, fam, cfg.seed, **extra)
    write_matrix(os.path.join(tdir, "lambda.csv"), Lam)
    return dict(outdir=cfg.outdir, n=int(data.X.shape[0]), p=int(data.X.shape[1]))


def _cmd_covariance(cfg):
    theta, fam, _ = load_params(cfg.params)
    est = model_covariance(theta, fam, cfg.S_mc, substream(cfg.seed, "covariance"), w=cfg.w)
    os.makedirs(cfg.outdir, exist_ok=True)
    write_matrix(os.path.join(cfg.outdir, "sigma.csv"), est.sigma)
    rows = []
    sample = None
    if cfg.input is not None:
        sample = sample_covariance(read_matrix(cfg.input))
        write_matrix(os.path.join(cfg.outdir, "sample_sigma.csv"), sample.sigma)
    if cfg.truth is not None:
        ttheta, tfam, tmeta = load_params(cfg.truth)
        truth = model_covariance(ttheta, tfam, cfg.S_mc, substream(cfg.seed, "covariance-truth"),
                                 w=cfg.w)
        write_matrix(os.path.join(cfg.outdir, "truth_sigma.csv"), truth.sigma)
        rows.append(("model",) + cov_errors(est, truth))
        if sample is not None:
            rows.append(("sample",) + cov_errors(sample, truth))
    with open(os.path.join(cfg.outdir, "errors.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("estimator", "frobenius", "entropy", "normalized"))
        for r in rows:
            wr.writerow((r[0],) + tuple(repr(float(v)) for v in r[1:]))
    return dict(outdir=cfg.outdir, errors={r[0]: dict(zip(("frobenius", "entropy", "normalized"),
                                                         r[1:])) for r in rows})


def _cmd_eval(cfg):
    theta, fam, _ = load_params(cfg.params)
    data = _load_data(cfg).validate(theta.q, fam)
    seed = int(substream(cfg.seed, "eval").integers(2 ** 31))
    est = simulated_marginal_loglik(data, theta, fam, EvalConfig(cfg.R, seed))
    out = dict(loglik=est.value, mc_std=est.std, R=cfg.R)
    if cfg.outdir is not None:
        os.makedirs(cfg.outdir, exist_ok=True)
        with open(os.path.join(cfg.outdir, "eval.json"), "w") as fh:
            json.dump(out, fh, indent=1)
    return out


def parse_modes(spec: str, default_S: int):
    """``"ps:50,sml:500,lapl"`` -> ``[("ps", 50), ("sml", 500), ("lapl", 1)]``."""
    out = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        mode, _, s = item.partition(":")
        if mode not in ("ps", "lapl", "sml"):
            raise UsageError(f"--modes: unknown mode {mode!r}")
        S = int(s) if s else (1 if mode == "lapl" else default_S)
        out.append((mode, S))
    if not out:
        raise UsageError("--modes is empty")
    return out


def _cmd_bench(cfg):
    fam = parse_family(cfg.family)
    modes = parse_modes(cfg.modes, cfg.S)
    data = _load_data(cfg).validate(cfg.q, fam)
    theta0, _ = initialize(data, fam, cfg.q)
    os.makedirs(cfg.outdir, exist_ok=True)
    merged = FitTrace(SGD_COLUMNS)
    timing = []
    summary = {}
    for mode, S in modes:
        _, trace = fit_sgd(data, fam, _sgd_config(cfg, mode, S), theta0=theta0)
        merged.records.extend(trace.records)
        timing.extend((mode, S, r["step"], r["wall_ms"]) for r in trace.records)
        ev = trace.evaluated()
        summary[f"{mode}:{S}"] = dict(final_sim_nll=ev[-1]["sim_nll"] if ev else None,
                                      diverged=trace.diverged, warnings=trace.warnings)
    merged.to_csv(os.path.join(cfg.outdir, "trace.csv"), timing=False)
    with open(os.path.join(cfg.outdir, "timing.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("mode", "S", "step", "wall_ms"))
        for mode, S, step, ms in timing:
            wr.writerow((mode, S, step, repr(float(ms))))
    return dict(outdir=cfg.outdir, runs=summary)


def _cmd_aggregate(cfg):
    edges = read_matrix(cfg.input)
    if edges.shape[1] != 3:
        raise ValueError(f"edge list needs 3 columns (i, j, layer), got {edges.shape[1]}")
    if np.any(edges != np.rint(edges)) or np.any(edges < 0):
        raise ValueError("edge list entries must be nonnegative integers")
    stack = MultiplexStack.from_edges(edges.astype(int), cfg.n)
    A, W = multiplex_weights(stack)
    os.makedirs(cfg.outdir, exist_ok=True)
    write_matrix(os.path.join(cfg.outdir, "A.csv"), A)
    write_matrix(os.path.join(cfg.outdir, "W.csv"), W)
    return dict(outdir=cfg.outdir, n=int(A.shape[0]), layers=len(stack.layers))


_COMMANDS = {"fit": _cmd_fit, "simulate": _cmd_simulate, "covariance": _cmd_covariance,
             "eval": _cmd_eval, "bench": _cmd_bench, "aggregate": _cmd_aggregate}


def run(cfg: RunConfig) -> dict:
    """Execute a parsed command; returns a JSON-serializable summary."""
    if cfg.threads is None:
        return _COMMANDS[cfg.command](cfg)
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=cfg.threads):
        return _COMMANDS[cfg.command](cfg)


def _error(kind, exc, command=None):
    line = {"error": kind, "message": str(exc)}
    if command:
        line["command"] = command
    print(json.dumps(line), file=sys.stderr)


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    if not argv or argv[0] in ("-h", "--help"):
        _build_parser().print_help()
        return 0 if argv else 2
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        _error("usage", exc)
        return 2
    except SystemExit as exc:  # --help inside a subcommand
        return int(exc.code or 0)
    try:
        summary = run(cfg)
    except Exception as exc:
        _error(type(exc).__name__, exc, cfg.command)
        return 1
    print(json.dumps(summary, default=float))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

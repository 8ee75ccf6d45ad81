"""Command-line front end.

Subcommands: ``run`` (the samplers), ``scaling-study``, ``check`` (oracle
self-tests on the linear model), ``simulate`` (data generation only).
Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .errors import ConfigError, TemperSmcError
from .kalman import grid_posterior, kalman_loglik
from .models import Dataset, make_atan_model, make_linear_model, simulate
from .sampler import ProposalSpec, run_exact_tempered_smc, run_pmh, run_tempered_smc
from .tempering import ess as compute_ess
from .tempering import solve_lambda

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

_TRUE_THETA = {"linear": (0.8, -1.0), "atan": (1.0, 1.0)}


def atomic_write(path: Path, text: str) -> None:
    """Write fully or not at all: temp file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_model(cfg: RunConfig):
    if cfg.model == "linear":
        return make_linear_model()
    return make_atan_model()


def load_data(cfg: RunConfig, model) -> Dataset:
    if cfg.data_csv:
        try:
            return Dataset.from_csv(cfg.data_csv)
        except OSError:
            raise
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"unreadable data file {cfg.data_csv!r}: {exc}", field="data_csv")
    theta = np.asarray(cfg.theta_true if cfg.theta_true else _TRUE_THETA[cfg.model])
    try:
        return simulate(model, theta, cfg.T, seed=cfg.data_seed)
    except ValueError as exc:
        raise ConfigError(str(exc), field="theta_true")


def _samples_csv(samples: np.ndarray) -> str:
    d = samples.shape[1]
    lines = ["j," + ",".join(f"theta_{k + 1}" for k in range(d))]
    for j, row in enumerate(samples):
        lines.append(str(j) + "," + ",".join(format(v, ".17g") for v in row))
    return "\n".join(lines) + "\n"


def _schedule_csv(schedule) -> str:
    lines = ["p,lambda,ess,accept_rate"]
    for rec in schedule:
        lines.append(
            f"{rec.p},{rec.lam:.17g},{rec.ess:.17g},{rec.accept_rate:.17g}"
        )
    return "\n".join(lines) + "\n"


def _hist_csv(values: np.ndarray, bins: int) -> str:
    counts, edges = np.histogram(values, bins=bins)
    lines = ["bin_left,bin_right,count"]
    for i, c in enumerate(counts):
        lines.append(f"{edges[i]:.17g},{edges[i + 1]:.17g},{int(c)}")
    return "\n".join(lines) + "\n"


def _write_run_artifacts(cfg: RunConfig, out: Path, samples, schedule, meta: dict) -> None:
    atomic_write(out / "samples.csv", _samples_csv(samples))
    atomic_write(out / "schedule.csv", _schedule_csv(schedule))
    for k in range(samples.shape[1]):
        atomic_write(out / f"hist_theta{k + 1}.csv", _hist_csv(samples[:, k], cfg.bins))
    lines = [f"{key} = {val}" for key, val in meta.items()]
    atomic_write(out / "metadata.txt", "\n".join(lines) + "\n\n" + cfg.echo())


def cmd_run(cfg: RunConfig) -> int:
    if cfg.mode == "tempered-exact" and cfg.model != "linear":
        raise ConfigError("tempered-exact requires the linear model", field="mode")
    model = build_model(cfg)
    data = load_data(cfg, model)
    out = Path(cfg.out_dir)
    t0 = time.time()
    if cfg.mode == "tempered-exact":
        result = run_exact_tempered_smc(model, data, cfg)
        samples, schedule = result.samples, result.schedule
        reason = ",".join(result.termination_reason)
        final_lambda = result.final_lambda
    elif cfg.mode == "tempered-pf":
        result = run_tempered_smc(model, data, cfg)
        samples, schedule = result.samples, result.schedule
        reason = ",".join(result.termination_reason)
        final_lambda = result.final_lambda
    elif cfg.mode == "pmh":
        proposal = ProposalSpec(scales=np.asarray(cfg.proposal_scales), adapt=False)
        chain, rate = run_pmh(
            model, data, cfg.lambda_target, cfg.chain_length, proposal, cfg
        )
        samples, schedule, reason = chain, [], f"chain-complete(accept={rate:.6g})"
        final_lambda = cfg.lambda_target
    else:
        raise ConfigError(f"mode {cfg.mode!r} is not runnable via 'run'", field="mode")
    meta = {
        "seed": cfg.seed,
        "termination_reason": reason,
        "final_lambda": format(final_lambda, ".17g"),
        "wall_time_s": format(time.time() - t0, ".3f"),
    }
    _write_run_artifacts(cfg, out, samples, schedule, meta)
    print(f"wrote artifacts to {out} (termination: {reason})")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    model = build_model(cfg)
    theta = np.asarray(cfg.theta_true if cfg.theta_true else _TRUE_THETA[cfg.model])
    data = simulate(model, theta, cfg.T, seed=cfg.data_seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data.to_csv(out / "data.csv")
    print(f"wrote {out / 'data.csv'} (T={data.T})")
    return EXIT_OK


def cmd_scaling_study(cfg: RunConfig) -> int:
    """For each horizon T: simulate, anneal to the target variance, record the
    number of annealing steps P."""
    if not cfg.scaling_T:
        raise ConfigError("scaling-study needs a scaling_T list", field="scaling_T")
    model = build_model(cfg)
    theta = np.asarray(cfg.theta_true if cfg.theta_true else _TRUE_THETA[cfg.model])
    rows = []
    for T in [int(t) for t in cfg.scaling_T]:
        data = simulate(model, theta, T, seed=cfg.data_seed)
        run_cfg = replace(cfg, T=T, accept_floor=0.0)
        result = run_tempered_smc(model, data, run_cfg)
        rows.append((T, result.diagnostics["n_steps"]))
        print(f"T={T}: P={rows[-1][1]}")
    out = Path(cfg.out_dir)
    lines = ["T,P"] + [f"{t},{p}" for t, p in rows]
    atomic_write(out / "scaling.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_check(cfg: RunConfig) -> int:
    """Oracle self-checks on the linear model; prints one pass/fail line each."""
    if cfg.model != "linear":
        raise ConfigError("check requires the linear model", field="model")
    from .particle_filter import run_bpf  # local import to keep module load light

    model = build_model(cfg)
    theta = np.asarray(cfg.theta_true if cfg.theta_true else _TRUE_THETA["linear"])
    data = simulate(model, theta, min(cfg.T, 50), seed=cfg.data_seed)
    ok = True

    # Unbiasedness: mean of exp(log_z) vs the exact likelihood.
    lam = 1.0
    ll_exact = kalman_loglik(model, theta, lam, data)
    n_rep = 300
    log_zs = np.empty(n_rep)
    for m in range(n_rep):
        rng = np.random.default_rng(cfg.seed * 100003 + m)
        log_zs[m] = run_bpf(model, theta, lam, data, cfg.n_x, rng).log_z
    ratios = np.exp(log_zs - ll_exact)
    se = ratios.std(ddof=1) / np.sqrt(n_rep)
    dev = abs(ratios.mean() - 1.0)
    passed = dev <= 3 * se
    ok &= passed
    print(f"[{'PASS' if passed else 'FAIL'}] unbiasedness: |mean-1|={dev:.4g} (3*SE={3 * se:.4g})")

    # ESS solver: re-evaluating at the returned lambda reproduces the target.
    rng = np.random.default_rng(cfg.seed + 17)
    bundles = []
    for j in range(40):
        th = model.sample_prior(rng)
        bundles.append(run_bpf(model, th, cfg.lambda0, data, cfg.n_x, rng).bundle)
    tcfg = cfg.tempering()
    lam_new, ess_at, fb = solve_lambda(bundles, cfg.lambda0, tcfg)
    from .particle_filter import incremental_logweight

    re_ess = compute_ess(
        np.array([incremental_logweight(b, None, lam_new, cfg.lambda0) for b in bundles])
    )
    target = tcfg.alpha * len(bundles)
    passed = (
        lam_new == tcfg.lambda_target
        or fb
        or abs(re_ess - target) / target <= tcfg.ess_tol
    ) and re_ess == ess_at
    ok &= passed
    print(
        f"[{'PASS' if passed else 'FAIL'}] ess-solver: lambda={lam_new:.4g} "
        f"ess={re_ess:.4g} target={target:.4g}"
    )

    # Grid oracle: exact annealed run lands near the grid posterior mean.
    grid_cfg = replace(cfg, n_theta=max(cfg.n_theta, 200), mode="tempered-exact")
    data200 = simulate(model, theta, cfg.T, seed=cfg.data_seed)
    result = run_exact_tempered_smc(model, data200, grid_cfg)
    axes = [np.linspace(-2.5, 2.5, 80), np.linspace(-2.5, 2.5, 80)]
    gp = grid_posterior(model, result.final_lambda, data200, axes)
    dev = np.abs(result.samples.mean(axis=0) - gp.mean())
    passed = bool(np.all(dev < 0.1))
    ok &= passed
    print(f"[{'PASS' if passed else 'FAIL'}] grid-posterior: |mean dev|={dev.max():.4g} (<0.1)")

    return EXIT_OK if ok else EXIT_NUMERICAL


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempersmc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "scaling-study", "check", "simulate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--threads", type=int, default=None, help="worker threads")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--bins", type=int, default=None, help="histogram bins")
        p.add_argument(
            "--verbose", action="store_true", help="log annealing progress to stderr"
        )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.verbose:
        import logging

        logging.basicConfig(
            level=logging.INFO, format="%(asctime)s %(name)s: %(message)s"
        )
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.threads is not None:
            overrides["threads"] = args.threads
        if args.out is not None:
            overrides["out_dir"] = args.out
        if args.bins is not None:
            overrides["bins"] = args.bins
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "scaling-study":
            return cmd_scaling_study(cfg)
        return cmd_check(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TemperSmcError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``backaction {fig2,fig3,verify,nlevel}``."""

from __future__ import annotations

import argparse
import csv
from dataclasses import replace
import math
import os
import sys
from typing import List, Optional

import numpy as np

from .analysis import (EnsembleSpec, FirstPassageTracker, HorizonExhausted,
                       InsufficientSignal, NonStationary, default_k_grid,
                       ensemble_average_error, fit_asymptotic_rate, passage_rate,
                       resampled_error_series, simulate_errors, steady_state_grid,
                       summarize_passages, sweep_grid)
from .config import ConfigError, RunConfig, load_config
from .fokker_planck import NoConvergence, StabilityViolation, log_chart_problem, windowed_rate
from .protocols import NoiseParams, ProtocolKind, SingularStateError
from .sde import IntegrationFailure
from .sme import run_nlevel_ensemble

EXIT_OK, EXIT_FAILED_CHECK, EXIT_CONFIG, EXIT_SIMULATION = 0, 1, 2, 3

SCHEMAS = """\
output files (CSV: comma-separated, header row, LF line endings, 17 significant digits):
  fig2    fig2a.csv        t, mean_Pe, stderr        (stderr is nan when ensemble = 1)
          fig2a_fp.csv     t, mean_Pe                (Fokker-Planck on ln(delta))
          fig2a_plain.csv  t, mean_Pe, stderr        (unweighted Monte Carlo)
          fig2b.csv        target_Pe, mean_time, stderr, censored_count
          rates.txt        key = value fit results and diagnostics
          fig2.svg
  fig3    fig3a.csv        gamma_over_kappa, mean_Pe_ss, stderr   (diffusion gradient)
          fig3b.csv        gamma_over_kappa, dg_mean, dg_stderr, perp_mean, perp_stderr,
                           perp_best_k, par_mean, par_stderr
          fig3_stationarity.csv  gamma_over_kappa, dg, perp, par   (1 = half-window check passed)
          sweep_tables/sweep_NN.csv  gamma_over_kappa, k, mean_Pe_ss, stderr, stationary
          fig3.svg
  verify  verify_report.txt
  nlevel  nlevel.csv       t, median_Pe, q25_Pe, q75_Pe
          nlevel.svg
"""

SIMULATION_ERRORS = (IntegrationFailure, SingularStateError, StabilityViolation, NoConvergence,
                     InsufficientSignal, HorizonExhausted, NonStationary, FloatingPointError)


class Outputs:
    """Tracks files written by a command so they can be removed on failure."""

    def __init__(self, root: str):
        self.root = root
        self.paths: List[str] = []
        self.dirs: List[str] = []

    def path(self, name: str) -> str:
        full = os.path.join(self.root, name)
        parent = os.path.dirname(full)
        if not os.path.isdir(parent):
            os.makedirs(parent)
            self.dirs.append(parent)
        self.paths.append(full)
        return full

    def csv(self, name: str, header, rows):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])

    def text(self, name: str, content: str):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            fh.write(content)

    def discard(self):
        for p in self.paths:
            if os.path.exists(p):
                os.remove(p)
        for d in reversed(self.dirs):
            if os.path.isdir(d) and not os.listdir(d):
                os.rmdir(d)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return format(v, ".17g")


def _ensemble(cfg: RunConfig, n_paths: int, horizon: float, initial_delta: float) -> EnsembleSpec:
    return EnsembleSpec(n_paths=n_paths, horizon=horizon, dt=cfg.dt, seed=cfg.seed,
                        initial_delta=initial_delta, record_every=cfg.record_every,
                        threads=cfg.threads, boundary=cfg.boundary)


def _try_fit(fn):
    try:
        return fn(), ""
    except (InsufficientSignal, ValueError) as exc:
        return None, str(exc)


# --- fig2 ---------------------------------------------------------------------------


def cmd_fig2(cfg: RunConfig, out: Outputs, plots: bool = True) -> None:
    params = cfg.control
    spec = _ensemble(cfg, cfg.ensemble, cfg.horizon, math.pi)
    window = (cfg.fit_start, cfg.horizon)

    series = resampled_error_series(params, spec, cfg.resample_exponent)
    err = series.stderr if cfg.ensemble > 1 else np.full_like(series.mean, np.nan)
    out.csv("fig2a.csv", ("t", "mean_Pe", "stderr"), zip(series.times, series.mean, err))
    fit_a, why_a = _try_fit(lambda: fit_asymptotic_rate(series, start=window[0], stop=window[1]))
    tail_a, why_tail = _try_fit(lambda: fit_asymptotic_rate(series, cfg.tail_fraction))

    thresholds = np.geomspace(0.5, cfg.passage_min, cfg.passage_points)
    tracker = FirstPassageTracker(thresholds, cfg.ensemble)
    times, paths = simulate_errors(ProtocolKind.DIFFUSION_GRADIENT, params, None, spec,
                                   callback=tracker)
    plain = ensemble_average_error(paths, times, (cfg.seed,))
    out.csv("fig2a_plain.csv", ("t", "mean_Pe", "stderr"),
            zip(plain.times, plain.mean, plain.stderr))
    fit_plain, why_plain = _try_fit(lambda: fit_asymptotic_rate(plain, start=window[0],
                                                                stop=window[1]))
    passages = summarize_passages(tracker, cfg.horizon)
    out.csv("fig2b.csv", ("target_Pe", "mean_time", "stderr", "censored_count"),
            zip(passages.thresholds, passages.mean_time, passages.stderr, passages.censored))
    fit_b, why_b = _try_fit(lambda: passage_rate(passages, max_threshold=cfg.passage_fit_max))

    problem = log_chart_problem(params.kappa, cfg.fp_size, cfg.fp_depth, cfg.boundary)
    fp_t, fp_v = problem.series(problem.initial(problem.grid.upper), cfg.horizon, cfg.dt,
                                record_every=cfg.record_every)
    out.csv("fig2a_fp.csv", ("t", "mean_Pe"), zip(fp_t, fp_v))
    fp_rate = windowed_rate(fp_t, fp_v, *window)
    fp_tail = windowed_rate(fp_t, fp_v, cfg.horizon * (1 - cfg.tail_fraction))

    lines = [
        "# rates in units of kappa, times in units of 1/kappa",
        f"kappa = {params.kappa!r}",
        f"ensemble = {cfg.ensemble}",
        f"seed = {cfg.seed}",
        f"dt = {cfg.dt!r}",
        f"boundary = {cfg.boundary}",
    ]

    def emit(key, fit, why):
        if fit is None:
            lines.append(f"{key} = nan")
            lines.append(f"{key}_note = {why}")
            return
        lines.append(f"{key} = {_fmt(fit.rate / params.kappa)}")
        lines.append(f"{key}_window = {_fmt(fit.window[0])} {_fmt(fit.window[1])}")
        lines.append(f"{key}_points = {fit.points}")
        lines.append(f"{key}_r_squared = {_fmt(fit.r_squared)}")
        lines.append(f"{key}_residual = {_fmt(fit.residual)}")

    emit("rate_a", fit_a, why_a)
    emit("rate_a_tail", tail_a, why_tail)
    emit("rate_a_plain", fit_plain, why_plain)
    lines.append(f"rate_a_fp = {_fmt(fp_rate / params.kappa)}")
    lines.append(f"rate_a_fp_window = {_fmt(window[0])} {_fmt(window[1])}")
    lines.append(f"rate_a_fp_tail = {_fmt(fp_tail / params.kappa)}")
    emit("rate_b", fit_b, why_b)
    lines.append(f"rate_b_max_threshold = {_fmt(cfg.passage_fit_max)}")
    lines.append(f"rate_b_censored_total = {int(passages.censored.sum())}")
    out.text("rates.txt", "\n".join(lines) + "\n")

    if plots:
        from .plotting import plot_fig2
        plot_fig2(out.path("fig2.svg"), series.times, series.mean, err,
                  None if fit_a is None else fit_a.rate, window, fp=(fp_t, fp_v),
                  passage=(passages.thresholds, passages.mean_time),
                  rate_b=None if fit_b is None else fit_b.rate)


# --- fig3 ---------------------------------------------------------------------------


def cmd_fig3(cfg: RunConfig, out: Outputs, plots: bool = True) -> None:
    params = cfg.control
    gammas = np.geomspace(cfg.gamma_min * params.kappa, cfg.gamma_max * params.kappa,
                          cfg.gamma_points)
    noises = [NoiseParams.uniform(float(g)) for g in gammas]
    horizon = cfg.burn_in + cfg.window
    spec = _ensemble(cfg, cfg.steady_ensemble, horizon, cfg.steady_initial_delta)

    def grid(kind, settings, spec):
        return steady_state_grid(kind, params, settings, cfg.burn_in, cfg.window, spec,
                                 strict=False)

    dg = grid(ProtocolKind.DIFFUSION_GRADIENT, [(n, None) for n in noises], spec)
    par = grid(ProtocolKind.HAMILTONIAN_PARALLEL, [(n, None) for n in noises], spec)
    k_grid = default_k_grid(params, cfg.k_points)
    k_grid = k_grid[k_grid <= params.kmax * (1 + 1e-12)]
    sweep_spec = replace(spec, n_paths=cfg.sweep_ensemble, seed=cfg.seed + 1)
    sweeps = sweep_grid(noises, params, k_grid, sweep_spec, cfg.burn_in, cfg.window,
                        strict=False)
    # the selected k is re-evaluated on fresh noise so its estimate is not
    # biased low by the minimum over the grid
    perp = grid(ProtocolKind.HAMILTONIAN_PERPENDICULAR,
                [(n, s.best_k) for n, s in zip(noises, sweeps)], spec)

    ratio = gammas / params.kappa
    out.csv("fig3a.csv", ("gamma_over_kappa", "mean_Pe_ss", "stderr"),
            [(g, r.value, r.stderr) for g, r in zip(ratio, dg)])
    out.csv("fig3b.csv", ("gamma_over_kappa", "dg_mean", "dg_stderr", "perp_mean",
                          "perp_stderr", "perp_best_k", "par_mean", "par_stderr"),
            [(g, a.value, a.stderr, b.value, b.stderr, s.best_k, c.value, c.stderr)
             for g, a, b, s, c in zip(ratio, dg, perp, sweeps, par)])
    out.csv("fig3_stationarity.csv", ("gamma_over_kappa", "dg", "perp", "par"),
            [(g, a.stationary, b.stationary, c.stationary)
             for g, a, b, c in zip(ratio, dg, perp, par)])
    for i, (g, s) in enumerate(zip(ratio, sweeps)):
        out.csv(os.path.join("sweep_tables", f"sweep_{i:02d}.csv"),
                ("gamma_over_kappa", "k", "mean_Pe_ss", "stderr", "stationary"),
                [(g,) + tuple(row) for row in s.table])
    flagged = sum(not r.stationary for r in dg + perp + par)
    if flagged:
        print(f"warning: {flagged} of {3 * len(gammas)} steady-state estimates failed the "
              "half-window stationarity check (see fig3_stationarity.csv)", file=sys.stderr)
    if plots:
        from .plotting import plot_fig3
        curves = {
            "diffusion gradient": (np.array([r.value for r in dg]), np.array([r.stderr for r in dg])),
            "perpendicular Hamiltonian (best k)": (np.array([r.value for r in perp]),
                                                   np.array([r.stderr for r in perp])),
            "parallel Hamiltonian": (np.array([r.value for r in par]),
                                     np.array([r.stderr for r in par])),
        }
        plot_fig3(out.path("fig3.svg"), ratio, curves)


# --- verify -------------------------------------------------------------------------


def cmd_verify(cfg: RunConfig, out: Outputs, only: Optional[List[str]] = None) -> int:
    from .verify import format_report, run_checks
    results = run_checks(cfg, only)
    report = format_report(results)
    out.text("verify_report.txt", report)
    sys.stdout.write(report)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED_CHECK


# --- nlevel -------------------------------------------------------------------------


def cmd_nlevel(cfg: RunConfig, out: Outputs, plots: bool = True) -> None:
    dim = cfg.nlevel_dim
    target = np.zeros(dim, dtype=complex)
    target[0] = 1.0
    initial = None
    if cfg.nlevel_initial == "antipode":
        initial = np.zeros(dim, dtype=complex)
        initial[1] = 1.0
    times, rec, _ = run_nlevel_ensemble(dim, target, cfg.control, cfg.nlevel_horizon, cfg.dt,
                                        cfg.seed, cfg.nlevel_ensemble, initial,
                                        cfg.record_every, cfg.nlevel_geometry,
                                        threads=cfg.threads)
    q25, med, q75 = np.quantile(rec, [0.25, 0.5, 0.75], axis=0)
    out.csv("nlevel.csv", ("t", "median_Pe", "q25_Pe", "q75_Pe"), zip(times, med, q25, q75))
    if plots:
        from .plotting import plot_quantiles
        plot_quantiles(out.path("nlevel.svg"), times, med, q25, q75)


# --- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backaction",
        description="Feedback control of a continuously measured qubit: figure "
                    "reproduction, N-level demo and invariant checks.",
        epilog=SCHEMAS + "\nexit codes: 0 ok, 1 failed check, 2 configuration error, "
                         "3 simulation failure",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="key = value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--boundary", choices=("circle", "interval"))
        p.add_argument("--ensemble", type=int, help="trajectories per ensemble")
        p.add_argument("--horizon", type=float, help="simulated time in units of 1/kappa")
        p.add_argument("--dt", type=float)
        p.add_argument("--no-plots", action="store_true", help="skip SVG output")

    for name, text in (("fig2", "decay of the error probability and first-passage times"),
                       ("fig3", "steady-state error against noise strength"),
                       ("verify", "invariant and oracle checks"),
                       ("nlevel", "N-level diffusion-gradient demo")):
        p = sub.add_parser(name, help=text, description=text, epilog=SCHEMAS,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        common(p)
        if name == "verify":
            p.add_argument("--only", action="append", metavar="CHECK",
                           help="run only this check (repeatable or comma-separated)")
            p.add_argument("--fault", choices=("hermiticity",), help="inject a known defect")
        if name == "nlevel":
            p.add_argument("--n", type=int, dest="nlevel_dim", help="Hilbert-space dimension")
            p.add_argument("--initial", choices=("random", "antipode"), dest="nlevel_initial")
        if name == "fig3":
            p.add_argument("--gamma-points", type=int, dest="gamma_points")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {key: getattr(args, key, None)
                 for key in ("seed", "threads", "out", "boundary", "ensemble", "horizon", "dt",
                             "nlevel_dim", "nlevel_initial", "gamma_points", "fault")}
    if args.command == "nlevel":
        # the N-level demo has its own ensemble and horizon keys
        overrides["nlevel_ensemble"] = overrides.pop("ensemble")
        overrides["nlevel_horizon"] = overrides.pop("horizon")
    try:
        cfg = load_config(args.config, overrides=overrides)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    only = None
    if getattr(args, "only", None):
        only = [name for item in args.only for name in item.split(",") if name]
    out = Outputs(cfg.out)
    os.makedirs(cfg.out, exist_ok=True)
    plots = not args.no_plots
    try:
        if args.command == "fig2":
            cmd_fig2(cfg, out, plots)
        elif args.command == "fig3":
            cmd_fig3(cfg, out, plots)
        elif args.command == "nlevel":
            cmd_nlevel(cfg, out, plots)
        else:
            try:
                return cmd_verify(cfg, out, only)
            except KeyError as exc:
                print(f"configuration error: {exc.args[0]}", file=sys.stderr)
                return EXIT_CONFIG
    except SIMULATION_ERRORS as exc:
        out.discard()
        print(f"simulation failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except ValueError as exc:
        out.discard()
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BaseException:
        out.discard()
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

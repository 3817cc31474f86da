"""Invariant and oracle checks run by ``backaction verify``.

Every check returns a `CheckResult`; the suite passes iff all do.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
import time
from typing import Callable, Dict, List, Optional

import numpy as np

from .config import RunConfig
from .fokker_planck import (
    DensityField,
    circle_problem,
    fp_evolve,
    log_chart_problem,
    stability_bound,
)
from .protocols import (
    ControlParams,
    NoiseParams,
    ProtocolKind,
    bloch_model,
    noiseless_model,
    noisy_model,
)
from .sde import NoiseStream, run_ensemble, wiener_increments
from .sme import BlochControlledQubit, ControlledQubit, bloch_vectors, initial_density


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    bound: str
    detail: str = ""
    seconds: float = 0.0


# --- Wiener increments ---------------------------------------------------------


def check_wiener_moments(cfg: RunConfig) -> CheckResult:
    dt, n = 1e-3, 1_000_000
    stream = NoiseStream(cfg.seed, 0)
    x = wiener_increments(stream, dt, n)
    again = wiener_increments(stream, dt, n)
    mean_bound = 4 * math.sqrt(dt / n)
    mean = float(np.mean(x))
    var_rel = float(np.var(x) / dt - 1)
    ok = abs(mean) < mean_bound and abs(var_rel) < 0.01 and np.array_equal(x, again)
    return CheckResult("wiener-moments", ok, abs(var_rel),
                       f"|mean|<{mean_bound:.3g}, |var/dt-1|<0.01, reproducible",
                       f"mean={mean:.3g} var/dt-1={var_rel:.3g}")


# --- density-matrix invariants -------------------------------------------------------


class _Monitor:
    """Collects post-step invariants of density-matrix batches."""

    def __init__(self, pure: bool):
        self.trace = 0.0
        self.antiherm = 0.0
        self.min_eig = 1.0
        self.min_purity = 1.0
        self.max_ay = 0.0
        self.pure = pure

    def __call__(self, step, t, rho, rows):
        tr = np.einsum("bii->b", rho)
        self.trace = max(self.trace, float(np.max(np.abs(tr - 1))))
        self.antiherm = max(self.antiherm,
                            float(np.max(np.abs(rho - np.conj(np.swapaxes(rho, 1, 2))))))
        herm = 0.5 * (rho + np.conj(np.swapaxes(rho, 1, 2)))
        self.min_eig = min(self.min_eig, float(np.linalg.eigvalsh(herm).min()))
        purity = np.einsum("bij,bji->b", rho, rho).real
        self.min_purity = min(self.min_purity, float(purity.min()))
        self.max_ay = max(self.max_ay, float(np.max(np.abs(bloch_vectors(rho)[:, 1]))))


_SME_CACHE: Dict[tuple, dict] = {}


def _sme_invariants(cfg: RunConfig) -> dict:
    """Run every protocol with and without noise on the density-matrix route."""
    key = (cfg.seed, cfg.fault)
    if key in _SME_CACHE:
        return _SME_CACHE[key]
    params = ControlParams(k_perp=1.0)
    dt, horizon, paths = 1e-3, 1.0, 32
    out = {"trace": 0.0, "drift": 0.0, "antiherm": 0.0, "min_eig": 1.0,
           "purity_loss": 0.0, "ay": 0.0, "error": ""}
    kinds = (ProtocolKind.DIFFUSION_GRADIENT, ProtocolKind.HAMILTONIAN_PERPENDICULAR,
             ProtocolKind.HAMILTONIAN_PARALLEL)
    for kind in kinds:
        for noise in (NoiseParams(), NoiseParams.uniform(0.05)):
            pure = noise.is_zero
            a0 = 1.0 if pure else 0.95
            rho0 = initial_density([a0 * math.sin(2.0), 0.0, a0 * math.cos(2.0)])
            stepper = ControlledQubit(kind, params, noise, fault=cfg.fault or None)
            mon = _Monitor(pure)
            try:
                run_ensemble(stepper.step, stepper.channels, rho0, horizon, dt, cfg.seed,
                             paths, 1, observe=lambda r: np.zeros(len(r)), callback=mon)
            except Exception as exc:  # reported as a failed check
                out["error"] += f"{kind.value}: {exc}; "
            out["trace"] = max(out["trace"], mon.trace)
            out["drift"] = max(out["drift"], stepper.diagnostics.max_trace_drift)
            out["antiherm"] = max(out["antiherm"], mon.antiherm)
            out["min_eig"] = min(out["min_eig"], mon.min_eig)
            out["ay"] = max(out["ay"], mon.max_ay)
            if pure:
                out["purity_loss"] = max(out["purity_loss"], 1 - mon.min_purity)
    _SME_CACHE[key] = out
    return out


def check_sme_trace(cfg):
    r = _sme_invariants(cfg)
    ok = r["trace"] < 1e-10 and not r["error"]
    return CheckResult("sme-trace", ok, r["trace"], "|tr(rho)-1| < 1e-10",
                       f"pre-renormalization drift {r['drift']:.3g}; {r['error']}")


def check_sme_hermiticity(cfg):
    r = _sme_invariants(cfg)
    ok = r["antiherm"] < 1e-12 and not r["error"]
    return CheckResult("sme-hermiticity", ok, r["antiherm"], "max|rho - rho^+| < 1e-12",
                       r["error"])


def check_sme_positivity(cfg):
    r = _sme_invariants(cfg)
    ok = r["min_eig"] >= -1e-6 and not r["error"]
    return CheckResult("sme-positivity", ok, r["min_eig"], "min eigenvalue >= -1e-6",
                       r["error"])


def check_sme_purity(cfg):
    r = _sme_invariants(cfg)
    bound = 10 * 1e-3 * 1.0
    ok = r["purity_loss"] <= bound and not r["error"]
    return CheckResult("sme-purity", ok, r["purity_loss"],
                       f"1 - tr(rho^2) <= 10 dt kappa = {bound:g} (noise off)", r["error"])


def check_ay_leakage(cfg):
    r = _sme_invariants(cfg)
    ok = r["ay"] < 1e-6 and not r["error"]
    return CheckResult("ay-leakage", ok, r["ay"], "|a_y| < 1e-6", r["error"])


# --- Fokker-Planck ---------------------------------------------------------------------


def _fp_mass_run():
    prob = circle_problem(1.0, 256)
    P0 = prob.initial(2.0)
    dt = 0.9 * stability_bound(prob.grid, prob.D)
    steps = 100_000
    final = fp_evolve(P0, prob.v, prob.D, steps * dt, dt, method="explicit")
    return final


def check_fp_mass(cfg):
    final = _fp_mass_run()
    err = abs(final.mass - 1.0)
    return CheckResult("fp-mass", err < 1e-10, err, "|sum P h - 1| < 1e-10 after 1e5 steps")


def check_fp_positivity(cfg):
    final = _fp_mass_run()
    low = float(final.values.min())
    return CheckResult("fp-positivity", low >= -1e-12, low, "min P >= -1e-12")


def log_delta_histograms(seed: int, n_paths: int = 100_000, times=(0.5, 1.0, 2.0),
                         dt: float = 1e-3, fp_size: int = 4800, span: float = 12.0,
                         bin_width: float = 0.5, kappa: float = 1.0):
    """Histograms of ``ln(delta)`` from Monte Carlo and from the log-chart
    Fokker-Planck solution, started at ``delta = pi``.

    Bins run down from ``ln(pi)`` in steps of `bin_width` over `span`; the
    last bin collects everything below.  Returns ``{t: (mc, fp)}``.
    """
    top = math.log(math.pi)
    nbins = int(round(span / bin_width))
    edges = top - bin_width * np.arange(nbins + 1)[::-1]

    def hist(y, w=None):
        h = np.histogram(np.clip(y, edges[0], edges[-1]), bins=edges, weights=w)[0]
        return h / h.sum()

    params = ControlParams(kappa)
    every = int(round(min(times) / dt))
    marks = {int(round(t / dt)) // every: t for t in times}

    def observe(x):
        with np.errstate(divide="ignore"):
            return np.log(np.abs(x[:, 0]))

    _, rec, _ = run_ensemble(noiseless_model(params), 1, np.array([math.pi]), max(times), dt,
                             seed, n_paths, every, observe=observe)
    prob = log_chart_problem(kappa, fp_size)
    snaps = {}
    step_of = {int(round(t / dt)): t for t in times}

    def grab(t, p):
        k = int(round(t / dt))
        if k in step_of:
            snaps[step_of[k]] = p.copy()

    fp_evolve(prob.initial(prob.grid.upper), prob.v, prob.D, max(times), dt, "implicit",
              prob.lower, prob.upper, callback=grab)
    y = prob.grid.nodes
    out = {}
    for j, t in marks.items():
        out[t] = (hist(rec[:, j]), hist(y, snaps[t]))
    return out


def check_fp_mc_tv(cfg):
    hists = log_delta_histograms(cfg.seed)
    tvs = {t: 0.5 * float(np.abs(mc - fp).sum()) for t, (mc, fp) in hists.items()}
    worst = max(tvs.values())
    detail = ", ".join(f"t={t:g}: {v:.4f}" for t, v in sorted(tvs.items()))
    return CheckResult("fp-mc-tv", worst < 0.02, worst, "TV distance < 0.02", detail)


# --- reduced models against the SME -----------------------------------------------------------


def paired_discrepancy(dts=(1e-3, 1e-4, 1e-5), n_paths: int = 16, horizon: float = 1.0,
                       seed: int = 0, a0: float = 0.99, delta0: float = math.pi / 2,
                       noise: Optional[NoiseParams] = None):
    """Per-path maximum of ``| |delta_A| - |delta_B| |`` between the reduced
    Bloch model and the SME, driven by the same increments, for each dt.

    Returns an array of shape ``(len(dts), n_paths)``.
    """
    params = ControlParams()
    noise = noise or NoiseParams()
    red = bloch_model(params, noise)
    sme = BlochControlledQubit(ProtocolKind.DIFFUSION_GRADIENT, params, noise)

    def step(x, dW, dt):
        return np.concatenate([red.step(x[:, :2], dW, dt), sme.step(x[:, 2:], dW, dt)], axis=1)

    s, c = math.sin(delta0), math.cos(delta0)
    init = a0 * np.array([s, c, s, 0.0, c])

    def observe(x):
        da = np.arctan2(np.abs(x[:, 0]), x[:, 1])
        db = np.arctan2(np.hypot(x[:, 2], x[:, 3]), x[:, 4])
        return np.abs(da - db)

    out = []
    for dt in dts:
        _, rec, _ = run_ensemble(step, 2, init, horizon, dt, seed, n_paths, 1, observe=observe)
        out.append(rec.max(axis=1))
    return np.array(out)


def refinement_slope(dts, errors) -> float:
    """Slope of log(median per-path max error) against log(dt)."""
    med = np.median(errors, axis=1)
    return float(np.polyfit(np.log(dts), np.log(med), 1)[0])


def check_shared_noise(cfg):
    dts = (1e-3, 1e-4, 1e-5)
    errs = paired_discrepancy(dts, seed=cfg.seed)
    slope = refinement_slope(dts, errs)
    med = np.median(errs, axis=1)
    ok = 0.4 <= slope <= 1.1
    return CheckResult("shared-noise", ok, slope, "slope in [0.4, 1.1]",
                       "median max error " + ", ".join(f"{d:g}: {m:.3g}" for d, m in zip(dts, med)))


def purification_run(k: float = 1.0, delta_mix: float = 1e-2, dt_k: float = 1e-5,
                     horizon_k: float = 0.2, n_paths: int = 64, seed: int = 0,
                     record_every: int = 200):
    """Mixedness under a perpendicular measurement of fixed strength `k`.

    Full density-matrix SME (no Hamiltonian, no noise), initial Bloch length
    ``1 - delta_mix`` at 90 degrees from the target.  Returns times, the
    ensemble-mean mixedness and the law ``delta_mix exp(-8 k t)``.
    """
    params = ControlParams(kappa=1.0, mu=0.0, alpha_max=0.0, k_max=max(k, math.pi**2),
                           k_perp=k)
    a0 = 1 - delta_mix
    stepper = ControlledQubit(ProtocolKind.HAMILTONIAN_PERPENDICULAR, params)
    rho0 = initial_density([a0, 0.0, 0.0])
    times, rec, _ = run_ensemble(stepper.step, 1, rho0, horizon_k / k, dt_k / k, seed, n_paths,
                                 record_every,
                                 observe=lambda r: 1 - np.linalg.norm(bloch_vectors(r), axis=1))
    mean = rec.mean(axis=0)
    return times, mean, delta_mix * np.exp(-8 * k * times)


def check_purification(cfg):
    t, mean, law = purification_run(seed=cfg.seed)
    rel = float(np.max(np.abs(mean / law - 1)))
    return CheckResult("purification", rel < 0.01, rel, "relative error < 1%",
                       f"over t in [0, {t[-1]:.3g}]")


def check_reduced_equality(cfg):
    params = ControlParams()
    delta = np.linspace(-math.pi, math.pi, 1000)
    x1 = delta[:, None]
    x2 = np.stack([delta, np.ones_like(delta)], axis=1)
    a = noiseless_model(params)
    b = noisy_model(params, NoiseParams())
    err = max(float(np.max(np.abs(a.drift(x1)[:, 0] - b.drift(x2)[:, 0]))),
              float(np.max(np.abs(a.diffusion(x1)[:, 0, 0] - b.diffusion(x2)[:, 0, 0]))),
              float(np.max(np.abs(b.drift(x2)[:, 1]))),
              float(np.max(np.abs(b.diffusion(x2)[:, 1, :]))),
              float(np.max(np.abs(b.diffusion(x2)[:, 0, 1]))))
    return CheckResult("reduced-equality", err < 1e-12, err, "max difference < 1e-12")


CHECKS: Dict[str, Callable[[RunConfig], CheckResult]] = {
    "wiener-moments": check_wiener_moments,
    "sme-trace": check_sme_trace,
    "sme-hermiticity": check_sme_hermiticity,
    "sme-positivity": check_sme_positivity,
    "sme-purity": check_sme_purity,
    "ay-leakage": check_ay_leakage,
    "fp-mass": check_fp_mass,
    "fp-positivity": check_fp_positivity,
    "fp-mc-tv": check_fp_mc_tv,
    "shared-noise": check_shared_noise,
    "purification": check_purification,
    "reduced-equality": check_reduced_equality,
}


def run_checks(cfg: RunConfig, only: Optional[List[str]] = None) -> List[CheckResult]:
    names = list(CHECKS) if not only else only
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check(s): {', '.join(unknown)}; choose from {', '.join(CHECKS)}")
    _SME_CACHE.clear()
    results = []
    for name in names:
        start = time.perf_counter()
        try:
            res = CHECKS[name](cfg)
        except Exception as exc:
            res = CheckResult(name, False, math.nan, "", f"raised {type(exc).__name__}: {exc}")
        results.append(CheckResult(res.name, res.passed, res.value, res.bound, res.detail,
                                   time.perf_counter() - start))
    return results


def format_report(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  {'value':>12}  bound / details"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        detail = f"{r.bound}" + (f"  [{r.detail}]" if r.detail else "")
        lines.append(f"{r.name:<{width}}  {status:<6}  {r.value:>12.4g}  {detail}")
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"

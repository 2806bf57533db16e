"""End-to-end acceptance checks on simulated data.

Every criterion records a one-line summary that is printed in the pytest
terminal summary (see ``conftest.py``). Seeds are fixed; operating points are
chosen so that each tolerance is at least 3 standard errors wide.
"""

import math
import time
import warnings

import numpy as np
import pytest

from photocorr.correlator import g2_histogram, g2_zero, g3_zero_direct
from photocorr.deadtime import DeadTimeFilter, apply_dead_time
from photocorr.extract import (
    LinearRegimeWarning,
    ScanAccumulator,
    fit_flux_derivatives,
    fit_scan,
    measure_flux_scan,
    default_tau_grid,
    plan_snr,
    run_scan,
    second_derivative_check,
    synthesize_scan,
)
from photocorr.qmt import (
    PhotonDistribution,
    QmtParams,
    g3_from_moments,
    relation_check,
    skewness_expansion,
    steady_state,
)
from photocorr.sources import (
    CoxSource,
    MicromaserSource,
    PoissonSource,
    beamsplit,
    generate_cox,
    generate_poisson,
    iter_micromaser,
    multisplit,
)

pytestmark = pytest.mark.filterwarnings("ignore::photocorr.extract.LinearRegimeWarning")

TAU0 = 28e-9
SEED = 1


@pytest.fixture
def report(record_property):
    def rec(ok, detail, runtime, limit):
        ok = bool(ok) and runtime <= limit
        record_property("acceptance", f"{'PASS' if ok else 'FAIL'}  {detail}  [{runtime:.1f} s <= {limit:g} s]")
        return ok

    return rec


def _split_scan(stream, tau_max, t_b, seed):
    a, b = beamsplit(stream, 0.5, seed)
    a, b = apply_dead_time(a, TAU0), apply_dead_time(b, TAU0)
    return run_scan(a, b, TAU0, default_tau_grid(TAU0, tau_max), t_b)


def _micromaser_scan(n_atoms, fluxes, tau_max, t_b, span_s, seed):
    """Micromaser light split onto two 28 ns detectors with the given observed fluxes."""
    free = [f / (1 - f * TAU0) for f in fluxes]
    base = MicromaserSource(atom_rate_cps=n_atoms / 1e-7)
    dist = steady_state(base.qmt_params())
    eta = sum(free) / (base.kappa_rad_s * dist.mean)
    src = MicromaserSource(atom_rate_cps=n_atoms / 1e-7, detection_efficiency=eta)
    p = free[0] / sum(free)
    acc = ScanAccumulator(default_tau_grid(TAU0, tau_max), t_b, 1, int(round(span_s * 1e12)))
    rng = np.random.default_rng(seed + 1000)
    fa, fb = DeadTimeFilter(TAU0, 1), DeadTimeFilter(TAU0, 1)
    for k, chunk in enumerate(iter_micromaser(src, span_s, seed, chunk_s=1.0, warmup_s=1e-3), start=1):
        a, b = beamsplit(chunk, p, rng)
        acc.add(fa(a.ticks), fb(b.ticks), int(round(min(k, span_s) * 1e12)))
    return dist, acc.result()


def test_c1_poisson_null(report):
    t0 = time.perf_counter()
    s = generate_poisson(PoissonSource(1e6), 10.0, SEED)
    r = fit_scan(_split_scan(s, 128e-9, 4e-6, SEED + 1))
    z = r.slope / r.slope_error
    ok = abs(r.g2_zero - 1) <= 0.01 and abs(r.g3_zero - 1) <= 0.05 and abs(z) <= 3
    detail = (
        f"C1 Poisson null: {len(s)} events, g2={r.g2_zero:.4f}, g3={r.g3_zero:.3f}+-{r.g3_error:.3f}, "
        f"slope={r.slope:.3f}+-{r.slope_error:.3f}"
    )
    assert report(ok, detail, time.perf_counter() - t0, 60)


def test_c2_pseudo_thermal_oracle(report):
    t0 = time.perf_counter()
    rate = 3e5
    s = generate_cox(CoxSource(rate, dwell_time_s=1e-5), 1e7 / rate, SEED)
    direct = g3_zero_direct(*multisplit(s, [1, 1, 1], SEED + 1), 3e-7)
    r = fit_scan(_split_scan(s, 128e-9, 3e-7, SEED + 2))
    z = (r.g3_zero - direct.value) / math.hypot(direct.std_error, r.g3_error)
    ok = abs(direct.value / 6 - 1) <= 0.05 and abs(z) <= 3 and r.slope < 0 and abs(r.slope / -2 - 1) <= 0.15
    detail = (
        f"C2 Cox oracle: {len(s)} events, direct g3={direct.value:.3f}+-{direct.std_error:.3f}, "
        f"indirect g3={r.g3_zero:.3f}+-{r.g3_error:.3f} (z={z:.2f}), slope={r.slope:.3f}"
    )
    assert report(ok, detail, time.perf_counter() - t0, 300)


def test_c3_micromaser_sub_poissonian(report):
    t0 = time.perf_counter()
    dist, scan = _micromaser_scan(30, (2.6e6, 3.3e6), 128e-9, 1.5e-6, 60.0, SEED)
    r = fit_scan(scan)
    ok = dist.q_mandel < 0 and not dist.multimodal and abs(r.ratio - 3) <= 0.3
    detail = (
        f"C3 sub-Poissonian: <n>={dist.mean:.0f} Q={dist.q_mandel:.2f}, "
        f"fluxes {scan.flux_st_obs[0] / 1e6:.2f}/{scan.flux_sp_obs[0] / 1e6:.2f} Mcps, "
        f"ratio={r.ratio:.3f}+-{r.ratio_error:.3f} (model {(1 - dist.g3_zero) / (1 - dist.g2_zero):.3f})"
    )
    assert report(ok, detail, time.perf_counter() - t0, 900)


def test_c4_micromaser_super_poissonian(report):
    t0 = time.perf_counter()
    dist, scan = _micromaser_scan(10, (0.87e6, 1.38e6), 200e-9, 2e-6, 40.0, SEED)
    r = fit_scan(scan)
    ok = dist.q_mandel > 0 and not dist.multimodal and abs(r.ratio - 3) <= 0.3
    detail = (
        f"C4 super-Poissonian: <n>={dist.mean:.0f} Q={dist.q_mandel:.2f}, "
        f"fluxes {scan.flux_st_obs[0] / 1e6:.2f}/{scan.flux_sp_obs[0] / 1e6:.2f} Mcps, "
        f"ratio={r.ratio:.3f}+-{r.ratio_error:.3f} (model {(1 - dist.g3_zero) / (1 - dist.g2_zero):.3f})"
    )
    assert report(ok, detail, time.perf_counter() - t0, 900)


def test_c5_qmt_relation(report):
    t0 = time.perf_counter()
    parts, ok = [], True
    for n_atoms in (10, 30, 100, 300):
        d = steady_state(QmtParams.from_mean_atom_number(n_atoms))
        chk = relation_check(d)
        gamma = abs(d.skewness) / d.gamma_poisson
        ok &= not d.multimodal and abs(chk.ratio - 3) <= 0.10 and gamma <= 2
        parts.append(f"Na={n_atoms}: <n>={d.mean:.0f} ratio={chk.ratio:.3f} |g|/g_poi={gamma:.2f}")
    assert report(ok, "C5 QMT relation: " + "; ".join(parts), time.perf_counter() - t0, 1)


def test_c6_algebraic_identity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(1000):
        p = rng.dirichlet(np.full(rng.integers(2, 60), rng.uniform(0.1, 5)))
        d = PhotonDistribution(p / p.sum())
        worst = max(worst, abs(g3_from_moments(d) - skewness_expansion(d)))
    detail = f"C6 g3 identity: max |moments - expansion| = {worst:.2e} over 1000 distributions"
    assert report(worst <= 1e-12, detail, time.perf_counter() - t0, 1)


def test_c7_flux_derivative(report):
    t0 = time.perf_counter()
    grid = np.linspace(2e-9, 100e-9, 50)
    parts, ok = [], True
    sources = (("Poisson", generate_poisson(PoissonSource(1e6), 10.0, SEED)),
               ("Cox", generate_cox(CoxSource(1e6, dwell_time_s=1e-5), 10.0, SEED)))
    for k, (name, s) in enumerate(sources):
        d = fit_flux_derivatives(measure_flux_scan(s, grid), order=4)
        g2 = g2_zero(*beamsplit(s, 0.5, SEED + 10 + k), 1e-7).value
        q = d.first / (-d.free_flux_cps**2 * g2)
        ok &= abs(q - 1) <= 0.05
        parts.append(f"{name} dphi'/dtau / (-phi^2 g2) = {q:.4f}+-{d.first_error / (d.free_flux_cps**2 * g2):.4f}")
    assert report(ok, "C7 flux derivative: " + "; ".join(parts), time.perf_counter() - t0, 120)


def test_c8_second_derivative(report):
    t0 = time.perf_counter()
    s = generate_cox(CoxSource(1e6, dwell_time_s=1e-5), 20.0, SEED)
    h = g2_histogram(*beamsplit(s, 0.5, SEED + 10), 1e-6, 2e-5)
    chk = second_derivative_check(measure_flux_scan(s, np.linspace(2e-9, 100e-9, 50)), h, 6.0, order=4)
    q = chk.lhs / chk.rhs
    detail = f"C8 second derivative: lhs/rhs = {q:.3f}+-{chk.lhs_error / chk.rhs:.3f}"
    assert report(abs(q - 1) <= 0.15, detail, time.perf_counter() - t0, 300)


def test_c9_exact_inversion(report):
    t0 = time.perf_counter()
    worst = 0.0
    for g2 in np.linspace(0.9, 2.0, 5):
        for g3 in np.linspace(0.7, 6.0, 5):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LinearRegimeWarning)
                scan = synthesize_scan(g2, g3, 2.6e6, 3.3e6, default_tau_grid())
            r = fit_scan(scan)
            worst = max(worst, abs(r.g2_zero - g2), abs(r.g3_zero - g3))
    detail = f"C9 exact inversion: max error {worst:.2e} over 25 (g2, g3) points"
    assert report(worst <= 1e-10, detail, time.perf_counter() - t0, 1)


def test_c10_snr_formula(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    mismatches = 0
    for _ in range(100):
        T0, tw, tb = 10 ** rng.uniform(-2, 4), 10 ** rng.uniform(-8, -4), 10 ** rng.uniform(-10, -6)
        N = int(rng.integers(1, 6))
        mismatches += plan_snr(T0, tw, tb, N).snr != math.sqrt((T0 / tw) * (tb / tw) ** (N - 1))
    detail = f"C10 SNR formula: {100 - mismatches}/100 exact matches"
    assert report(mismatches == 0, detail, time.perf_counter() - t0, 1)

"""Indirect measurement of ``g3(0,0)`` from the dead-time dependence of ``g2``.

Lengthening the dead time of both detectors of an HBT pair, to first order in
``phi tau``, shifts the observed zero-delay correlation by::

    g2'(0) - g2(0) = (g2(0)^2 - g3(0,0)) (phi_st tau_st + phi_sp tau_sp)

so a polynomial fit of ``g2'(0)`` against ``x = (phi_st + phi_sp) tau`` gives
``g2(0)`` as the intercept ``c0`` and ``g3(0,0) = c0^2 - c1`` from the linear
coefficient. Prolonged dead times are emulated by deleting events from the
physically recorded streams.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .correlator import (
    CorrelationEstimate,
    CorrelationHistogram,
    bin_ticks,
    g2_slope_at_zero,
    g2_zero,
    g2_zero_from_counts,
    pair_counts,
)
from .deadtime import BeyondLinearRegimeError, DeadTimeFilter, apply_dead_time, dead_time_ticks, flux_correct
from .timetag import TimeTagStream

__all__ = [
    "WARN_PHI_TAU",
    "MAX_PHI_TAU",
    "DeadTimeScan",
    "DerivativeCheck",
    "ExtractionResult",
    "FitInstabilityWarning",
    "FluxDerivative",
    "FluxScan",
    "GeneralizedResult",
    "LinearRegimeWarning",
    "ScanAccumulator",
    "SnrPlan",
    "extract_generalized",
    "fit_flux_derivatives",
    "fit_scan",
    "fit_series",
    "measure_flux_scan",
    "default_tau_grid",
    "plan_snr",
    "polyfit_weighted",
    "run_scan",
    "second_derivative_check",
    "synthesize_scan",
    "write_result_json",
    "write_scan_csv",
]

WARN_PHI_TAU = 0.1
MAX_PHI_TAU = 0.5


class LinearRegimeWarning(UserWarning):
    """``phi tau`` is large enough that second-order dead-time terms matter."""


class FitInstabilityWarning(UserWarning):
    """High polynomial orders give coefficient errors larger than the coefficients."""


def default_tau_grid(physical_tau_s: float = 28e-9, max_tau_s: float = 128e-9, n: int = 14) -> np.ndarray:
    """Evenly spaced dead-time grid starting at the physical dead time."""
    return np.linspace(physical_tau_s, max_tau_s, n)


def _guard(phi_tau: float, stacklevel: int = 3) -> None:
    if phi_tau >= MAX_PHI_TAU:
        raise BeyondLinearRegimeError(
            f"beyond linear regime: max phi*tau = {phi_tau:.3g} >= {MAX_PHI_TAU}"
        )
    if phi_tau > WARN_PHI_TAU:
        warnings.warn(
            f"max phi*tau = {phi_tau:.3g} exceeds {WARN_PHI_TAU}; second-order terms may bias the scan",
            LinearRegimeWarning,
            stacklevel=stacklevel,
        )


# ------------------------------------------------------------------ the scan


@dataclass(frozen=True, eq=False)
class DeadTimeScan:
    """Observed ``g2'(0)`` and fluxes over a grid of (emulated) dead times.

    Attributes:
        tau_grid_s: Strictly increasing dead times; the first is the physical one.
        g2_obs: One zero-delay estimate per dead time.
        flux_st_obs, flux_sp_obs: Observed fluxes of the start and stop detectors.
        flux_st_free, flux_sp_free: Fluxes corrected with ``flux_correct``
            assuming ``g2 = 1`` (the fit refines this).
        span_s: Observation time.
        counts_st, counts_sp: Event counts per dead time, used for flux errors.
    """

    tau_grid_s: np.ndarray
    g2_obs: tuple[CorrelationEstimate, ...]
    flux_st_obs: np.ndarray
    flux_sp_obs: np.ndarray
    flux_st_free: np.ndarray = field(default=None)
    flux_sp_free: np.ndarray = field(default=None)
    span_s: float = 1.0
    counts_st: np.ndarray | None = None
    counts_sp: np.ndarray | None = None

    def __post_init__(self):
        tau = np.asarray(self.tau_grid_s, dtype=np.float64)
        if tau.ndim != 1 or tau.size < 1:
            raise ValueError("tau grid must be a non-empty vector")
        if np.any(np.diff(tau) <= 0):
            raise ValueError("tau grid must be strictly increasing")
        if len(self.g2_obs) != tau.size:
            raise ValueError("one g2 estimate per grid point is required")
        st = np.asarray(self.flux_st_obs, dtype=np.float64)
        sp = np.asarray(self.flux_sp_obs, dtype=np.float64)
        object.__setattr__(self, "tau_grid_s", tau)
        object.__setattr__(self, "g2_obs", tuple(self.g2_obs))
        object.__setattr__(self, "flux_st_obs", st)
        object.__setattr__(self, "flux_sp_obs", sp)
        if self.flux_st_free is None:
            object.__setattr__(self, "flux_st_free", np.array([flux_correct(f, t) for f, t in zip(st, tau)]))
        if self.flux_sp_free is None:
            object.__setattr__(self, "flux_sp_free", np.array([flux_correct(f, t) for f, t in zip(sp, tau)]))
        phi = max(self.flux_st_free[0], self.flux_sp_free[0])
        # warn at the caller of run_scan / synthesize_scan / result()
        _guard(phi * tau[-1], stacklevel=5)

    @property
    def g2_values(self) -> np.ndarray:
        return np.array([e.value for e in self.g2_obs])

    @property
    def g2_errors(self) -> np.ndarray:
        return np.array([e.std_error for e in self.g2_obs])

    @property
    def bin_time_s(self) -> float:
        return self.g2_obs[0].bin_time_s

    def covariance(self, n: int | None = None) -> np.ndarray:
        """Counting covariance of the ``g2'`` values of nested scan points.

        A longer dead time keeps (nearly) a subset of the coincidences of a
        shorter one, so the counts share their Poisson noise:
        ``cov(C_j, C_k) = min(C_j, C_k)``. Normalized, this is
        ``e_j e_k sqrt(min(C_j, C_k) / max(C_j, C_k))``. Points without
        recorded counts (synthetic scans) are taken as independent.
        """
        n = self.tau_grid_s.size if n is None else n
        e = self.g2_errors[:n]
        c = np.array([g.n_pairs_or_triples for g in self.g2_obs[:n]], dtype=np.float64)
        if np.any(c <= 0):
            return np.diag(e * e)
        rho = np.sqrt(np.minimum.outer(c, c) / np.maximum.outer(c, c))
        return rho * np.outer(e, e)


def run_scan(
    start: TimeTagStream,
    stop: TimeTagStream,
    physical_tau_s: float,
    tau_grid_s: Sequence[float],
    bin_time_s: float,
    threads: int = 1,
) -> DeadTimeScan:
    """Emulate prolonged dead times by event deletion and measure ``g2'(0)``.

    Both streams are assumed to be recorded with dead time ``physical_tau_s``
    already; each grid dead time is applied to them directly.
    """
    taus = np.asarray(tau_grid_s, dtype=np.float64)
    if not math.isclose(taus[0], physical_tau_s, rel_tol=1e-9, abs_tol=1e-15):
        raise ValueError("tau grid must start at the physical dead time")
    g2s, n_st, n_sp = [], [], []
    for tau in taus:
        a = apply_dead_time(start, float(tau))
        b = apply_dead_time(stop, float(tau))
        g2s.append(g2_zero(a, b, bin_time_s, threads=threads))
        n_st.append(len(a))
        n_sp.append(len(b))
    T = start.span_s
    n_st = np.array(n_st)
    n_sp = np.array(n_sp)
    return DeadTimeScan(
        tau_grid_s=taus,
        g2_obs=tuple(g2s),
        flux_st_obs=n_st / T,
        flux_sp_obs=n_sp / T,
        span_s=T,
        counts_st=n_st,
        counts_sp=n_sp,
    )


class ScanAccumulator:
    """Chunked equivalent of :func:`run_scan` for streams too long for memory.

    Feed consecutive chunks of the two physically filtered streams with
    :meth:`add`; ``boundary_tick`` promises that every later event has a tick
    ``>= boundary_tick``. The final scan is identical to :func:`run_scan` on the
    concatenated streams.
    """

    def __init__(self, tau_grid_s, bin_time_s: float, resolution_ps: int, span_ticks: int, threads: int = 1):
        self.taus = np.asarray(tau_grid_s, dtype=np.float64)
        self.w = bin_ticks(bin_time_s, resolution_ps)
        self.reach = self.w // 2
        self.resolution_ps = resolution_ps
        self.span_ticks = span_ticks
        self.threads = threads
        m = self.taus.size
        self._filters = [
            (DeadTimeFilter(t, resolution_ps), DeadTimeFilter(t, resolution_ps)) for t in self.taus
        ]
        self._tails = [(np.empty(0, np.int64), np.empty(0, np.int64)) for _ in range(m)]
        self.half = np.zeros(m, np.int64)
        self.n_st = np.zeros(m, np.int64)
        self.n_sp = np.zeros(m, np.int64)

    def _count(self, a, b) -> int:
        if a.size == 0 or b.size == 0:
            return 0
        return int(pair_counts(a, b, self.w, 0, self.threads)[0])

    def add(self, start_ticks: np.ndarray, stop_ticks: np.ndarray, boundary_tick: int) -> None:
        start_ticks = np.asarray(start_ticks).view(np.int64) if np.asarray(start_ticks).dtype == np.uint64 else np.asarray(start_ticks, np.int64)
        stop_ticks = np.asarray(stop_ticks).view(np.int64) if np.asarray(stop_ticks).dtype == np.uint64 else np.asarray(stop_ticks, np.int64)
        cut = boundary_tick - self.reach - 1
        for i, (fa, fb) in enumerate(self._filters):
            a_new = fa(start_ticks)
            b_new = fb(stop_ticks)
            self.n_st[i] += a_new.size
            self.n_sp[i] += b_new.size
            a_tail, b_tail = self._tails[i]
            a_all = np.concatenate((a_tail, a_new))
            b_all = np.concatenate((b_tail, b_new))
            self.half[i] += self._count(a_all, b_all) - self._count(a_tail, b_tail)
            self._tails[i] = (
                a_all[np.searchsorted(a_all, cut):],
                b_all[np.searchsorted(b_all, cut):],
            )

    def result(self) -> DeadTimeScan:
        tick_s = self.resolution_ps * 1e-12
        T = self.span_ticks * self.resolution_ps * 1e-12
        t_b = self.w * tick_s
        if np.any(self.n_st == 0) or np.any(self.n_sp == 0):
            raise ValueError("empty stream")
        g2s = tuple(
            g2_zero_from_counts(int(h), int(a), int(b), T, t_b)
            for h, a, b in zip(self.half, self.n_st, self.n_sp)
        )
        return DeadTimeScan(
            tau_grid_s=self.taus,
            g2_obs=g2s,
            flux_st_obs=self.n_st / T,
            flux_sp_obs=self.n_sp / T,
            span_s=T,
            counts_st=self.n_st.copy(),
            counts_sp=self.n_sp.copy(),
        )


def synthesize_scan(
    g2: float,
    g3: float,
    flux_st_free: float,
    flux_sp_free: float,
    tau_grid_s: Sequence[float],
    bin_time_s: float = 1e-9,
    error: float = 1e-3,
    seed=None,
) -> DeadTimeScan:
    """Scan that follows the first-order dead-time law exactly.

    Observed fluxes are the exact inverse of ``flux_correct`` with ``g2``.
    With ``seed`` set, Gaussian noise of standard deviation ``error`` is
    added to every ``g2'`` value.
    """
    taus = np.asarray(tau_grid_s, dtype=np.float64)
    x = (flux_st_free + flux_sp_free) * taus
    y = g2 + (g2 * g2 - g3) * x
    if seed is not None:
        y = y + np.random.default_rng(seed).normal(0.0, error, y.size)
    est = tuple(CorrelationEstimate(float(v), error, bin_time_s, 0) for v in y)
    obs_st = flux_st_free / (1 + flux_st_free * taus * g2)
    obs_sp = flux_sp_free / (1 + flux_sp_free * taus * g2)
    return DeadTimeScan(tau_grid_s=taus, g2_obs=est, flux_st_obs=obs_st, flux_sp_obs=obs_sp)


# ------------------------------------------------------------------- fitting


@dataclass(frozen=True)
class PolyFit:
    coef: np.ndarray  # ascending powers
    cov: np.ndarray
    chi2: float
    dof: int

    @property
    def chi2_reduced(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else math.nan


def polyfit_weighted(x, y, err, order: int, powers: Sequence[int] | None = None) -> PolyFit:
    """Least-chi^2 polynomial fit with absolute errors.

    ``err`` is either a vector of standard errors or a full covariance
    matrix of ``y`` (generalized least squares). ``powers`` selects the
    monomials (default ``0..order``). The parameter covariance is
    ``(X^T C^-1 X)^-1`` without rescaling by chi^2.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    err = np.asarray(err, dtype=np.float64)
    pw = list(range(order + 1)) if powers is None else list(powers)
    if x.size < len(pw):
        raise ValueError(f"need at least {len(pw)} points for {len(pw)} parameters, got {x.size}")
    if err.ndim == 1:
        if np.any(err <= 0):
            raise ValueError("errors must be positive")
        whiten = lambda v: v / (err[:, None] if v.ndim == 2 else err)  # noqa: E731
    else:
        try:
            L = np.linalg.cholesky(err)
        except np.linalg.LinAlgError:
            raise ValueError("covariance matrix is not positive definite") from None
        whiten = lambda v: _solve_lower(L, v)  # noqa: E731
    # scale the abscissa so the normal equations stay well conditioned
    s = float(np.max(np.abs(x))) or 1.0
    X = whiten(np.column_stack([(x / s) ** p for p in pw]))
    if np.linalg.matrix_rank(X) < len(pw):
        raise np.linalg.LinAlgError("singular normal equations")
    Q, R = np.linalg.qr(X)
    coef_s = solve_triangular(R, Q.T @ whiten(y))
    R_inv = solve_triangular(R, np.eye(len(pw)))
    cov_s = R_inv @ R_inv.T
    scale = np.array([s**-p for p in pw])
    coef = coef_s * scale
    cov = cov_s * np.outer(scale, scale)
    resid = whiten(y - sum(c * x**p for c, p in zip(coef, pw)))
    return PolyFit(coef=coef, cov=cov, chi2=float(resid @ resid), dof=x.size - len(pw))


def _solve_lower(L: np.ndarray, v: np.ndarray) -> np.ndarray:
    return solve_triangular(L, v, lower=True)


@dataclass(frozen=True)
class ExtractionResult:
    """Outcome of the scan fit.

    ``ratio_defined`` is False when ``g2`` is within three standard errors
    of 1, where ``(1 - g3)/(1 - g2)`` carries no information.
    """

    g2_zero: float
    g2_error: float
    g3_zero: float
    g3_error: float
    ratio: float
    ratio_error: float
    ratio_defined: bool
    fit_order: int
    n_points_used: int
    chi2_reduced: float
    coefficients: tuple[float, ...]
    covariance: tuple[tuple[float, ...], ...]
    x: tuple[float, ...]
    y: tuple[float, ...]
    y_error: tuple[float, ...]

    @property
    def slope(self) -> float:
        return self.coefficients[1]

    @property
    def slope_error(self) -> float:
        return math.sqrt(self.covariance[1][1])

    def to_dict(self) -> dict:
        return {
            "g2": self.g2_zero,
            "g2_err": self.g2_error,
            "g3": self.g3_zero,
            "g3_err": self.g3_error,
            "ratio": self.ratio if self.ratio_defined else None,
            "ratio_err": self.ratio_error if self.ratio_defined else None,
            "ratio_defined": self.ratio_defined,
            "ratio_raw": self.ratio,
            "chi2": self.chi2_reduced,
            "n_points": self.n_points_used,
            "fit_order": self.fit_order,
            "coefficients": list(self.coefficients),
        }


def _free_fluxes(scan: DeadTimeScan, g2: float) -> tuple[float, float]:
    tau0 = scan.tau_grid_s[0]
    return (
        flux_correct(scan.flux_st_obs[0], tau0, g2),
        flux_correct(scan.flux_sp_obs[0], tau0, g2),
    )


def _invert(c: np.ndarray, cov: np.ndarray):
    c0, c1 = c[0], c[1]
    v00, v11, v01 = cov[0, 0], cov[1, 1], cov[0, 1]
    g3 = c0 * c0 - c1
    g3_var = (2 * c0) ** 2 * v00 + v11 - 2 * (2 * c0) * v01
    if c0 == 1.0:
        return g3, math.sqrt(max(g3_var, 0.0)), math.nan, math.nan
    ratio = (1 - g3) / (1 - c0)
    d0 = (-2 * c0 * (1 - c0) + (1 - g3)) / (1 - c0) ** 2
    d1 = 1 / (1 - c0)
    r_var = d0 * d0 * v00 + d1 * d1 * v11 + 2 * d0 * d1 * v01
    return g3, math.sqrt(max(g3_var, 0.0)), ratio, math.sqrt(max(r_var, 0.0))


def fit_scan(
    scan: DeadTimeScan,
    fit_order: int = 2,
    n_points: int | None = None,
    correlated: bool = True,
    max_iter: int = 50,
) -> ExtractionResult:
    """Fit ``g2'(0)`` against ``x = (phi_st + phi_sp) tau`` and invert.

    The dead-time-free fluxes come from the physical-dead-time point through
    ``flux_correct`` with the fit's own intercept as ``g2``; the fit is
    repeated until the intercept stops changing (the first pass uses
    ``g2 = 1``). With ``correlated`` the fit uses the nested-count
    covariance of :meth:`DeadTimeScan.covariance`; otherwise the points are
    treated as independent. The flux uncertainty, common to all points, is
    propagated through the fitted slope in both cases.
    """
    n = scan.tau_grid_s.size if n_points is None else int(n_points)
    if fit_order < 1:
        raise ValueError("fit_order must be >= 1")
    if n > scan.tau_grid_s.size:
        raise ValueError(f"n_points={n} exceeds the grid size {scan.tau_grid_s.size}")
    if n < fit_order + 2:
        raise ValueError(f"n_points={n} is fewer than fit_order + 2 = {fit_order + 2}")
    if fit_order >= 3:
        warnings.warn(
            f"fit order {fit_order}: coefficient errors may exceed the coefficients",
            FitInstabilityWarning,
            stacklevel=2,
        )
    tau = scan.tau_grid_s[:n]
    y = scan.g2_values[:n]
    err = scan.g2_errors[:n]
    base = scan.covariance(n) if correlated else np.diag(err**2)
    if scan.counts_st is not None and scan.counts_sp is not None:
        rel_flux = 1.0 / math.sqrt(scan.counts_st[0] + scan.counts_sp[0])
    else:
        rel_flux = 0.0
    g2 = 1.0
    fit = None
    for _ in range(max_iter):
        phi_st, phi_sp = _free_fluxes(scan, g2)
        x = (phi_st + phi_sp) * tau
        cov = base
        if fit is not None and rel_flux > 0:
            sx = fit.coef[1] * x * rel_flux
            cov = base + np.outer(sx, sx)
        fit = polyfit_weighted(x, y, cov, fit_order)
        new = float(fit.coef[0])
        done = abs(new - g2) <= 1e-15 * max(1.0, abs(new))
        g2 = new
        if done:
            break
    g3, g3_err, ratio, ratio_err = _invert(fit.coef, fit.cov)
    g2_err = math.sqrt(fit.cov[0, 0])
    return ExtractionResult(
        g2_zero=g2,
        g2_error=g2_err,
        g3_zero=float(g3),
        g3_error=float(g3_err),
        ratio=float(ratio),
        ratio_error=float(ratio_err),
        ratio_defined=bool(abs(1 - g2) > 3 * g2_err),
        fit_order=fit_order,
        n_points_used=n,
        chi2_reduced=fit.chi2_reduced,
        coefficients=tuple(float(c) for c in fit.coef),
        covariance=tuple(tuple(float(v) for v in row) for row in fit.cov),
        x=tuple(float(v) for v in x),
        y=tuple(float(v) for v in y),
        y_error=tuple(float(v) for v in np.sqrt(np.diag(cov))),
    )


def fit_series(scan: DeadTimeScan, fit_order: int = 2, n_min: int | None = None) -> list[ExtractionResult]:
    """Fits over growing prefixes of the grid, ``n_min`` points up to all of them."""
    lo = fit_order + 2 if n_min is None else n_min
    return [fit_scan(scan, fit_order, n) for n in range(lo, scan.tau_grid_s.size + 1)]


@dataclass(frozen=True)
class GeneralizedResult:
    value: float
    std_error: float
    slope: float
    slope_error: float


def extract_generalized(
    x,
    gN_obs,
    gN_err,
    g2_zero_value: float,
    gN_zero: float | None = None,
    fit_order: int = 2,
    g2_zero_error: float = 0.0,
) -> GeneralizedResult:
    """``g(N+1)(0) = g2(0) gN(0) - c1`` from a scan of the observed ``gN'(0)``.

    Args:
        x: ``sum_i phi_i tau_i`` over the detectors, per scan point.
        gN_obs, gN_err: Observed ``gN'(0)`` and its errors.
        g2_zero_value: ``g2(0)`` of the light.
        gN_zero: ``gN(0)``; the fit intercept when omitted.
        fit_order: Polynomial order of the fit in ``x``.
        g2_zero_error: Uncertainty of ``g2_zero_value``, propagated if given.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < fit_order + 2:
        raise ValueError(f"need at least fit_order + 2 = {fit_order + 2} points")
    _guard(float(np.max(x)) / 2)
    fit = polyfit_weighted(x, gN_obs, gN_err, fit_order)
    c0, c1 = fit.coef[0], fit.coef[1]
    v00, v11, v01 = fit.cov[0, 0], fit.cov[1, 1], fit.cov[0, 1]
    if gN_zero is None:
        value = g2_zero_value * c0 - c1
        var = g2_zero_value**2 * v00 + v11 - 2 * g2_zero_value * v01 + (c0 * g2_zero_error) ** 2
    else:
        value = g2_zero_value * gN_zero - c1
        var = v11 + (gN_zero * g2_zero_error) ** 2
    return GeneralizedResult(float(value), math.sqrt(max(var, 0.0)), float(c1), math.sqrt(v11))


# -------------------------------------------------------- flux derivatives


@dataclass(frozen=True)
class FluxScan:
    """Single-detector event counts after each dead time (``tau = 0`` first)."""

    tau_s: np.ndarray
    counts: np.ndarray
    span_s: float

    @property
    def flux_cps(self) -> np.ndarray:
        return self.counts / self.span_s

    @property
    def free_flux_cps(self) -> float:
        return float(self.counts[0]) / self.span_s


def measure_flux_scan(stream: TimeTagStream, tau_grid_s) -> FluxScan:
    """Count the events a detector of each dead time in the grid would keep.

    ``tau = 0`` is prepended when missing so the dead-time-free flux is known.
    """
    taus = np.asarray(tau_grid_s, dtype=np.float64)
    if np.any(np.diff(taus) <= 0) or np.any(taus < 0):
        raise ValueError("tau grid must be non-negative and strictly increasing")
    if taus.size == 0 or taus[0] > 0:
        taus = np.concatenate(([0.0], taus))
    counts = np.array([len(apply_dead_time(stream, float(t))) for t in taus], dtype=np.int64)
    ticks = np.array([dead_time_ticks(float(t), stream.resolution_ps) for t in taus])
    realized = ticks * stream.tick_s
    return FluxScan(tau_s=realized, counts=counts, span_s=stream.span_s)


@dataclass(frozen=True)
class FluxDerivative:
    """Derivatives of the observed flux ``phi'(tau)`` at ``tau = 0``."""

    free_flux_cps: float
    first: float
    first_error: float
    second: float
    second_error: float


def fit_flux_derivatives(scan: FluxScan, order: int = 3) -> FluxDerivative:
    """Fit the deleted-event rate ``(N(0) - N(tau))/T`` with a polynomial without constant term.

    ``phi'(tau) = phi - a1 tau - a2 tau^2 - ...`` so ``d phi'/d tau = -a1``
    and ``d^2 phi'/d tau^2 = -2 a2`` at zero. The events deleted by a short
    dead time are (almost) a subset of those deleted by a longer one, so the
    counts are treated as nested Poisson counts: ``cov_jk = min(D_j, D_k)``.
    """
    if order < 2:
        raise ValueError("order must be >= 2")
    tau = scan.tau_s[1:]
    deleted = (scan.counts[0] - scan.counts[1:]).astype(np.float64)
    if tau.size < order + 1:
        raise ValueError(f"grid too coarse: need at least {order + 1} non-zero dead times")
    T = scan.span_s
    phi = scan.free_flux_cps
    if phi == 0:
        return FluxDerivative(0.0, 0.0, 0.0, 0.0, 0.0)
    var = np.maximum(deleted, 1.0)
    cov = np.minimum.outer(var, var) / (T * T)
    fit = polyfit_weighted(tau, deleted / T, cov, order, powers=range(1, order + 1))
    return FluxDerivative(
        free_flux_cps=phi,
        first=-float(fit.coef[0]),
        first_error=math.sqrt(fit.cov[0, 0]),
        second=-2.0 * float(fit.coef[1]),
        second_error=2.0 * math.sqrt(fit.cov[1, 1]),
    )


@dataclass(frozen=True)
class DerivativeCheck:
    lhs: float
    lhs_error: float
    rhs: float
    rhs_error: float


def second_derivative_check(
    scan: FluxScan,
    g2_hist: CorrelationHistogram | None,
    g3_zero: float,
    g3_error: float = 0.0,
    order: int = 3,
    max_phi_tau: float = 0.25,
) -> DerivativeCheck:
    """Compare the measured curvature of ``phi'(tau)`` with its prediction.

    ``lhs = d^2 phi'/d tau^2`` at zero from :func:`fit_flux_derivatives`;
    ``rhs = 2 phi^3 g3(0,0) - phi^2 dg2/dt|0+`` with the one-sided slope
    of ``g2(t)`` just above zero delay. A missing histogram means a flat
    ``g2``. Raises ``ValueError`` when the grid reaches ``phi tau > max_phi_tau``
    (the Taylor expansion is then unreliable).
    """
    phi = scan.free_flux_cps
    if phi * scan.tau_s[-1] > max_phi_tau:
        raise ValueError(
            f"grid too coarse for a stable second difference: phi*tau_max = {phi * scan.tau_s[-1]:.3g}"
        )
    d = fit_flux_derivatives(scan, order)
    if phi == 0:
        return DerivativeCheck(0.0, 0.0, 0.0, 0.0)
    slope, slope_err = (0.0, 0.0) if g2_hist is None else g2_slope_at_zero(g2_hist)
    rhs = 2 * phi**3 * g3_zero - phi**2 * slope
    rhs_err = math.hypot(2 * phi**3 * g3_error, phi**2 * slope_err)
    return DerivativeCheck(d.second, d.second_error, rhs, rhs_err)


# ---------------------------------------------------------------- planning


@dataclass(frozen=True)
class SnrPlan:
    """Signal-to-noise ratio of an N-th order correlation measurement.

    ``time_multiplier`` is ``tau_w / t_b``, the factor by which the
    measurement time must grow to keep the SNR when going from order
    ``N - 1`` to ``N``.
    """

    snr: float
    time_multiplier: float


def plan_snr(T0_s: float, waiting_time_s: float, bin_time_s: float, order_N: int) -> SnrPlan:
    """``sqrt((T0/tau_w) (t_b/tau_w)^(N-1))`` for measurement time ``T0``."""
    if not (T0_s > 0 and waiting_time_s > 0 and bin_time_s > 0) or order_N < 1:
        raise ValueError("T0, waiting time and bin time must be positive, N >= 1")
    snr = math.sqrt((T0_s / waiting_time_s) * (bin_time_s / waiting_time_s) ** (order_N - 1))
    return SnrPlan(snr=snr, time_multiplier=waiting_time_s / bin_time_s)


# ----------------------------------------------------------------------- I/O


def write_scan_csv(scan: DeadTimeScan, path, header_lines: Sequence[str] = ()) -> None:
    """Columns ``tau_s, g2_obs, err, flux_st, flux_sp`` (observed fluxes)."""
    with open(path, "w", newline="\n") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("tau_s,g2_obs,err,flux_st,flux_sp\n")
        for t, e, a, b in zip(scan.tau_grid_s, scan.g2_obs, scan.flux_st_obs, scan.flux_sp_obs):
            fh.write(f"{t:.12e},{e.value:.12e},{e.std_error:.12e},{a:.12e},{b:.12e}\n")


def write_result_json(result: ExtractionResult, path, extra: dict | None = None) -> None:
    doc = result.to_dict()
    if extra:
        doc.update(extra)
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")

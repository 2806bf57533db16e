"""Steady-state photon statistics of the micromaser / cavity-QED microlaser.

The cavity field is modelled as a birth-death chain: an atom crossing the
cavity in state ``n`` adds a photon with probability ``sin^2(g t_int sqrt(n+1))``
(atoms arrive at rate ``r``), and photons leak out at rate ``kappa n``. With no
thermal photons the stationary distribution follows from detailed balance::

    p(n) ∝ prod_{k=1..n} r sin^2(g t_int sqrt(k)) / (kappa k)

The product is accumulated in log space because ``<n>`` reaches several
hundred for realistic pumping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats as _stats

__all__ = [
    "DEFAULT_COUPLING_RAD_S",
    "DEFAULT_KAPPA_RAD_S",
    "DEFAULT_T_INT_S",
    "PhotonDistribution",
    "QmtParams",
    "RelationCheck",
    "RelationUndefinedError",
    "TruncationError",
    "g3_from_moments",
    "is_multimodal",
    "number_state",
    "poisson_distribution",
    "relation_check",
    "skewness",
    "skewness_expansion",
    "steady_state",
    "truncation_bound",
]

DEFAULT_COUPLING_RAD_S = 2 * math.pi * 190e3
DEFAULT_T_INT_S = 0.1e-6
DEFAULT_KAPPA_RAD_S = 2 * math.pi * 138e3

TAIL_MASS = 1e-12
_LOG_CUT = -60.0  # weights below exp(-60) of the peak are dropped


class TruncationError(ValueError):
    """The photon-number cutoff leaves too much probability in the tail."""


class RelationUndefinedError(ValueError):
    """``(1 - g3)/(1 - g2)`` is undefined or meaningless (Q too close to 0)."""


@dataclass(frozen=True)
class QmtParams:
    coupling_g_rad_s: float = DEFAULT_COUPLING_RAD_S
    t_int_s: float = DEFAULT_T_INT_S
    kappa_rad_s: float = DEFAULT_KAPPA_RAD_S
    atom_rate_cps: float = 1e8
    n_max: int | None = None

    def __post_init__(self):
        for name in ("t_int_s", "kappa_rad_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.coupling_g_rad_s >= 0:
            raise ValueError("coupling_g_rad_s must be >= 0")
        if not self.atom_rate_cps >= 0:
            raise ValueError("atom_rate_cps must be >= 0")
        if self.n_max is not None and self.n_max < 0:
            raise ValueError("n_max must be >= 0")

    @classmethod
    def from_mean_atom_number(cls, n_atoms: float, **kwargs) -> "QmtParams":
        """Pumping given as the mean number of atoms inside the cavity, ``r t_int``."""
        t_int = kwargs.get("t_int_s", DEFAULT_T_INT_S)
        return cls(atom_rate_cps=n_atoms / t_int, **kwargs)

    @property
    def mean_atom_number(self) -> float:
        return self.atom_rate_cps * self.t_int_s

    def gain_rates(self, n_max: int) -> np.ndarray:
        """Photon birth rate out of state ``n`` for ``n = 0..n_max``."""
        theta = self.coupling_g_rad_s * self.t_int_s
        n = np.arange(n_max + 1, dtype=np.float64)
        return self.atom_rate_cps * np.sin(theta * np.sqrt(n + 1.0)) ** 2


def _log_weights(params: QmtParams, n_max: int) -> np.ndarray:
    k = np.arange(1, n_max + 1, dtype=np.float64)
    theta = params.coupling_g_rad_s * params.t_int_s
    ratio = params.atom_rate_cps * np.sin(theta * np.sqrt(k)) ** 2 / (params.kappa_rad_s * k)
    with np.errstate(divide="ignore"):
        steps = np.log(ratio)
    return np.concatenate(([0.0], np.cumsum(steps)))


def _auto_log_weights(params: QmtParams) -> np.ndarray:
    # past n = 2 r / kappa every step ratio is below 1/2, so the tail is geometric
    cap = int(2 * params.atom_rate_cps / params.kappa_rad_s) + 128
    while True:
        lw = _log_weights(params, cap)
        peak = lw.max()
        if lw[-1] < peak + _LOG_CUT:
            break
        cap *= 2
    keep = np.nonzero(lw >= peak + _LOG_CUT)[0][-1]
    return lw[: keep + 1]


def truncation_bound(params: QmtParams) -> int:
    """Smallest cutoff whose neglected tail is below ``exp(-60)`` of the peak."""
    return _auto_log_weights(params).size - 1


def is_multimodal(p: np.ndarray, threshold: float = 1e-6) -> bool:
    """True when ``p`` has more than one local maximum above ``threshold``."""
    p = np.asarray(p, dtype=np.float64)
    if p.size < 2:
        return False
    left = np.concatenate(([-np.inf], p[:-1]))
    right = np.concatenate((p[1:], [-np.inf]))
    peaks = (p > left) & (p >= right) & (p > threshold)
    return int(peaks.sum()) > 1


@dataclass(frozen=True, eq=False)
class PhotonDistribution:
    """Normalized photon-number distribution with derived statistics.

    Derived quantities that need ``<n> > 0`` (or a non-zero variance) are NaN
    when undefined.
    """

    p: np.ndarray
    mean: float = field(init=False)
    second: float = field(init=False)
    third: float = field(init=False)
    variance: float = field(init=False)
    third_central: float = field(init=False)
    q_mandel: float = field(init=False)
    skewness: float = field(init=False)
    g2_zero: float = field(init=False)
    g3_zero: float = field(init=False)
    multimodal: bool = field(init=False)

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("p must be a non-empty vector")
        if np.any(p < 0):
            raise ValueError("probabilities must be non-negative")
        total = p.sum()
        if not abs(total - 1.0) <= 1e-10:
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        p.setflags(write=False)
        n = np.arange(p.size, dtype=np.float64)
        m1 = float(p @ n)
        m2 = float(p @ n**2)
        m3 = float(p @ n**3)
        d = n - m1
        var = float(p @ d**2)
        mu3 = float(p @ d**3)
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("p", p)
        set_("mean", m1)
        set_("second", m2)
        set_("third", m3)
        set_("variance", var)
        set_("third_central", mu3)
        with np.errstate(divide="ignore", invalid="ignore"):
            set_("q_mandel", var / m1 - 1.0 if m1 > 0 else math.nan)
            # tiny moments underflow to 0 under powers; treat them as zero
            set_("skewness", mu3 / var**1.5 if var**1.5 > 0 else math.nan)
            set_("g2_zero", (m2 - m1) / m1**2 if m1**2 > 0 else math.nan)
            set_("g3_zero", (m3 - 3 * m2 + 2 * m1) / m1**3 if m1**3 > 0 else math.nan)
        set_("multimodal", is_multimodal(p))

    @property
    def n(self) -> np.ndarray:
        return np.arange(self.p.size)

    @property
    def gamma_poisson(self) -> float:
        """Skewness of a Poisson distribution with the same mean, ``<n>^-1/2``."""
        return self.mean**-0.5 if self.mean > 0 else math.nan


def steady_state(params: QmtParams) -> PhotonDistribution:
    """Detailed-balance steady state of the micromaser birth-death model.

    With ``params.n_max`` unset the cutoff is chosen automatically; an explicit
    cutoff that leaves more than ``1e-12`` of the mass in the tail raises
    :class:`TruncationError`.
    """
    lw = _auto_log_weights(params)
    if params.n_max is not None:
        full = np.exp(lw - lw.max())
        full /= full.sum()
        tail = float(full[params.n_max + 1 :].sum())
        if tail > TAIL_MASS:
            raise TruncationError(
                f"truncation insufficient: tail mass {tail:.3g} beyond n_max={params.n_max}"
            )
        lw = _log_weights(params, params.n_max) if params.n_max >= lw.size else lw[: params.n_max + 1]
    p = np.exp(lw - lw.max())
    p /= p.sum()
    return PhotonDistribution(p)


def poisson_distribution(mean: float, n_max: int | None = None) -> PhotonDistribution:
    """Poisson photon statistics truncated far out in the tail and renormalized."""
    if n_max is None:
        n_max = int(mean + 40 * math.sqrt(mean + 1) + 40)
    p = _stats.poisson.pmf(np.arange(n_max + 1), mean)
    return PhotonDistribution(p / p.sum())


def number_state(n: int) -> PhotonDistribution:
    p = np.zeros(n + 1)
    p[n] = 1.0
    return PhotonDistribution(p)


def g3_from_moments(dist: PhotonDistribution) -> float:
    """``(<n^3> - 3<n^2> + 2<n>) / <n>^3``, the third-order factorial moment ratio."""
    if not dist.mean**3 > 0:
        raise ValueError("g3 undefined for <n> = 0")
    m1, m2, m3 = dist.mean, dist.second, dist.third
    return (m3 - 3 * m2 + 2 * m1) / m1**3


def skewness(dist: PhotonDistribution) -> float:
    """Standardized third central moment of the photon number."""
    if not dist.variance**1.5 > 0:
        raise ValueError("skewness undefined for zero variance")
    return dist.third_central / dist.variance**1.5


def skewness_expansion(dist: PhotonDistribution) -> float:
    """``g3`` rebuilt from Mandel Q and skewness.

    ``1 + 3Q/<n> - (3Q+1)/<n>^2 + (Q+1)^(3/2) gamma / <n>^(3/2)``; equal to
    :func:`g3_from_moments` up to rounding. At zero variance the last term is
    taken at its limit ``mu3 / <n>^3 = 0``.
    """
    if not dist.mean**3 > 0:
        raise ValueError("g3 undefined for <n> = 0")
    n = dist.mean
    q = dist.variance / n - 1.0
    skew_term = (q + 1) ** 1.5 * skewness(dist) / n**1.5 if dist.variance**1.5 > 0 else 0.0
    return 1 + 3 * q / n - (3 * q + 1) / n**2 + skew_term


class RelationCheck(NamedTuple):
    ratio: float
    residual: float


def relation_check(dist: PhotonDistribution, min_abs_q: float = 0.05) -> RelationCheck:
    """Compare ``g3`` with its large-``<n>`` approximations.

    Returns ``ratio = (1 - g3)/(1 - g2)``, which should be close to 3, and
    ``residual = |g2^3 - g3|``. Raises :class:`RelationUndefinedError` when
    ``|Q| < min_abs_q`` because the ratio is then dominated by the neglected
    terms (and undefined at ``g2 = 1``).
    """
    g2 = dist.g2_zero
    g3 = g3_from_moments(dist)
    if g2 == 1.0 or not abs(dist.q_mandel) >= min_abs_q:
        raise RelationUndefinedError(
            f"(1-g3)/(1-g2) undefined: Mandel Q = {dist.q_mandel:.3g} is too close to 0"
        )
    return RelationCheck(ratio=(1 - g3) / (1 - g2), residual=abs(g2**3 - g3))

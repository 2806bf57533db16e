"""Seeded generators of photon time-tag streams with known statistics.

Three kinds of light are provided: Poisson (coherent), Cox (doubly
stochastic, with a piecewise-constant random intensity) and the emission of
a micromaser whose photon number follows a birth-death chain. Beam splitters
route events independently, so normalized correlations are preserved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numba import int64, njit, uint64

from .qmt import DEFAULT_COUPLING_RAD_S, DEFAULT_T_INT_S, QmtParams, steady_state, truncation_bound
from .timetag import TimeTagStream

__all__ = [
    "CoxSource",
    "MicromaserGenerator",
    "MicromaserSource",
    "PoissonSource",
    "TruncationBoundError",
    "beamsplit",
    "generate_cox",
    "generate_micromaser",
    "generate_poisson",
    "iter_micromaser",
    "multisplit",
]


class TruncationBoundError(RuntimeError):
    """The simulated photon number reached the truncation bound."""


def _to_ticks(times_s: np.ndarray, span_s: float, resolution_ps: int, channel: int) -> TimeTagStream:
    return TimeTagStream.from_seconds(times_s, span_s, resolution_ps=resolution_ps, channel=channel)


def _check_span(span_s: float) -> None:
    if not span_s > 0:
        raise ValueError("span_s must be positive")


# --------------------------------------------------------------------- Poisson


@dataclass(frozen=True)
class PoissonSource:
    rate_cps: float

    def __post_init__(self):
        if not self.rate_cps > 0:
            raise ValueError("rate_cps must be positive")


def generate_poisson(
    src: PoissonSource, span_s: float, seed, resolution_ps: int = 1, channel: int = 0
) -> TimeTagStream:
    """Homogeneous Poisson arrivals: ``Poisson(rate * span)`` sorted uniform times."""
    _check_span(span_s)
    rng = np.random.default_rng(seed)
    count = rng.poisson(src.rate_cps * span_s)
    times = np.sort(rng.random(count)) * span_s
    return _to_ticks(times, span_s, resolution_ps, channel)


# ------------------------------------------------------------------------- Cox

_LAWS = ("constant", "exponential", "two_state")


@dataclass(frozen=True)
class CoxSource:
    """Poisson process driven by a piecewise-constant random intensity.

    Attributes:
        mean_rate_cps: Stationary mean intensity.
        intensity_law: ``constant``, ``exponential`` (pseudo-thermal: the
            level is redrawn from an exponential distribution) or
            ``two_state`` (telegraph switching between ``levels``).
        dwell_time_s: Mean time between redraws. For ``two_state`` it sets
            both switching rates when ``switching_rates_hz`` is omitted.
        levels_cps: The two intensities of ``two_state``. Defaults to
            ``(0, 2 * mean_rate_cps)``.
        switching_rates_hz: Rates for leaving level 0 and level 1.
    """

    mean_rate_cps: float
    intensity_law: str = "exponential"
    dwell_time_s: float = 1e-5
    levels_cps: tuple[float, float] | None = None
    switching_rates_hz: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.mean_rate_cps > 0:
            raise ValueError("mean_rate_cps must be positive")
        if self.intensity_law not in _LAWS:
            raise ValueError(f"invalid intensity law {self.intensity_law!r}; expected one of {_LAWS}")
        if not self.dwell_time_s > 0:
            raise ValueError("dwell_time_s must be positive")
        if self.intensity_law == "two_state":
            lv = self.levels
            if len(lv) != 2 or min(lv) < 0:
                raise ValueError("two_state levels must be two non-negative rates")
            k = self.rates
            if len(k) != 2 or min(k) <= 0:
                raise ValueError("switching rates must be two positive numbers")
            mean = (lv[0] * k[1] + lv[1] * k[0]) / (k[0] + k[1])
            if abs(mean - self.mean_rate_cps) > 1e-9 * self.mean_rate_cps:
                raise ValueError(
                    f"two_state levels give mean {mean:.6g} cps, not mean_rate_cps={self.mean_rate_cps:.6g}"
                )

    @property
    def levels(self) -> tuple[float, float]:
        if self.levels_cps is not None:
            return tuple(float(x) for x in self.levels_cps)
        return (0.0, 2.0 * self.mean_rate_cps)

    @property
    def rates(self) -> tuple[float, float]:
        if self.switching_rates_hz is not None:
            return tuple(float(x) for x in self.switching_rates_hz)
        return (1.0 / self.dwell_time_s, 1.0 / self.dwell_time_s)

    def moment_ratio(self, k: int) -> float:
        """``<lambda^k> / <lambda>^k`` of the stationary intensity law."""
        if self.intensity_law == "constant":
            return 1.0
        if self.intensity_law == "exponential":
            return float(math.factorial(k))
        (l0, l1), (k0, k1) = self.levels, self.rates
        p0, p1 = k1 / (k0 + k1), k0 / (k0 + k1)
        return (p0 * l0**k + p1 * l1**k) / self.mean_rate_cps**k


def _segments(src: CoxSource, span_s: float, rng: np.random.Generator):
    """Segment start times, lengths and intensities covering ``[0, span)``."""
    law = src.intensity_law
    if law == "two_state":
        k0, k1 = src.rates
        state0 = int(rng.random() >= k1 / (k0 + k1))
        mean_dwell = 0.5 * (1 / k0 + 1 / k1)
    else:
        mean_dwell = src.dwell_time_s
    parts = []
    total = 0.0
    count = 0
    batch = int(span_s / mean_dwell * 1.05) + 16
    while total < span_s:
        if law == "two_state":
            state = (state0 + count + np.arange(batch)) % 2
            d = rng.exponential(1.0, batch) / np.where(state == 0, k0, k1)
        else:
            d = rng.exponential(src.dwell_time_s, batch)
        parts.append(d)
        total += d.sum()
        count += batch
        batch = max(16, batch // 4)
    lengths = np.concatenate(parts)
    ends = np.cumsum(lengths)
    n_seg = int(np.searchsorted(ends, span_s)) + 1
    lengths = lengths[:n_seg]
    starts = np.concatenate(([0.0], ends[: n_seg - 1]))
    lengths[-1] = span_s - starts[-1]
    if law == "exponential":
        lam = rng.exponential(src.mean_rate_cps, n_seg)
    else:
        state = (state0 + np.arange(n_seg)) % 2
        lam = np.asarray(src.levels)[state]
    return starts, lengths, lam


def generate_cox(
    src: CoxSource, span_s: float, seed, resolution_ps: int = 1, channel: int = 0
) -> TimeTagStream:
    """Doubly stochastic Poisson stream.

    The intensity is held constant over segments of exponentially distributed
    length (Markov switching), so ``g2(t) = 1 + (g2(0) - 1) exp(-|t|/dwell)``
    for the exponential law, and zero-delay moments are exactly the moments
    of the intensity law.
    """
    _check_span(span_s)
    if src.intensity_law == "constant":
        return generate_poisson(PoissonSource(src.mean_rate_cps), span_s, seed, resolution_ps, channel)
    rng = np.random.default_rng(seed)
    starts, lengths, lam = _segments(src, span_s, rng)
    counts = rng.poisson(lam * lengths)
    times = np.repeat(starts, counts) + rng.random(int(counts.sum())) * np.repeat(lengths, counts)
    times.sort()
    return _to_ticks(times, span_s, resolution_ps, channel)


# ------------------------------------------------------------------ micromaser


@dataclass(frozen=True)
class MicromaserSource:
    """Micromaser pumped by a Poissonian atomic beam.

    Attributes:
        coupling_g_rad_s: Atom-field coupling ``g`` (angular).
        t_int_s: Atom transit (interaction) time.
        cavity_linewidth_hz: Cavity linewidth; the photon decay rate is
            ``kappa = 2 pi cavity_linewidth_hz``.
        atom_rate_cps: Atom arrival rate ``r``.
        detection_efficiency: Probability that a photon leaving the cavity is
            detected.
        n_initial: Photon number at ``t = 0``. ``None`` draws it from the
            steady-state distribution so the stream is stationary from the
            start.
        n_max: Explicit truncation bound; by default a bound far beyond the
            steady-state support is used.
    """

    coupling_g_rad_s: float = DEFAULT_COUPLING_RAD_S
    t_int_s: float = DEFAULT_T_INT_S
    cavity_linewidth_hz: float = 138e3
    atom_rate_cps: float = 3e8
    detection_efficiency: float = 1.0
    n_initial: int | None = None
    n_max: int | None = None

    def __post_init__(self):
        if not self.coupling_g_rad_s >= 0:
            raise ValueError("coupling_g_rad_s must be >= 0")
        if not self.t_int_s > 0 or not self.cavity_linewidth_hz > 0:
            raise ValueError("t_int_s and cavity_linewidth_hz must be positive")
        if not self.atom_rate_cps >= 0:
            raise ValueError("atom_rate_cps must be >= 0")
        if not 0 < self.detection_efficiency <= 1:
            raise ValueError("detection_efficiency must be in (0, 1]")
        if self.n_initial is not None and self.n_initial < 0:
            raise ValueError("n_initial must be >= 0")
        if self.n_max is not None and self.n_max < 1:
            raise ValueError("n_max must be >= 1")

    @property
    def kappa_rad_s(self) -> float:
        return 2 * math.pi * self.cavity_linewidth_hz

    def qmt_params(self) -> QmtParams:
        return QmtParams(
            coupling_g_rad_s=self.coupling_g_rad_s,
            t_int_s=self.t_int_s,
            kappa_rad_s=self.kappa_rad_s,
            atom_rate_cps=self.atom_rate_cps,
        )

    def resolved_n_max(self) -> int:
        if self.n_max is not None:
            return self.n_max
        return max(truncation_bound(self.qmt_params()), self.n_initial or 0) + 64


@njit(inline="always")
def _rotl(x, k):
    return (x << uint64(k)) | (x >> uint64(64 - k))


@njit(inline="always")
def _next(s0, s1, s2, s3):
    """xoshiro256** step."""
    res = _rotl(s1 * uint64(5), 7) * uint64(9)
    t = s1 << uint64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    return res, s0, s1, s2, s3


_U53 = 2.0**-53


@njit(cache=True, nogil=True)
def _gamma(k, s0, s1, s2, s3):
    """Gamma(k, 1) for integer ``k >= 1`` (Marsaglia-Tsang), continuing the xoshiro state."""
    if k == 1:
        x, s0, s1, s2, s3 = _next(s0, s1, s2, s3)
        return -math.log((float(x >> uint64(11)) + 1.0) * _U53), s0, s1, s2, s3
    d = k - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x1, s0, s1, s2, s3 = _next(s0, s1, s2, s3)
        x2, s0, s1, s2, s3 = _next(s0, s1, s2, s3)
        u1 = (float(x1 >> uint64(11)) + 1.0) * _U53
        u2 = float(x2 >> uint64(11)) * _U53
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        v = 1.0 + c * z
        if v <= 0.0:
            continue
        v = v * v * v
        x3, s0, s1, s2, s3 = _next(s0, s1, s2, s3)
        u = (float(x3 >> uint64(11)) + 1.0) * _U53
        if u < 1.0 - 0.0331 * z**4 or math.log(u) < 0.5 * z * z + d * (1.0 - v + math.log(v)):
            return d * v, s0, s1, s2, s3


_RUNNING, _FULL, _ABSORBED, _TRUNCATED = 0, 1, 2, 3
_FLUSH = 1 << 16
_HALF_BAND = 32


@njit(cache=True, nogil=True)
def _block(B, BD, BX, n, lo, hi, s0, s1, s2, s3, limit):
    """Up to ``limit`` candidate steps; stops after a detection or on leaving the band.

    Branch-free state update: a miss-predicted branch per step would double
    the cost of the whole simulation.
    """
    for j in range(1, limit + 1):
        x, s0, s1, s2, s3 = _next(s0, s1, s2, s3)
        u = int64(x >> uint64(11))
        b = B[n]
        up = u < b
        dn = (u >= b) & (u < BD[n])
        det = (u >= b) & (u < BX[n])
        n += int64(up) - int64(dn)
        if det | (uint64(n - lo) > uint64(hi - lo)):
            return n, j, det, s0, s1, s2, s3
    return n, limit, False, s0, s1, s2, s3


@njit(cache=True, nogil=True)
def _block_tracked(B, BD, BX, n, lo, hi, s0, s1, s2, s3, limit, occ, inv):
    """:func:`_block` that also adds the expected dwell ``1/Rb`` per step to ``occ[n]``."""
    for j in range(1, limit + 1):
        occ[n] += inv
        x, s0, s1, s2, s3 = _next(s0, s1, s2, s3)
        u = int64(x >> uint64(11))
        b = B[n]
        up = u < b
        dn = (u >= b) & (u < BD[n])
        det = (u >= b) & (u < BX[n])
        n += int64(up) - int64(dn)
        if det | (uint64(n - lo) > uint64(hi - lo)):
            return n, j, det, s0, s1, s2, s3
    return n, limit, False, s0, s1, s2, s3


@njit(cache=True, nogil=True)
def _micromaser_kernel(birth, death, eta, thr, rng, ist, fst, t_limit, out, occ, track):
    """Banded uniformization of the birth-death chain.

    Candidate steps arrive at the band's maximum total rate ``Rb``; a uniform
    integer picks birth, death (detected or not) or a null step. The elapsed
    time is only materialized at detections, as one Gamma(k, 1/Rb) draw for
    the ``k`` candidate steps since the last update.
    """
    s0, s1, s2, s3 = rng[0], rng[1], rng[2], rng[3]
    n, k, lo, hi, state = ist[0], ist[1], ist[2], ist[3], ist[4]
    t, Rb, pend = fst[0], fst[1], fst[2]
    nmax = birth.size - 1
    m = 0
    if state == _ABSORBED or state == _TRUNCATED:
        return 0, state
    state = _FULL
    if pend >= 0.0:
        if pend >= t_limit:
            return 0, _RUNNING
        out[0] = pend
        m = 1
        pend = -1.0
    inv = 1.0 / Rb if Rb > 0 else 0.0
    B = thr[0]
    BD = thr[1]
    BX = thr[2]
    cap = out.size
    while m < cap:
        if n < lo or n > hi or k >= _FLUSH:
            if k > 0:
                g, s0, s1, s2, s3 = _gamma(k, s0, s1, s2, s3)
                t += g * inv
                k = 0
            if n >= nmax:
                state = _TRUNCATED
                break
            if birth[n] + death[n] == 0.0:
                state = _ABSORBED
                break
            if n < lo or n > hi:
                lo = max(n - _HALF_BAND, 0)
                hi = min(n + _HALF_BAND, nmax)
                Rb = 0.0
                for j in range(lo, hi + 1):
                    Rb = max(Rb, birth[j] + death[j])
                S = 2.0**53 / Rb
                for j in range(lo, hi + 1):
                    B[j] = int64(birth[j] * S)
                    BD[j] = int64((birth[j] + death[j]) * S)
                    BX[j] = int64((birth[j] + eta * death[j]) * S)
                inv = 1.0 / Rb
        if track:
            n, j, det, s0, s1, s2, s3 = _block_tracked(B, BD, BX, n, lo, hi, s0, s1, s2, s3, _FLUSH - k, occ, inv)
        else:
            n, j, det, s0, s1, s2, s3 = _block(B, BD, BX, n, lo, hi, s0, s1, s2, s3, _FLUSH - k)
        k += j
        if det:
            g, s0, s1, s2, s3 = _gamma(k, s0, s1, s2, s3)
            t += g * inv
            k = 0
            if t >= t_limit:
                pend = t
                state = _RUNNING
                break
            out[m] = t
            m += 1
    rng[0], rng[1], rng[2], rng[3] = s0, s1, s2, s3
    ist[0], ist[1], ist[2], ist[3], ist[4] = n, k, lo, hi, state
    fst[0], fst[1], fst[2] = t, Rb, pend
    return m, state


class MicromaserGenerator:
    """Resumable exact simulation of the micromaser emission stream.

    ``advance(t)`` returns the detection times in ``[previous limit, t)``.
    Splitting a run into any sequence of limits yields exactly the same events
    as a single call.
    """

    def __init__(self, src: MicromaserSource, seed, track_occupancy: bool = False, buffer_size: int = 1 << 20):
        self.src = src
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_seq, kernel_seq = ss.spawn(2)
        self.n_max = src.resolved_n_max()
        params = src.qmt_params()
        self._birth = params.gain_rates(self.n_max)
        self._death = src.kappa_rad_s * np.arange(self.n_max + 1, dtype=np.float64)
        if src.n_initial is None:
            p = steady_state(params).p
            n0 = int(np.random.default_rng(init_seq).choice(p.size, p=p))
        else:
            n0 = int(src.n_initial)
        self._thr = np.zeros((3, self.n_max + 1), np.int64)
        self._rng = kernel_seq.generate_state(4, dtype=np.uint64)
        self._ist = np.array([n0, 0, 1, 0, _FULL], np.int64)  # lo > hi forces a band build
        self._fst = np.array([0.0, 0.0, -1.0])
        self._buf = np.empty(buffer_size)
        self.track = track_occupancy
        self.occupancy = np.zeros(self.n_max + 1)
        self.limit = 0.0

    @property
    def photon_number(self) -> int:
        return int(self._ist[0])

    @property
    def absorbed(self) -> bool:
        return int(self._ist[4]) == _ABSORBED

    def reset_occupancy(self) -> None:
        self.occupancy[:] = 0.0

    def advance(self, t_limit_s: float) -> np.ndarray:
        if t_limit_s < self.limit:
            raise ValueError("time limits must be non-decreasing")
        self.limit = t_limit_s
        parts = []
        while True:
            m, state = _micromaser_kernel(
                self._birth, self._death, self.src.detection_efficiency, self._thr,
                self._rng, self._ist, self._fst, t_limit_s, self._buf, self.occupancy, self.track,
            )
            parts.append(self._buf[:m].copy())
            if state == _TRUNCATED:
                raise TruncationBoundError(
                    f"photon number hit the truncation bound n_max={self.n_max}; increase n_max"
                )
            if state != _FULL:
                break
        return np.concatenate(parts)


def iter_micromaser(
    src: MicromaserSource,
    span_s: float,
    seed,
    chunk_s: float = 1.0,
    resolution_ps: int = 1,
    warmup_s: float = 0.0,
    channel: int = 0,
    generator: MicromaserGenerator | None = None,
) -> Iterator[TimeTagStream]:
    """Yield the stream of :func:`generate_micromaser` in consecutive chunks.

    Every chunk carries the full ``span_s``; its ticks are absolute. Pass a
    ``generator`` (e.g. one with occupancy tracking) to inspect the chain.
    """
    _check_span(span_s)
    if not chunk_s > 0:
        raise ValueError("chunk_s must be positive")
    gen = generator or MicromaserGenerator(src, seed)
    if warmup_s > 0:
        gen.advance(warmup_s)
        gen.reset_occupancy()
    scale = 1e12 / resolution_ps
    span_ticks = int(round(span_s * scale))
    edge = 0.0
    while edge < span_s:
        edge = min(edge + chunk_s, span_s)
        times = gen.advance(warmup_s + edge) - warmup_s
        ticks = np.minimum(np.floor(times * scale), span_ticks).astype(np.uint64)
        yield TimeTagStream(ticks, span_ticks, resolution_ps, channel)
        if gen.absorbed:
            break


def generate_micromaser(
    src: MicromaserSource,
    span_s: float,
    seed,
    resolution_ps: int = 1,
    warmup_s: float = 0.0,
    channel: int = 0,
) -> TimeTagStream:
    """Detected cavity-decay events of a simulated micromaser.

    The photon number performs the exact birth-death process with birth rate
    ``r sin^2(g t_int sqrt(n+1))`` and death rate ``kappa n``; each death
    emits a photon that is detected with ``detection_efficiency``. Raises
    :class:`TruncationBoundError` naming ``n_max`` if the chain reaches it.
    """
    chunks = list(iter_micromaser(src, span_s, seed, span_s, resolution_ps, warmup_s, channel))
    ticks = np.concatenate([c.ticks for c in chunks])
    return TimeTagStream(ticks, chunks[0].span_ticks, resolution_ps, channel)


# --------------------------------------------------------------- beam splitters


def beamsplit(stream: TimeTagStream, p: float, seed) -> tuple[TimeTagStream, TimeTagStream]:
    """Route each event to output 1 with probability ``p``, else to output 2.

    Outputs are labelled channels 1 and 2. Routing draw ``i`` is
    ``rng.random() < p`` for event ``i``.
    """
    if not 0 < p < 1:
        raise ValueError("splitting probability must be in (0, 1)")
    rng = np.random.default_rng(seed)
    to_first = rng.random(len(stream)) < p
    return (
        stream.replace_ticks(stream.ticks[to_first], channel=1),
        stream.replace_ticks(stream.ticks[~to_first], channel=2),
    )


def multisplit(stream: TimeTagStream, weights, seed) -> tuple[TimeTagStream, ...]:
    """Route events to ``len(weights)`` outputs (channels 1..k) with the given probabilities."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 2 or np.any(w <= 0):
        raise ValueError("weights must be at least two positive numbers")
    cdf = np.cumsum(w / w.sum())
    rng = np.random.default_rng(seed)
    port = np.minimum(np.searchsorted(cdf, rng.random(len(stream)), side="right"), w.size - 1)
    return tuple(stream.replace_ticks(stream.ticks[port == i], channel=i + 1) for i in range(w.size))

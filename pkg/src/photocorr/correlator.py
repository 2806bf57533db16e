"""Coincidence counting and normalized photon correlations.

All estimators count *all* pairs (or triples) inside the window with a
merge-scan over the sorted streams, so there is no start-stop pileup bias.

Bins are centred on multiples of the bin width ``w`` (in ticks). A tick delay
``m`` stands for the interval ``[m - 1/2, m + 1/2]``; when ``w`` is even the
delays sitting exactly on a bin edge are split half/half between the two
neighbouring bins. Every bin, the zero-delay one included, is therefore
exactly ``w`` ticks wide and symmetric about its centre. Counts are kept in
integer half-units (quarter-units for triples) so partial sums from chunks
add up bit-identically.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from .timetag import TimeTagStream

__all__ = [
    "POISSON_ZERO_UPPER",
    "CorrelationEstimate",
    "CorrelationHistogram",
    "SlopeEstimate",
    "bin_ticks",
    "g2_histogram",
    "g2_slope_at_zero",
    "g2_zero",
    "g3_zero_direct",
    "write_histogram_csv",
]

# one-sided 84.13 % Poisson upper limit for an observed count of zero
POISSON_ZERO_UPPER = -math.log(1 - 0.8413447460685429)


@dataclass(frozen=True)
class CorrelationEstimate:
    value: float
    std_error: float
    bin_time_s: float
    n_pairs_or_triples: int


@dataclass(frozen=True)
class CorrelationHistogram:
    """Cross-correlation histogram normalized to ``g2``.

    Attributes:
        delays: Bin centres in seconds (stop minus start).
        values: Normalized ``g2`` per bin.
        errors: Poisson standard errors per bin.
        bin_time_s: Realized bin width.
        counts: Raw (weighted) coincidence counts per bin.
    """

    delays: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    bin_time_s: float
    counts: np.ndarray


class SlopeEstimate(NamedTuple):
    value: float
    std_error: float


def bin_ticks(bin_time_s: float, resolution_ps: int) -> int:
    """Bin width in whole ticks (nearest integer, at least 1)."""
    if not bin_time_s > 0:
        raise ValueError("bin time must be positive")
    return max(1, int(round(bin_time_s * 1e12 / resolution_ps)))


@njit(cache=True, nogil=True)
def _pair_counts(a, b, w, K):
    """Half-unit pair counts per bin ``-K..K`` for delays ``b - a``."""
    out = np.zeros(2 * K + 1, np.int64)
    reach = ((2 * K + 1) * w) // 2
    two_w = 2 * w
    nb = b.size
    lo = 0
    for i in range(a.size):
        ai = a[i]
        first = ai - reach
        while lo < nb and b[lo] < first:
            lo += 1
        j = lo
        last = ai + reach
        while j < nb and b[j] <= last:
            J = 2 * (b[j] - ai) + w
            q = J // two_w
            if J - q * two_w == 0:
                if q - 1 >= -K:
                    out[q - 1 + K] += 1
                if q <= K:
                    out[q + K] += 1
            else:
                out[q + K] += 2
            j += 1
    return out


@njit(cache=True, nogil=True)
def _zero_bin_counts(a, b, w):
    """Half-unit pair count of the zero-delay bin alone, via four monotone pointers."""
    reach = w // 2
    even = w % 2 == 0
    nb = b.size
    lo_lt = 0  # b < a - reach
    lo_le = 0  # b <= a - reach
    hi_lt = 0  # b < a + reach
    hi_le = 0  # b <= a + reach
    total = 0
    for i in range(a.size):
        left = a[i] - reach
        right = a[i] + reach
        while lo_lt < nb and b[lo_lt] < left:
            lo_lt += 1
        while lo_le < nb and b[lo_le] <= left:
            lo_le += 1
        while hi_lt < nb and b[hi_lt] < right:
            hi_lt += 1
        while hi_le < nb and b[hi_le] <= right:
            hi_le += 1
        if even:
            total += 2 * (hi_lt - lo_le) + (lo_le - lo_lt) + (hi_le - hi_lt)
        else:
            total += 2 * (hi_le - lo_lt)
    return total


@njit(cache=True, nogil=True)
def _window_weight(b, lo, ai, w):
    """Half-unit weighted count of ``b`` events in the zero-delay bin around ``ai``."""
    reach = w // 2
    nb = b.size
    while lo < nb and b[lo] < ai - reach:
        lo += 1
    j = lo
    total = 0
    while j < nb and b[j] <= ai + reach:
        if w % 2 == 0 and (b[j] - ai == reach or ai - b[j] == reach):
            total += 1
        else:
            total += 2
        j += 1
    return total, lo


@njit(cache=True, nogil=True)
def _triple_counts(a, b, c, w):
    """Quarter-unit count of triples with both ``b - a`` and ``c - a`` in the zero bin."""
    total = 0
    lob = 0
    loc = 0
    for i in range(a.size):
        wb, lob = _window_weight(b, lob, a[i], w)
        if wb == 0:
            continue
        wc, loc = _window_weight(c, loc, a[i], w)
        total += wb * wc
    return total


def _check_pair(*streams: TimeTagStream) -> None:
    first = streams[0]
    for s in streams[1:]:
        if s.resolution_ps != first.resolution_ps or s.span_ticks != first.span_ticks:
            raise ValueError("streams must share resolution and span")
    for s in streams:
        if len(s) == 0:
            raise ValueError("empty stream")


def pair_counts(a: np.ndarray, b: np.ndarray, w: int, K: int, threads: int = 1) -> np.ndarray:
    """Half-unit pair counts for int64 tick arrays, optionally multi-threaded.

    The start array is cut into contiguous chunks; each chunk scans the full
    stop array, so the summed integer counts equal the sequential result.
    """
    kernel = _pair_counts if K > 0 else lambda x, y, w_, K_: np.array([_zero_bin_counts(x, y, w_)])
    if threads <= 1 or a.size < 100_000:
        return kernel(a, b, w, K)
    chunks = np.array_split(a, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda part: kernel(part, b, w, K), chunks))
    return np.sum(parts, axis=0)


def g2_histogram(
    start: TimeTagStream,
    stop: TimeTagStream,
    bin_time_s: float,
    max_delay_s: float,
    threads: int = 1,
) -> CorrelationHistogram:
    """Normalized cross-correlation ``g2(t)`` between two streams.

    Bin ``k`` holds ``C_k T / (N_start N_stop t_b)``. Bins are centred on
    ``k t_b`` for ``|k t_b| <= max_delay_s``.
    """
    _check_pair(start, stop)
    w = bin_ticks(bin_time_s, start.resolution_ps)
    t_b = w * start.tick_s
    K = int(math.floor(max_delay_s / t_b + 1e-9))
    half = pair_counts(start.as_int64(), stop.as_int64(), w, K, threads)
    counts = half / 2.0
    norm = start.span_s / (len(start) * len(stop) * t_b)
    errors = np.sqrt(np.where(counts > 0, counts, POISSON_ZERO_UPPER**2)) * norm
    return CorrelationHistogram(
        delays=np.arange(-K, K + 1) * t_b,
        values=counts * norm,
        errors=errors,
        bin_time_s=t_b,
        counts=counts,
    )


def _estimate(count: float, norm: float, t_b: float) -> CorrelationEstimate:
    err = math.sqrt(count) if count > 0 else POISSON_ZERO_UPPER
    return CorrelationEstimate(
        value=count * norm,
        std_error=err * norm,
        bin_time_s=t_b,
        n_pairs_or_triples=int(round(count)),
    )


def g2_zero_from_counts(half_count: int, n_start: int, n_stop: int, span_s: float, t_b: float):
    """Zero-delay estimate from a half-unit coincidence count."""
    return _estimate(half_count / 2.0, span_s / (n_start * n_stop * t_b), t_b)


def g2_zero(start: TimeTagStream, stop: TimeTagStream, bin_time_s: float, threads: int = 1) -> CorrelationEstimate:
    """Zero-delay ``g2`` from the ``|delay| < t_b/2`` bin.

    With no coincidences the value is 0 and the error is the Poisson upper
    limit for a zero count, normalized the same way.
    """
    _check_pair(start, stop)
    w = bin_ticks(bin_time_s, start.resolution_ps)
    t_b = w * start.tick_s
    half = int(pair_counts(start.as_int64(), stop.as_int64(), w, 0, threads)[0])
    return g2_zero_from_counts(half, len(start), len(stop), start.span_s, t_b)


def g3_zero_direct(
    s1: TimeTagStream, s2: TimeTagStream, s3: TimeTagStream, bin_time_s: float
) -> CorrelationEstimate:
    """Brute-force zero-delay ``g3`` from triple coincidences.

    Counts triples whose delays ``s2 - s1`` and ``s3 - s1`` both fall in the
    zero-delay bin (so all three events lie within one bin time of each
    other) and normalizes by ``T^2 / (N1 N2 N3 t_b^2)``.
    """
    _check_pair(s1, s2, s3)
    w = bin_ticks(bin_time_s, s1.resolution_ps)
    t_b = w * s1.tick_s
    quarter = _triple_counts(s1.as_int64(), s2.as_int64(), s3.as_int64(), w)
    T = s1.span_s
    norm = T * T / (len(s1) * len(s2) * len(s3) * t_b * t_b)
    return _estimate(quarter / 4.0, norm, t_b)


def g2_slope_at_zero(hist: CorrelationHistogram, n_bins: int = 4) -> SlopeEstimate:
    """One-sided slope ``dg2/dt`` at ``t = 0+`` from the bins nearest zero.

    The histogram is folded (``+k`` and ``-k`` averaged), and a weighted
    polynomial in ``|t|`` is fitted to the first ``n_bins`` folded bins using
    exact bin averages: the zero bin averages ``[0, t_b/2]``, bin ``k``
    averages ``[k t_b - t_b/2, k t_b + t_b/2]``. A quadratic is used when at
    least four bins are available, otherwise a straight line.
    """
    n_total = hist.values.size
    if n_total < 3 or n_total % 2 == 0:
        raise ValueError("need a symmetric histogram with at least 3 bins")
    K = n_total // 2
    use = min(n_bins, K + 1)
    if use < 2:
        raise ValueError("need at least 2 folded bins")
    w = hist.bin_time_s
    v = np.empty(use)
    e = np.empty(use)
    v[0], e[0] = hist.values[K], hist.errors[K]
    for k in range(1, use):
        v[k] = 0.5 * (hist.values[K + k] + hist.values[K - k])
        e[k] = 0.5 * math.hypot(hist.errors[K + k], hist.errors[K - k])
    k = np.arange(use, dtype=float)
    centre = np.where(k == 0, w / 4, k * w)
    second = np.where(k == 0, w * w / 12, (k * w) ** 2 + w * w / 12)
    cols = [np.ones(use), centre] + ([second] if use >= 4 else [])
    X = np.column_stack(cols) / e[:, None]
    y = v / e
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    cov = np.linalg.inv(X.T @ X)
    return SlopeEstimate(float(coef[1]), float(math.sqrt(cov[1, 1])))


def write_histogram_csv(hist: CorrelationHistogram, path, header_lines: tuple[str, ...] = ()) -> None:
    """Write ``delay_s, g2, err`` columns."""
    with open(path, "w", newline="\n") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("delay_s,g2,err\n")
        for d, g, e in zip(hist.delays, hist.values, hist.errors):
            fh.write(f"{d:.12e},{g:.12e},{e:.12e}\n")

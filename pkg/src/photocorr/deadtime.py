"""Nonparalyzable detector dead time.

The filter is greedy: the first event is accepted, and every later event is
accepted iff it arrives at least ``tau`` after the last *accepted* event.
Blocked events never extend the dead period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .timetag import TimeTagStream

__all__ = [
    "BeyondLinearRegimeError",
    "DeadTimeFilter",
    "DetectorSpec",
    "apply_dead_time",
    "dead_time_ticks",
    "detect",
    "flux_correct",
    "flux_scan",
]

_NO_EVENT = np.iinfo(np.int64).min


class BeyondLinearRegimeError(ArithmeticError):
    """The first-order dead-time model is not applicable."""


@dataclass(frozen=True)
class DetectorSpec:
    dead_time_s: float = 0.0
    efficiency: float = 1.0
    channel: int = 0

    def __post_init__(self):
        if not self.dead_time_s >= 0:
            raise ValueError("dead_time_s must be >= 0")
        if not 0 < self.efficiency <= 1:
            raise ValueError("efficiency must be in (0, 1]")


def dead_time_ticks(tau_s: float, resolution_ps: int) -> int:
    """Dead time in whole ticks, rounded up (never under-enforced).

    Values within 1e-9 of an integer are snapped first so that e.g. 20 ns at
    1 ns resolution is 20 ticks, not 21.
    """
    if tau_s < 0:
        raise ValueError("dead time must be >= 0")
    x = tau_s * 1e12 / resolution_ps
    nearest = round(x)
    if abs(x - nearest) <= 1e-9 * max(1.0, x):
        return int(nearest)
    return int(math.ceil(x))


@njit(cache=True, nogil=True)
def _dead_time_keep(ticks, tau, last):
    """Indices of accepted events; ``last`` is the previous accepted tick."""
    keep = np.empty(ticks.size, np.int64)
    m = 0
    for i in range(ticks.size):
        t = ticks[i]
        if last == _NO_EVENT or t - last >= tau:
            keep[m] = i
            m += 1
            last = t
    return keep[:m], last


class DeadTimeFilter:
    """Streaming dead-time filter that carries its state across chunks.

    Feeding consecutive chunks of one stream gives exactly the events that
    :func:`apply_dead_time` would keep on the concatenated stream.
    """

    def __init__(self, tau_s: float, resolution_ps: int = 1):
        self.tau_s = tau_s
        self.tau_ticks = dead_time_ticks(tau_s, resolution_ps)
        self.last = _NO_EVENT

    def __call__(self, ticks: np.ndarray) -> np.ndarray:
        ticks = np.asarray(ticks).view(np.int64) if ticks.dtype == np.uint64 else np.asarray(ticks, np.int64)
        if self.tau_ticks == 0:
            return ticks
        keep, self.last = _dead_time_keep(ticks, self.tau_ticks, self.last)
        return ticks[keep]


def apply_dead_time(stream: TimeTagStream, tau_s: float) -> TimeTagStream:
    """Return the events a nonparalyzable detector of dead time ``tau_s`` records.

    ``tau_s = 0`` returns the stream unchanged.
    """
    tau = dead_time_ticks(tau_s, stream.resolution_ps)
    if tau == 0 or len(stream) == 0:
        return stream
    keep, _ = _dead_time_keep(stream.as_int64(), tau, _NO_EVENT)
    return stream.replace_ticks(stream.ticks[keep])


def detect(stream: TimeTagStream, spec: DetectorSpec, seed) -> TimeTagStream:
    """Bernoulli(efficiency) thinning followed by the dead-time filter."""
    out = stream
    if spec.efficiency < 1:
        rng = np.random.default_rng(seed)
        out = stream.replace_ticks(stream.ticks[rng.random(len(stream)) < spec.efficiency])
    out = apply_dead_time(out, spec.dead_time_s)
    if out.channel != spec.channel:
        out = out.replace_ticks(out.ticks, channel=spec.channel)
    return out


def flux_correct(observed_flux_cps: float, tau_s: float, g2_zero: float = 1.0) -> float:
    """Dead-time-free flux from an observed flux.

    Solves the first-order balance ``phi = phi' + phi' * phi * tau * g2(0)``,
    i.e. ``phi = phi' / (1 - phi' tau g2)``. With ``g2_zero = 1`` this is the
    usual nonparalyzable correction.
    """
    denom = 1.0 - observed_flux_cps * tau_s * g2_zero
    if denom <= 0:
        raise BeyondLinearRegimeError(
            f"beyond linear regime: observed_flux*tau*g2 = {1 - denom:.3g} >= 1"
        )
    return observed_flux_cps / denom


def flux_scan(stream: TimeTagStream, tau_grid_s) -> tuple[np.ndarray, np.ndarray]:
    """Observed flux after applying each dead time in ``tau_grid_s`` to ``stream``.

    Returns ``(tau_s, flux_cps)``. Each dead time is applied to the input
    stream directly (not chained).
    """
    taus = np.asarray(tau_grid_s, dtype=np.float64)
    flux = np.empty(taus.size)
    span = stream.span_s
    for i, tau in enumerate(taus):
        flux[i] = len(apply_dead_time(stream, float(tau))) / span
    return taus, flux

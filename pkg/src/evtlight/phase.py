"""Event-based phase shifting along camera rows.

A stripe pattern sliding across projector columns makes every pixel blink
with a column-dependent delay. The delay against a reference pixel of the
same row, taken modulo the signal period, is the wrapped phase. Unwrapping
it along the coding axis gives the projector column up to a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from evtlight.burst_filter import group_by_pixel
from evtlight.events import ON, EventStream

TWO_PI = 2.0 * math.pi


class LineRejectedError(ValueError):
    """Too many absent pixels on a line to unwrap it."""


def _on_times_by_pixel(stream: EventStream, row: int) -> dict[int, np.ndarray]:
    sel = (stream.y == row) & (stream.p == ON)
    sub = stream.select(sel)
    out: dict[int, np.ndarray] = {}
    if len(sub) == 0:
        return out
    pixels, groups = group_by_pixel(sub)
    for px, g in zip(pixels.tolist(), groups):
        out[int(px % stream.width)] = sub.t[g]
    return out


def circular_median(values: np.ndarray, period: float) -> float:
    """Median of values on a circle of circumference ``period``, in ``[0, period)``.

    The circle is cut opposite the circular mean and values below the cut
    are lifted by one period, so a cluster straddling 0 is not split.
    Values are never re-centred, which keeps exact inputs exact.
    """
    v = np.mod(np.asarray(values, dtype=float), period)
    ang = TWO_PI * v / period
    mu = math.atan2(float(np.sin(ang).mean()), float(np.cos(ang).mean()))
    cut = (mu / TWO_PI * period + period / 2.0) % period
    unrolled = np.where(v < cut, v + period, v)
    return float(np.mod(np.median(unrolled), period))


def _shift_against(times: np.ndarray, ref: np.ndarray, period: float) -> float:
    """Median over reference periods of the delay to the pixel's next ON event."""
    if len(times) == 0 or len(ref) == 0:
        return float("nan")
    pos = np.searchsorted(times, ref, side="left")
    ok = pos < len(times)
    d = times[pos[ok]] - ref[ok]
    d = d[d < period]
    if len(d) == 0:
        return float("nan")
    return circular_median(d, period)


def measure_time_shift(
    stream: EventStream,
    row: int,
    ref_x: int,
    period_us: float,
    columns: np.ndarray | None = None,
) -> np.ndarray:
    """Per-column delay (µs, in ``[0, P)``) of each pixel's ON bursts after the reference pixel's.

    ``stream`` must be burst-filtered. Returns an array over ``columns``
    (default all sensor columns) with NaN for pixels without events.

    Raises:
        ValueError: the reference pixel has no ON event.
    """
    if columns is None:
        columns = np.arange(stream.width)
    on = _on_times_by_pixel(stream, row)
    ref = on.get(int(ref_x))
    if ref is None or len(ref) == 0:
        raise ValueError(f"reference pixel ({ref_x}, {row}) has no ON events")
    out = np.full(len(columns), np.nan)
    for k, x in enumerate(np.asarray(columns).tolist()):
        t = on.get(int(x))
        if t is not None:
            out[k] = 0.0 if x == ref_x else _shift_against(t, ref, period_us)
    return out


def wrap_phase(dt_us, period_us: float):
    """``2 pi mod(dt, P) / P`` in ``[0, 2 pi)``; NaN stays NaN."""
    if not period_us > 0:
        raise ValueError("period must be positive")
    phi = TWO_PI * np.mod(np.asarray(dt_us, dtype=float), period_us) / period_us
    phi = np.where(phi >= TWO_PI, 0.0, phi)
    return float(phi) if np.ndim(phi) == 0 else phi


def _mod(v: float, signed: bool) -> float:
    if signed:
        return (v + math.pi) % TWO_PI - math.pi
    return v % TWO_PI


def fill_absent(phi: np.ndarray, max_absent: float = 0.2) -> np.ndarray:
    """Interpolate NaNs along the shorter arc between present neighbours.

    Raises:
        LineRejectedError: more than ``max_absent`` of the line is NaN.
    """
    phi = np.asarray(phi, dtype=float)
    missing = np.isnan(phi)
    if not missing.any():
        return phi.copy()
    if missing.mean() > max_absent or missing.all():
        raise LineRejectedError(f"{int(missing.sum())} of {len(phi)} pixels absent")
    out = phi.copy()
    present = np.flatnonzero(~missing)
    out[: present[0]] = phi[present[0]]
    out[present[-1] + 1 :] = phi[present[-1]]
    for a, b in zip(present[:-1], present[1:]):
        if b - a > 1:
            delta = _mod(phi[b] - phi[a], True)
            frac = np.arange(1, b - a) / (b - a)
            out[a + 1 : b] = np.mod(phi[a] + frac * delta, TWO_PI)
    return out


def unwrap_line(
    phi,
    lam: float = 1.0,
    signed: bool = False,
    max_absent: float = 0.2,
) -> np.ndarray:
    """The recursion ``Phi_x = Phi_{x-1} + lam * mod(phi_{x-1} - Phi_{x-1}, 2 pi)``, ``Phi_0 = phi_0``.

    Applied exactly as written, so ``Phi_x`` tracks ``phi_{x-1}`` (one-pixel
    lag on a ramp). ``signed`` takes the modulus in ``[-pi, pi)`` instead of
    ``[0, 2 pi)``. Absent values are interpolated first.

    Raises:
        LineRejectedError: more than ``max_absent`` of the line is absent.
    """
    phi = fill_absent(np.asarray(phi, dtype=float), max_absent)
    n = len(phi)
    out = np.empty(n)
    if n == 0:
        return out
    out[0] = phi[0]
    for x in range(1, n):
        out[x] = out[x - 1] + lam * _mod(phi[x - 1] - out[x - 1], signed)
    return out


def unwrapped_phase(phi, lam: float = 1.0, signed: bool = False,
                    max_absent: float = 0.2) -> np.ndarray:
    """Per-pixel unwrapped phase: the recursion run one step further and realigned.

    Step ``x + 1`` of the recursion integrates ``phi_x``, so it is the value
    that belongs to pixel ``x``.
    """
    phi = fill_absent(np.asarray(phi, dtype=float), max_absent)
    if len(phi) == 0:
        return phi
    ext = np.append(phi, phi[-1])
    return unwrap_line(ext, lam, signed)[1:]


def phase_to_correspondence(Phi, stripe_period: float, offset: float = 0.0):
    """Projector column ``offset + Phi / (2 pi) * stripe_period``."""
    return offset + np.asarray(Phi, dtype=float) / TWO_PI * stripe_period


@dataclass
class PhaseLine:
    row: int
    ref_x: int
    columns: np.ndarray  # camera columns from the reference pixel rightwards
    dt_us: np.ndarray
    phi: np.ndarray
    Phi: np.ndarray
    period_us: float
    ref_first_on: float = float("nan")  # circular-median ON time of the reference, mod P


def count_periods(times: np.ndarray, period_us: float) -> int:
    if len(times) < 2:
        return 0
    return int(round((times[-1] - times[0]) / period_us))


def process_row(
    stream: EventStream,
    row: int,
    period_us: float,
    lam: float = 1.0,
    signed: bool = False,
    min_ref_periods: int = 3,
    max_absent: float = 0.2,
) -> PhaseLine | None:
    """Wrapped and unwrapped phase over one row of a filtered stream.

    The reference is the leftmost pixel with at least ``min_ref_periods``
    observed periods; the line spans from it to the rightmost active pixel.
    Returns None for an empty or rejected row.
    """
    on = _on_times_by_pixel(stream, row)
    if not on:
        return None
    candidates = [x for x in sorted(on) if count_periods(on[x], period_us) >= min_ref_periods]
    if not candidates:
        return None
    ref_x = candidates[0]
    right = max(on)
    cols = np.arange(ref_x, right + 1)
    ref = on[ref_x]
    dt = np.full(len(cols), np.nan)
    for k, x in enumerate(cols.tolist()):
        t = on.get(x)
        if t is not None:
            dt[k] = 0.0 if x == ref_x else _shift_against(t, ref, period_us)
    phi = wrap_phase(dt, period_us)
    try:
        Phi = unwrapped_phase(phi, lam, signed, max_absent)
    except LineRejectedError:
        return None
    return PhaseLine(row, ref_x, cols, dt, np.asarray(phi), Phi, period_us,
                     circular_median(ref, period_us))

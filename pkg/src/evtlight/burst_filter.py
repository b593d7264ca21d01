"""Hysteresis integrate-and-fire filter reducing event bursts to one event per edge.

Each pixel's action potential decays as ``exp(-dt/tau)`` between events, and
each event adds its inter-event delay in units of ``tau``, signed by its
polarity::

    AP <- AP * exp(-dt / tau) + (dt / tau) * p

The output toggles when the potential crosses the threshold opposite to the
current output state. A long quiet gap before the first event of a burst
therefore yields a large kick and fires the filter, while the tightly spaced
rest of the burst barely moves it.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from evtlight.events import Event, EventStream

UNKNOWN = 0


class FilterOrderError(ValueError):
    """An event arrived earlier than the previous one at the same pixel."""


@dataclass(frozen=True)
class FilterParams:
    tau_us: float
    thresh_up: float = 0.5
    thresh_down: float = 0.5

    def __post_init__(self):
        if not self.tau_us > 0:
            raise ValueError("tau must be positive")
        if not (self.thresh_up > 0 and self.thresh_down > 0):
            raise ValueError("thresholds must be positive")

    @classmethod
    def for_frequency(cls, frequency_hz: float, thresh_up: float = 0.5,
                      thresh_down: float = 0.5) -> "FilterParams":
        """Default time constant: one tenth of the stimulus period."""
        return cls(1e6 / frequency_hz / 10.0, thresh_up, thresh_down)


@dataclass(frozen=True)
class FilterState:
    ap: float = 0.0
    s_out: int = UNKNOWN
    t_last: int = 0


def _kernel(ts, ps, tau, up, down, ap, s_out, t_last):
    """Run the filter over plain lists. Returns ``(fired_positions, ap, s_out, t_last)``."""
    fired = []
    exp = math.exp
    inv_tau = 1.0 / tau
    for i in range(len(ts)):
        t = ts[i]
        x = (t - t_last) * inv_tau
        if x < 0:
            raise FilterOrderError(f"event at t={t} precedes previous event at t={t_last}")
        ap = ap * exp(-x) + x * ps[i]
        t_last = t
        if s_out != 1 and ap > up:
            s_out = 1
            fired.append(i)
        elif s_out != -1 and ap < -down:
            s_out = -1
            fired.append(i)
    return fired, ap, s_out, t_last


def filter_step(state: FilterState, e: Event, params: FilterParams):
    """Advance one pixel's filter by one event. Returns ``(new_state, output or None)``.

    Raises:
        FilterOrderError: ``e.t`` is before ``state.t_last``.
    """
    fired, ap, s_out, t_last = _kernel(
        [e.t], [e.p], params.tau_us, params.thresh_up, params.thresh_down,
        state.ap, state.s_out, state.t_last,
    )
    new = FilterState(ap, s_out, t_last)
    out = Event(e.x, e.y, e.t, s_out) if fired else None
    return new, out


def filter_times(t: np.ndarray, p: np.ndarray, params: FilterParams,
                 state: FilterState = FilterState()):
    """Filter one pixel's (or one merged neighbourhood's) sequence.

    Returns ``(indices of firing events, final state)``; every output takes
    its input's polarity.
    """
    fired, ap, s_out, t_last = _kernel(
        t.tolist(), p.tolist(), params.tau_us, params.thresh_up, params.thresh_down,
        state.ap, state.s_out, state.t_last,
    )
    return np.asarray(fired, dtype=np.int64), FilterState(ap, s_out, t_last)


def group_by_pixel(stream: EventStream) -> tuple[np.ndarray, list[np.ndarray]]:
    """Distinct flat pixel indices and, for each, its event indices in stream order."""
    pix = stream.pixel_index
    order = np.argsort(pix, kind="stable")
    sorted_pix = pix[order]
    uniq, starts = np.unique(sorted_pix, return_index=True)
    groups = np.split(order, starts[1:]) if len(order) else []
    return uniq, groups


def filter_stream(stream: EventStream, params: FilterParams, threads: int = 1) -> EventStream:
    """Filter every pixel independently; the output keeps the input's stable time order."""
    if len(stream) == 0:
        return EventStream.empty(stream.width, stream.height)
    _, groups = group_by_pixel(stream)
    t, p = stream.t, stream.p

    def run(idx: np.ndarray) -> np.ndarray:
        fired, _ = filter_times(t[idx], p[idx], params)
        return idx[fired]

    if threads > 1 and len(groups) > 64:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, groups, chunksize=32))
    else:
        parts = [run(g) for g in groups]
    keep = np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    return stream.select(keep)


def alternation_violations(stream: EventStream) -> int:
    """Count per-pixel consecutive output pairs with equal polarity."""
    if len(stream) < 2:
        return 0
    _, groups = group_by_pixel(stream)
    bad = 0
    for idx in groups:
        pp = stream.p[idx]
        bad += int((pp[1:] == pp[:-1]).sum())
    return bad


def scaled(params: FilterParams, factor: float) -> FilterParams:
    """Same dynamics with both thresholds multiplied by ``factor``."""
    return replace(params, thresh_up=params.thresh_up * factor,
                   thresh_down=params.thresh_down * factor)

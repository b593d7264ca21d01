"""Per-pixel frequency and duty-cycle estimation from filtered events.

The frequency follows from the gap between consecutive same-polarity
outputs. The ON and OFF half-periods are exponentially smoothed with gain
``lam``, and the duty cycle is ``T_on / (T_on + T_off)``.
"""

from __future__ import annotations

import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from evtlight._io import atomic_write_text
from evtlight.burst_filter import FilterParams, filter_times, group_by_pixel
from evtlight.events import OFF, ON, Event, EventStream


class AlternationError(ValueError):
    """Estimator input did not alternate in polarity."""


@dataclass(frozen=True)
class EstimatorState:
    lam: float = 0.1
    last_on: int | None = None
    last_off: int | None = None
    last_p: int = 0
    t_on: float | None = None
    t_off: float | None = None
    f_hat: float | None = None
    n_on: int = 0  # smoothed ON half-periods so far
    n_off: int = 0
    n_freq: int = 0
    commanded_hz: float | None = None
    band: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("smoothing lam must lie in (0, 1]")

    @property
    def n_periods(self) -> int:
        return min(self.n_on, self.n_off)


def _check(state: EstimatorState, e: Event) -> None:
    if e.p not in (ON, OFF):
        raise AlternationError(f"bad polarity {e.p}")
    if state.last_p == e.p:
        raise AlternationError(f"two consecutive {'ON' if e.p == ON else 'OFF'} events at t={e.t}")


def _plausible(state: EstimatorState, f: float) -> bool:
    if state.commanded_hz is None:
        return True
    return abs(f - state.commanded_hz) < state.band * state.commanded_hz


def update_frequency(state: EstimatorState, e: Event) -> EstimatorState:
    """``f_hat = 1 / (t_k - t_{k-1})`` over the previous same-polarity event (µs -> Hz).

    Estimates outside the plausibility band around ``commanded_hz`` are
    discarded. Timestamps are not recorded here; see :func:`observe`.
    """
    _check(state, e)
    prev = state.last_on if e.p == ON else state.last_off
    if prev is None or e.t <= prev:
        return state
    f = 1e6 / (e.t - prev)
    if not _plausible(state, f):
        return state
    return replace(state, f_hat=f, n_freq=state.n_freq + 1)


def _smooth(old: float | None, new: float, lam: float) -> float:
    return new if old is None else (1.0 - lam) * old + lam * new


def update_half_periods(state: EstimatorState, e: Event) -> EstimatorState:
    """Smooth ``T_on`` on an OFF after an ON and ``T_off`` on an ON after an OFF."""
    _check(state, e)
    if e.p == OFF and state.last_on is not None:
        return replace(state, t_on=_smooth(state.t_on, e.t - state.last_on, state.lam),
                       n_on=state.n_on + 1)
    if e.p == ON and state.last_off is not None:
        return replace(state, t_off=_smooth(state.t_off, e.t - state.last_off, state.lam),
                       n_off=state.n_off + 1)
    return state


def observe(state: EstimatorState, e: Event) -> EstimatorState:
    """Apply both updates, then record ``e`` as the latest event of its polarity."""
    state = update_half_periods(update_frequency(state, e), e)
    if e.p == ON:
        return replace(state, last_on=e.t, last_p=ON)
    return replace(state, last_off=e.t, last_p=OFF)


def dutycycle(state: EstimatorState) -> float | None:
    """``T_on / (T_on + T_off)``, or None until both half-periods are known."""
    if state.t_on is None or state.t_off is None:
        return None
    total = state.t_on + state.t_off
    return state.t_on / total if total > 0 else None


@dataclass
class PixelEstimate:
    """Result of estimating one pixel or neighbourhood."""

    frequencies: np.ndarray  # every accepted per-period estimate, Hz
    alphas: np.ndarray  # duty cycle after each update, once defined
    state: EstimatorState
    filtered_t: np.ndarray
    filtered_p: np.ndarray

    @property
    def f_hat(self) -> float | None:
        return self.state.f_hat

    @property
    def alpha(self) -> float | None:
        return dutycycle(self.state)

    @property
    def n_periods(self) -> int:
        return self.state.n_periods


def estimate_sequence(t: np.ndarray, p: np.ndarray, lam: float = 0.1,
                      commanded_hz: float | None = None, band: float = 0.5) -> PixelEstimate:
    """Run the estimators over an alternating (filtered) sequence."""
    state = EstimatorState(lam=lam, commanded_hz=commanded_hz, band=band)
    freqs: list[float] = []
    alphas: list[float] = []
    for ti, pi in zip(t.tolist(), p.tolist()):
        if pi == state.last_p:
            # The filter guarantees alternation; anything else is a caller bug.
            raise AlternationError(f"two consecutive events of polarity {pi} at t={ti}")
        n_before = state.n_freq
        state = observe(state, Event(0, 0, ti, pi))
        if state.n_freq > n_before:
            freqs.append(state.f_hat)
        a = dutycycle(state)
        if a is not None:
            alphas.append(a)
    return PixelEstimate(np.asarray(freqs), np.asarray(alphas), state,
                         np.asarray(t, dtype=np.int64), np.asarray(p, dtype=np.int8))


def merge_neighborhood(stream: EventStream, center: tuple[int, int], radius: int):
    """ON and OFF events of the ``(2N+1)^2`` block around ``center``, each in time order.

    The block is clipped at the sensor border.
    """
    cx, cy = center
    sel = (np.abs(stream.x - cx) <= radius) & (np.abs(stream.y - cy) <= radius)
    on = stream.select(sel & (stream.p == ON))
    off = stream.select(sel & (stream.p == OFF))
    return on, off


def neighborhood_indices(stream: EventStream, center: tuple[int, int], radius: int) -> np.ndarray:
    cx, cy = center
    sel = (np.abs(stream.x - cx) <= radius) & (np.abs(stream.y - cy) <= radius)
    return np.flatnonzero(sel)


def estimate_pixel(
    stream: EventStream,
    center: tuple[int, int],
    radius: int = 1,
    filter_params: FilterParams | None = None,
    frequency_hz: float = 20.0,
    lam: float = 0.1,
    band: float | None = 0.5,
) -> PixelEstimate:
    """Merge the neighbourhood's raw events, burst-filter them and estimate."""
    params = filter_params or FilterParams.for_frequency(frequency_hz)
    idx = neighborhood_indices(stream, center, radius)
    t, p = stream.t[idx], stream.p[idx]
    fired, _ = filter_times(t, p, params)
    return estimate_sequence(t[fired], p[fired], lam,
                             frequency_hz if band is not None else None, band or 0.5)


@dataclass
class DutyCycleImage:
    """Per-pixel duty cycle (NaN = absent), frequency and period count."""

    alpha: np.ndarray
    frequency: np.ndarray
    periods: np.ndarray
    width: int
    height: int
    meta: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, width: int, height: int) -> "DutyCycleImage":
        nan = np.full((height, width), np.nan)
        return cls(nan, nan.copy(), np.zeros((height, width), dtype=np.int64), width, height)

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.alpha)

    def to_csv(self, path) -> int:
        """CSV grid, one sensor row per line; absent pixels are ``nan``."""
        return atomic_write_text(path, _grid_csv(self.alpha))

    def to_gnuplot(self, data_path, script_path=None, title: str = "duty cycle") -> int:
        """Heatmap data as ``x y alpha`` blocks (one blank line per row) plus a plot script."""
        buf = io.StringIO()
        for y in range(self.height):
            for x in range(self.width):
                a = self.alpha[y, x]
                buf.write(f"{x} {y} {'nan' if math.isnan(a) else format(a, '.6g')}\n")
            buf.write("\n")
        n = atomic_write_text(data_path, buf.getvalue())
        if script_path is not None:
            script = (
                f"set title '{title}'\nset view map\nset yrange [*:*] reverse\n"
                "set cbrange [0:1]\nset palette rgb 33,13,10\n"
                f"splot '{os.path.basename(os.fspath(data_path))}' using 1:2:3 with image notitle\n"
            )
            atomic_write_text(script_path, script)
        return n


def _grid_csv(arr: np.ndarray) -> str:
    lines = []
    for row in arr:
        lines.append(",".join("nan" if math.isnan(v) else format(v, ".6g") for v in row.tolist()))
    return "\n".join(lines) + "\n"


def read_grid_csv(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        rows = [ln for ln in fh.read().splitlines() if ln.strip()]
    return np.array([[float(v) for v in ln.split(",")] for ln in rows], dtype=float)


def build_dutycycle_image(
    stream: EventStream,
    radius: int = 1,
    lam: float = 0.1,
    frequency_hz: float = 20.0,
    filter_params: FilterParams | None = None,
    min_periods: int = 2,
    band: float | None = 0.5,
    threads: int = 1,
) -> DutyCycleImage:
    """Estimate every pixel that carries events from its merged neighbourhood.

    Pixels with fewer than ``min_periods`` full periods stay absent.
    Accepts raw or already-filtered streams: the merged neighbourhood is
    always burst-filtered before estimation.
    """
    width, height = stream.width, stream.height
    image = DutyCycleImage.empty(width, height)
    image.meta = {"radius": radius, "lam": lam, "frequency_hz": frequency_hz}
    if len(stream) == 0:
        return image
    params = filter_params or FilterParams.for_frequency(frequency_hz)
    pixels, groups = group_by_pixel(stream)
    lookup = {int(px): g for px, g in zip(pixels.tolist(), groups)}
    t_all, p_all = stream.t, stream.p
    commanded = frequency_hz if band is not None else None

    def run(px: int):
        y, x = divmod(px, width)
        parts = []
        for yy in range(max(0, y - radius), min(height, y + radius + 1)):
            for xx in range(max(0, x - radius), min(width, x + radius + 1)):
                g = lookup.get(yy * width + xx)
                if g is not None:
                    parts.append(g)
        idx = np.sort(np.concatenate(parts)) if len(parts) > 1 else parts[0]
        t, p = t_all[idx], p_all[idx]
        fired, _ = filter_times(t, p, params)
        est = estimate_sequence(t[fired], p[fired], lam, commanded, band or 0.5)
        return px, est.alpha, est.f_hat, est.n_periods

    keys = sorted(lookup)
    if threads > 1 and len(keys) > 64:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, keys, chunksize=64))
    else:
        results = [run(px) for px in keys]
    for px, alpha, f_hat, n in results:
        y, x = divmod(px, width)
        image.periods[y, x] = n
        if alpha is not None and n >= min_periods:
            image.alpha[y, x] = alpha
            image.frequency[y, x] = f_hat if f_hat is not None else np.nan
    return image

"""Per-dot blinking signals, coded pattern specs and their load statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from evtlight.pattern.psm import SymbolGrid

PROJECTOR_WIDTH = 304
PROJECTOR_HEIGHT = 240
DMD_STEP_US = 700
DMD_MAX_MIRRORS = 5000
SENSOR_BANDWIDTH_EPS = 8e6


class ConfigurationError(ValueError):
    """Pattern parameters are inconsistent."""


class DomainError(ValueError):
    """A parameter is outside the range where a model holds."""


@dataclass(frozen=True)
class SignalSpec:
    """Square wave: ``frequency`` in Hz, duty cycle in (0, 1), phase as a period fraction."""

    frequency: float
    dutycycle: float
    phase: float = 0.0

    def __post_init__(self):
        if not self.frequency > 0:
            raise ConfigurationError(f"frequency must be positive, got {self.frequency}")
        if not 0.0 < self.dutycycle < 1.0:
            raise ConfigurationError(f"duty cycle must lie in (0, 1), got {self.dutycycle}")
        if not 0.0 <= self.phase < 1.0:
            raise ConfigurationError(f"phase must lie in [0, 1), got {self.phase}")

    @property
    def period_us(self) -> float:
        return 1e6 / self.frequency

    def with_phase(self, phase: float) -> "SignalSpec":
        return SignalSpec(self.frequency, self.dutycycle, float(phase) % 1.0)


DEFAULT_FREQUENCY_HZ = 20.0
DEFAULT_DUTYCYCLES = (0.2, 0.4, 0.6, 0.8)


def default_alphabet(frequency: float = DEFAULT_FREQUENCY_HZ) -> dict[int, SignalSpec]:
    return {s: SignalSpec(frequency, a) for s, a in enumerate(DEFAULT_DUTYCYCLES)}


def square_wave_edges(
    signal: SignalSpec,
    duration_us: float,
    step_us: float = 1.0,
    include_start: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Edge times (µs, int64) and polarities (+1 rising, -1 falling) over ``[0, duration)``.

    The light is ON while ``frac(t/T - phase) < dutycycle``. Each edge is
    rounded to the nearest multiple of ``step_us``; pulses that collapse to
    zero length are removed. The projector is dark before ``t = 0``, so a
    signal that is ON at ``t = 0`` gets a rising edge there unless
    ``include_start`` is False.
    """
    period = signal.period_us
    k_lo = math.floor(-signal.phase) - 1
    k_hi = math.ceil(duration_us / period - signal.phase) + 1
    ks = np.arange(k_lo, k_hi + 1, dtype=np.float64)
    rise = (ks + signal.phase) * period
    fall = (ks + signal.phase + signal.dutycycle) * period
    times = np.empty(2 * len(ks))
    times[0::2] = rise
    times[1::2] = fall
    pols = np.tile(np.array([1, -1], dtype=np.int8), len(ks))

    keep = (times >= 0) & (times < duration_us)
    # ON at t=0 with no genuine rising edge at 0: the first kept edge is a fall.
    on_at_start = False
    if keep.any():
        first = int(np.flatnonzero(keep)[0])
        on_at_start = pols[first] == -1
    else:
        mid = duration_us / 2.0
        on_at_start = ((mid / period - signal.phase) % 1.0) < signal.dutycycle
    times, pols = times[keep], pols[keep]
    if on_at_start and include_start:
        times = np.concatenate([[0.0], times])
        pols = np.concatenate([np.array([1], dtype=np.int8), pols])

    if step_us > 0:
        q = np.floor(times / step_us + 0.5) * step_us
    else:
        q = times
    q = np.floor(q + 0.5).astype(np.int64)
    inside = q < duration_us
    q, pols = q[inside], pols[inside]

    # Drop pulses whose two edges quantized onto the same instant.
    out_t: list[int] = []
    out_p: list[int] = []
    for t, p in zip(q.tolist(), pols.tolist()):
        if out_t and out_t[-1] == t and out_p[-1] != p:
            out_t.pop()
            out_p.pop()
            continue
        out_t.append(t)
        out_p.append(p)
    return np.array(out_t, dtype=np.int64), np.array(out_p, dtype=np.int8)


@dataclass(frozen=True)
class PatternSpec:
    """Coded dot pattern: symbol grid, dot geometry, alphabet and per-dot phases.

    Dot ``(r, c)`` is centred on projector pixel
    ``(origin_u + c * dot_pitch, origin_v + r * dot_pitch)``; without an
    explicit origin the grid is centred in the 304 x 240 DLP frame.
    """

    grid: SymbolGrid
    alphabet: Mapping[int, SignalSpec]
    phases: np.ndarray
    dot_pitch: int = 8
    dot_size: int = 3
    origin: tuple[float, float] | None = None
    kind: str = "psm"
    stripe_period: float | None = None
    seed: int | None = None

    def __post_init__(self):
        missing = sorted(set(range(self.grid.k)) - set(self.alphabet))
        if missing:
            raise ConfigurationError(f"alphabet has no signal for symbols {missing}")
        if self.dot_pitch < 1 or self.dot_size < 1:
            raise ConfigurationError("dot pitch and dot size must be >= 1")
        if self.dot_size > self.dot_pitch:
            raise ConfigurationError(
                f"dot size {self.dot_size} exceeds dot pitch {self.dot_pitch}"
            )
        phases = np.array(self.phases, dtype=np.float64, copy=True)
        if phases.shape != self.grid.symbols.shape:
            raise ConfigurationError(
                f"phases shape {phases.shape} != grid shape {self.grid.symbols.shape}"
            )
        if phases.size and (phases.min() < 0.0 or phases.max() >= 1.0):
            raise ConfigurationError("phases must lie in [0, 1)")
        phases.setflags(write=False)
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "alphabet", dict(self.alphabet))
        if self.origin is None:
            u0 = (PROJECTOR_WIDTH - (self.cols - 1) * self.dot_pitch) // 2
            v0 = (PROJECTOR_HEIGHT - (self.rows - 1) * self.dot_pitch) // 2
            object.__setattr__(self, "origin", (float(u0), float(v0)))
        else:
            object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def rows(self) -> int:
        return self.grid.rows

    @property
    def cols(self) -> int:
        return self.grid.cols

    @property
    def n_dots(self) -> int:
        return self.rows * self.cols

    def projector_position(self, row, col):
        """Projector pixel coordinates (u, v) of dot centres; accepts arrays."""
        u0, v0 = self.origin
        return u0 + np.asarray(col) * self.dot_pitch, v0 + np.asarray(row) * self.dot_pitch

    def signal(self, row: int, col: int) -> SignalSpec:
        base = self.alphabet[int(self.grid.symbols[row, col])]
        return base.with_phase(self.phases[row, col])

    def min_period_us(self) -> float:
        used = set(np.unique(self.grid.symbols).tolist())
        return min(self.alphabet[s].period_us for s in used)

    def max_period_us(self) -> float:
        used = set(np.unique(self.grid.symbols).tolist())
        return max(self.alphabet[s].period_us for s in used)


def assign_signals(
    grid: SymbolGrid,
    alphabet: Mapping[int, SignalSpec] | None = None,
    seed: int = 0,
    dot_pitch: int = 8,
    dot_size: int = 3,
    origin: tuple[float, float] | None = None,
) -> PatternSpec:
    """Attach signals to a grid, drawing each dot's phase offset uniformly from [0, 1).

    Raises:
        ConfigurationError: if ``alphabet`` misses a symbol of the grid.
    """
    alphabet = default_alphabet() if alphabet is None else dict(alphabet)
    missing = sorted(set(range(grid.k)) - set(alphabet))
    if missing:
        raise ConfigurationError(f"alphabet has no signal for symbols {missing}")
    rng = np.random.default_rng(seed)
    phases = rng.random(grid.symbols.shape)
    return PatternSpec(grid, alphabet, phases, dot_pitch, dot_size, origin, "psm", None, seed)


def make_stripe_pattern(
    rows: int,
    cols: int,
    stripe_period: float,
    frequency: float = DEFAULT_FREQUENCY_HZ,
    dutycycle: float = 0.5,
    origin: tuple[float, float] | None = None,
) -> PatternSpec:
    """Moving-stripe pattern: one dot per projector pixel, phase ramp along columns.

    Column ``c`` blinks with phase ``(c / stripe_period) mod 1``, which is a
    stripe of period ``stripe_period`` pixels sliding by one period per
    signal period.
    """
    grid = SymbolGrid(np.zeros((rows, cols), dtype=np.int64), k=1, window=(1, 1), h_min=1)
    ramp = (np.arange(cols) / float(stripe_period)) % 1.0
    phases = np.tile(ramp, (rows, 1))
    return PatternSpec(
        grid,
        {0: SignalSpec(frequency, dutycycle)},
        phases,
        dot_pitch=1,
        dot_size=1,
        origin=origin,
        kind="stripes",
        stripe_period=float(stripe_period),
    )


@dataclass(frozen=True)
class LoadStats:
    """Predicted change events per window of ``window_us``: mean and variance."""

    mean: float
    variance: float
    window_us: float
    classes: tuple[tuple[int, float, float], ...] = ()  # (n_k, period_us, p_k)

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def load_statistics(pattern: PatternSpec, window_us: float) -> LoadStats:
    """Event-load model for randomly phase-shifted dots.

    With uniform phases each dot of period ``T_k`` changes inside a window
    ``dt`` with probability ``p_k = 2 dt / T_k``; the per-class binomials add
    to ``mu = sum n_k p_k`` and ``sigma^2 = sum n_k p_k (1 - p_k)``.

    Raises:
        DomainError: if ``window_us`` is at least half the shortest period.
    """
    if window_us < 0:
        raise DomainError("window must be non-negative")
    symbols, counts = np.unique(pattern.grid.symbols, return_counts=True)
    mean = 0.0
    var = 0.0
    classes = []
    for s, n_k in zip(symbols.tolist(), counts.tolist()):
        period = pattern.alphabet[s].period_us
        if 2.0 * window_us >= period:
            raise DomainError(
                f"window {window_us} us >= half the period {period} us of symbol {s}"
            )
        p_k = 2.0 * window_us / period
        mean += n_k * p_k
        var += n_k * p_k * (1.0 - p_k)
        classes.append((int(n_k), float(period), float(p_k)))
    return LoadStats(mean, var, float(window_us), tuple(classes))


@dataclass
class BudgetReport:
    step_us: float
    changes: np.ndarray  # mirror changes per step
    max_mirrors: int
    predicted_mean_eps: float
    predicted_peak_eps: float
    bandwidth_eps: float
    infeasible_steps: list[int] = field(default_factory=list)

    @property
    def max_changes(self) -> int:
        return int(self.changes.max()) if self.changes.size else 0

    @property
    def worst_step(self) -> int | None:
        return int(self.changes.argmax()) if self.changes.size and self.max_changes else None

    @property
    def feasible(self) -> bool:
        return not self.infeasible_steps

    @property
    def sensor_feasible(self) -> bool:
        return self.predicted_peak_eps <= self.bandwidth_eps


def check_dmd_budget(
    pattern: PatternSpec | None,
    step_us: float = DMD_STEP_US,
    duration_us: float | None = None,
    max_mirrors: int = DMD_MAX_MIRRORS,
    events_per_edge: float = 1.0,
    bandwidth_eps: float = SENSOR_BANDWIDTH_EPS,
    allow_fast_step: bool = False,
) -> BudgetReport:
    """Count mirror changes per DMD step and predict the sensor event load.

    Every dot edge flips ``dot_size**2`` mirrors at its quantized step. The
    default horizon is one period of the slowest symbol. Sensor load assumes
    one camera pixel per mirror and ``events_per_edge`` events per pixel edge.
    """
    if step_us < DMD_STEP_US and not allow_fast_step:
        raise ValueError(f"DMD step {step_us} us is below the {DMD_STEP_US} us device limit")
    if pattern is None or pattern.n_dots == 0:
        return BudgetReport(float(step_us), np.zeros(0, dtype=np.int64), max_mirrors, 0.0, 0.0,
                            bandwidth_eps)
    if duration_us is None:
        duration_us = pattern.max_period_us()
    n_steps = int(math.ceil(duration_us / step_us))
    changes = np.zeros(n_steps + 1, dtype=np.int64)
    mirrors = pattern.dot_size**2
    mean_eps = 0.0
    for r in range(pattern.rows):
        for c in range(pattern.cols):
            sig = pattern.signal(r, c)
            times, _ = square_wave_edges(sig, duration_us, step_us, include_start=False)
            idx = np.floor(times / step_us + 0.5).astype(np.int64)
            np.add.at(changes, idx, mirrors)
            mean_eps += mirrors * 2.0 * sig.frequency * events_per_edge
    changes = changes[:n_steps] if changes[n_steps] == 0 else changes
    peak_eps = changes.max() * events_per_edge / (step_us * 1e-6) if changes.size else 0.0
    bad = np.flatnonzero(changes > max_mirrors).tolist()
    return BudgetReport(float(step_us), changes, max_mirrors, mean_eps, float(peak_eps),
                        bandwidth_eps, bad)

"""End-to-end pipelines shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from evtlight._io import atomic_write_text
from evtlight.burst_filter import FilterParams, filter_stream
from evtlight.correspondence import (
    DEFAULT_TOLERANCE,
    CodewordCandidate,
    Correspondence,
    DetectedDot,
    MatchReport,
    detect_dots,
    enforce_neighbor_consistency,
    estimate_pitch,
    extract_codewords,
    match,
)
from evtlight.estimator import DutyCycleImage, build_dutycycle_image, estimate_pixel
from evtlight.events import EventStream
from evtlight.pattern.signals import PatternSpec, SignalSpec
from evtlight.phase import PhaseLine, phase_to_correspondence, process_row
from evtlight.simulator import Box, Plane, Scene, SensorParams, single_footprint_stream
from evtlight.triangulation import (
    CloudSummary,
    PointCloud,
    RigCalibration,
    build_cloud,
    intersect_projector_column,
)


def pattern_frequency(pattern: PatternSpec) -> float:
    """The shared alphabet frequency (the lowest one if they differ)."""
    return min(s.frequency for s in pattern.alphabet.values())


def box_on_plane_scene(
    pattern: PatternSpec,
    rig: RigCalibration,
    plane_depth: float = 1.0,
    box_depth: float = 0.8,
    rows: tuple[int, int] = (8, 12),
    cols: tuple[int, int] = (9, 18),
    background_depth: float = 5.0,
) -> Scene:
    """Fronto-parallel plane with a box standing on it, front face at ``box_depth``.

    The front face covers dot rows/cols in the given inclusive ranges; its
    edges fall midway between dot rows/columns so no dot grazes a border.
    """
    u_lo, v_lo = pattern.projector_position(rows[0] - 0.5, cols[0] - 0.5)
    u_hi, v_hi = pattern.projector_position(rows[1] + 0.5, cols[1] + 0.5)
    o, d = rig.projector_ray(np.array([u_lo, u_hi]), np.array([v_lo, v_hi]))
    s = (box_depth - o[:, 2]) / d[:, 2]
    corners = o + s[:, None] * d
    x0, x1 = sorted(corners[:, 0])
    y0, y1 = sorted(corners[:, 1])
    depth = plane_depth - box_depth
    box = Box(((x0 + x1) / 2, (y0 + y1) / 2, box_depth + depth / 2), (x1 - x0, y1 - y0, depth))
    return Scene((Plane((0.0, 0.0, 1.0), plane_depth), box), background_depth)


# --- frequency experiments -----------------------------------------------------


@dataclass
class FrequencyResult:
    commanded_hz: float
    estimates: np.ndarray
    periods: int

    @property
    def mean(self) -> float:
        return float(self.estimates.mean()) if len(self.estimates) else float("nan")

    @property
    def std(self) -> float:
        return float(self.estimates.std()) if len(self.estimates) else float("nan")

    def fraction_within(self, rel: float) -> float:
        if not len(self.estimates):
            return 0.0
        return float((np.abs(self.estimates - self.commanded_hz) < rel * self.commanded_hz).mean())


def frequency_trial(
    frequency_hz: float,
    periods: int,
    dutycycle: float = 0.5,
    params: SensorParams = SensorParams(),
    seed: int = 0,
    radius: int = 1,
    footprint: int = 3,
    lam: float = 0.1,
) -> FrequencyResult:
    """Per-period frequency estimates of one simulated dot at its footprint centre."""
    sig = SignalSpec(frequency_hz, dutycycle)
    sim = single_footprint_stream(sig, periods * sig.period_us, params, seed, (100, 100), footprint)
    est = estimate_pixel(sim.stream, (100, 100), radius, frequency_hz=frequency_hz, lam=lam)
    return FrequencyResult(frequency_hz, est.frequencies, periods)


SWEEP_FREQUENCIES = (40.0, 100.0, 200.0, 500.0, 666.0, 1000.0)


def frequency_sweep(
    frequencies: Sequence[float] = SWEEP_FREQUENCIES,
    periods: int = 100,
    params: SensorParams = SensorParams(),
    seed: int = 0,
    radius: int = 1,
) -> list[FrequencyResult]:
    return [frequency_trial(f, periods, 0.5, params, seed + i, radius)
            for i, f in enumerate(frequencies)]


def sweep_csv(results: Sequence[FrequencyResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["commanded_hz", "mean_hz", "std_hz", "rel_error", "n_estimates", "within_3pct"])
    for r in results:
        w.writerow([format(r.commanded_hz, "g"), format(r.mean, ".6f"), format(r.std, ".6f"),
                    format(abs(r.mean - r.commanded_hz) / r.commanded_hz, ".6g"),
                    len(r.estimates), format(r.fraction_within(0.03), ".6g")])
    return buf.getvalue()


SWEEP_GNUPLOT = """set datafile separator ','
set key autotitle columnhead
set xlabel 'commanded frequency (Hz)'
set ylabel 'extracted frequency (Hz)'
plot '{data}' using 1:2:3 with yerrorbars title 'mean +- sigma', x with lines title 'ideal'
"""


# --- duty-cycle reconstruction --------------------------------------------------


@dataclass
class DutycycleReconstruction:
    image: DutyCycleImage
    dots: list[DetectedDot]
    candidates: list[list[CodewordCandidate]]
    correspondences: list[Correspondence]
    report: MatchReport
    cloud: PointCloud
    summary: CloudSummary
    pitch: float


def reconstruct_dutycycle(
    stream: EventStream,
    pattern: PatternSpec,
    rig: RigCalibration,
    radius: int = 1,
    lam: float = 0.1,
    tolerance: float = DEFAULT_TOLERANCE,
    min_support: int = 4,
    reach: float = 3.0,
    max_shift: float = 2.5,
    max_hamming: int = 0,
    max_gap: float = 0.01,
    threads: int = 1,
    image: DutyCycleImage | None = None,
) -> DutycycleReconstruction:
    """Events -> duty-cycle image -> dots -> codewords -> matches -> point cloud."""
    if image is None:
        image = build_dutycycle_image(stream, radius, lam, pattern_frequency(pattern),
                                      threads=threads)
    dots = detect_dots(image, min_support, alphabet=pattern.alphabet, tolerance=tolerance)
    pitch = estimate_pitch(dots)
    if not math.isfinite(pitch):
        pitch = float(pattern.dot_pitch)
    cands = extract_codewords(dots, pitch, reach, max_shift)
    corrs, report = match(cands, pattern.grid, dots, pattern, max_hamming)
    corrs = enforce_neighbor_consistency(corrs, report)
    cloud, summary = build_cloud(corrs, rig, max_gap)
    return DutycycleReconstruction(image, dots, cands, corrs, report, cloud, summary, pitch)


# --- phase reconstruction ----------------------------------------------------------


@dataclass
class PhaseReconstruction:
    lines: list[PhaseLine]
    camera_points: np.ndarray  # (N, 2)
    projector_u: np.ndarray  # (N,)
    cloud: PointCloud
    rejected_rows: list[int] = field(default_factory=list)


def reconstruct_phase(
    stream: EventStream,
    pattern: PatternSpec,
    rig: RigCalibration,
    lam: float = 1.0,
    signed: bool = False,
    latency_us: float = SensorParams().latency_us,
    filtered: bool = False,
) -> PhaseReconstruction:
    """Row-wise phase unwrapping to projector columns, then ray-plane triangulation.

    The absolute column is anchored at each row's reference pixel: its ON
    time relative to the projector clock, minus the nominal sensor latency,
    gives its phase, and it is assumed to lie within half a stripe period of
    the pattern's first column.
    """
    if pattern.stripe_period is None:
        raise ValueError("phase reconstruction needs a stripe pattern")
    freq = pattern_frequency(pattern)
    period = 1e6 / freq
    if not filtered:
        stream = filter_stream(stream, FilterParams.for_frequency(freq))
    sp = pattern.stripe_period
    lines, cams, projs, rejected = [], [], [], []
    rows_with_events = np.unique(stream.y).tolist()
    for row in rows_with_events:
        line = process_row(stream, int(row), period, lam, signed)
        if line is None:
            rejected.append(int(row))
            continue
        lines.append(line)
        ref_phase = ((line.ref_first_on - latency_us) / period) % 1.0
        ref_phase = ((ref_phase + 0.5) % 1.0) - 0.5
        offset = pattern.origin[0] + ref_phase * sp
        u = phase_to_correspondence(line.Phi, sp, offset)
        cams.append(np.stack([line.columns.astype(float), np.full(len(u), float(row))], axis=1))
        projs.append(u)
    if cams:
        cam = np.concatenate(cams)
        proj = np.concatenate(projs)
        pts, valid = intersect_projector_column(cam, proj, rig)
        cloud = PointCloud(pts[valid], np.zeros(int(valid.sum())), [])
    else:
        cam, proj = np.zeros((0, 2)), np.zeros(0)
        cloud = PointCloud(np.zeros((0, 3)), np.zeros(0), [])
    return PhaseReconstruction(lines, cam, proj, cloud, rejected)


def affine_residual(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares line ``y = a x + b``; returns ``(a, b, max |residual|)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.stack([x, np.ones_like(x)], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(a), float(b), float(np.abs(y - (a * x + b)).max())


# --- evaluation ----------------------------------------------------------------------


@dataclass
class Evaluation:
    n_interior: int
    n_decodable: int
    n_matched: int
    n_correct: int
    n_wrong: int
    match_rate: float  # correct matches / decodable interior dots
    match_rate_all: float  # correct matches / all interior dots
    depth_rms_rel: float
    depth_max_rel: float
    modes: list[float]
    bimodal: bool

    def as_rows(self) -> list[tuple[str, object]]:
        return [(k, getattr(self, k)) for k in self.__dataclass_fields__]


def histogram_modes(z: np.ndarray, bin_m: float = 0.01, min_fraction: float = 0.05) -> list[float]:
    """Centres of local histogram maxima holding at least ``min_fraction`` of the points."""
    z = np.asarray(z, dtype=float)
    if len(z) == 0:
        return []
    lo = math.floor(z.min() / bin_m) * bin_m - bin_m
    hi = math.ceil(z.max() / bin_m) * bin_m + 2 * bin_m
    counts, edges = np.histogram(z, bins=np.arange(lo, hi, bin_m))
    padded = np.concatenate([[0], counts, [0]])
    modes = []
    for i in range(len(counts)):
        c = padded[i + 1]
        if c >= padded[i] and c > padded[i + 2] and c >= min_fraction * len(z):
            modes.append(float((edges[i] + edges[i + 1]) / 2))
    return modes


def evaluate(
    corrs: Sequence[Correspondence],
    cloud: PointCloud,
    truth: Sequence[dict],
    pattern: PatternSpec,
    expected_depths: Sequence[float] = (),
    position_tol: float = 1.0,
) -> Evaluation:
    """Score matches and depths against the simulator's ground-truth sidecar."""
    rows, cols = pattern.rows, pattern.cols
    by_pos = {(t["row"], t["col"]): t for t in truth}
    visible = np.zeros((rows, cols), dtype=bool)
    for (r, c), t in by_pos.items():
        visible[r, c] = t["visible"]
    interior = [(r, c) for r in range(1, rows - 1) for c in range(1, cols - 1)]
    decodable = {(r, c) for r, c in interior if visible[r - 1 : r + 2, c - 1 : c + 2].all()}
    correct: list[tuple[Correspondence, dict]] = []
    wrong = 0
    for c in corrs:
        t = by_pos.get(c.grid_pos)
        if t is None or not t["visible"]:
            wrong += 1
            continue
        dx = c.camera_point[0] - t["camera_x"]
        dy = c.camera_point[1] - t["camera_y"]
        if math.hypot(dx, dy) <= position_tol:
            correct.append((c, t))
        else:
            wrong += 1
    n_correct_dec = sum(1 for c, _ in correct if c.grid_pos in decodable)
    # Depth error of every triangulated point whose match is correct.
    z_true = {id(c): t["Z"] for c, t in correct}
    pts = cloud.points.reshape(-1, 3)
    rel = np.asarray(
        [(p[2] - z_true[id(c)]) / z_true[id(c)]
         for c, p in zip(cloud.provenance, pts) if id(c) in z_true],
        dtype=float,
    )
    modes = histogram_modes(pts[:, 2]) if len(pts) else []
    bimodal = bool(expected_depths) and len(modes) >= len(expected_depths) and all(
        any(abs(m - z0) <= 0.02 * z0 for m in modes) for z0 in expected_depths
    )
    if bimodal and len(expected_depths) >= 2:
        # The two dominant modes must be the expected ones.
        counts = [(np.abs(pts[:, 2] - m) < 0.01).sum() for m in modes]
        top = [modes[i] for i in np.argsort(counts)[::-1][: len(expected_depths)]]
        bimodal = all(any(abs(m - z0) <= 0.02 * z0 for m in top) for z0 in expected_depths)
    n_dec = len(decodable)
    return Evaluation(
        n_interior=len(interior),
        n_decodable=n_dec,
        n_matched=len(corrs),
        n_correct=len(correct),
        n_wrong=wrong,
        match_rate=n_correct_dec / n_dec if n_dec else float("nan"),
        match_rate_all=len(correct) / len(interior) if interior else float("nan"),
        depth_rms_rel=float(np.sqrt((rel**2).mean())) if len(rel) else float("nan"),
        depth_max_rel=float(np.abs(rel).max()) if len(rel) else float("nan"),
        modes=modes,
        bimodal=bimodal,
    )


def rows_csv(rows: Sequence[tuple[str, object]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for k, v in rows:
        w.writerow([k, format(v, ".9g") if isinstance(v, float) else v])
    return buf.getvalue()


def write_rows_csv(rows: Sequence[tuple[str, object]], path) -> int:
    return atomic_write_text(path, rows_csv(rows))

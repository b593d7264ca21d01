"""Synthetic test bed: projector timelines, scene ray casting and ATIS-like event emission.

The forward model is deliberately simple. Each projector dot is a binary
square wave on the DMD step grid. Its centre ray is intersected with a scene
of planes, boxes and spheres, and the hit point is projected into the
camera. The dot lights a ``dot_size x dot_size`` block of camera pixels, and
every pixel in the block emits a burst of same-signed events per edge.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from evtlight._io import atomic_write_text, read_json, write_json
from evtlight.events import SENSOR_HEIGHT, SENSOR_WIDTH, EventStream
from evtlight.pattern.signals import (
    DMD_STEP_US,
    SENSOR_BANDWIDTH_EPS,
    ConfigurationError,
    PatternSpec,
    SignalSpec,
    square_wave_edges,
)
from evtlight.triangulation import Intrinsics, RigCalibration

_HIT_EPS = 1e-12
_OCCLUSION_TOL = 1e-7  # metres


# --- scene -------------------------------------------------------------------


@dataclass(frozen=True)
class Plane:
    """Points with ``normal . X = distance``."""

    normal: tuple[float, float, float]
    distance: float

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        den = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.distance - origins @ n) / den
        return np.where((np.abs(den) > _HIT_EPS) & (t > _HIT_EPS), t, np.inf)


@dataclass(frozen=True)
class Box:
    """Box with full edge lengths ``size`` whose local axes are the columns of ``rotation``."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    rotation: tuple[float, ...] = (1, 0, 0, 0, 1, 0, 0, 0, 1)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        o = (origins - np.asarray(self.center)) @ R
        d = dirs @ R
        half = 0.5 * np.asarray(self.size, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        # Rays parallel to a slab: inside -> unbounded, outside -> miss.
        parallel = d == 0
        inside = np.abs(o) <= half
        t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        hit = (t_near <= t_far) & (t_far > _HIT_EPS)
        t = np.where(t_near > _HIT_EPS, t_near, t_far)
        return np.where(hit, t, np.inf)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origins - np.asarray(self.center)
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t_near, t_far = -b - root, -b + root
        t = np.where(t_near > _HIT_EPS, t_near, t_far)
        return np.where((disc >= 0) & (t > _HIT_EPS), t, np.inf)


_PRIMITIVES = {"plane": Plane, "box": Box, "sphere": Sphere}


@dataclass(frozen=True)
class Scene:
    """Union of primitives; anything farther than ``background_depth`` (camera Z) is empty."""

    primitives: tuple = ()
    background_depth: float = 10.0

    def intersect(self, origins, dirs) -> np.ndarray:
        """Nearest positive ray parameter per ray (``inf`` on a miss); ``dirs`` must be unit."""
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        origins = np.broadcast_to(origins, dirs.shape)
        best = np.full(len(dirs), np.inf)
        for prim in self.primitives:
            best = np.minimum(best, prim.intersect(origins, dirs))
        return best


def plane_scene(depth: float = 1.0, background_depth: float = 10.0) -> Scene:
    return Scene((Plane((0.0, 0.0, 1.0), float(depth)),), background_depth)


def scene_to_dict(scene: Scene) -> dict:
    prims = []
    for p in scene.primitives:
        if isinstance(p, Plane):
            prims.append({"type": "plane", "normal": list(p.normal), "distance": p.distance})
        elif isinstance(p, Box):
            prims.append(
                {"type": "box", "center": list(p.center), "size": list(p.size),
                 "rotation": list(p.rotation)}
            )
        elif isinstance(p, Sphere):
            prims.append({"type": "sphere", "center": list(p.center), "radius": p.radius})
    return {"format": "evtlight-scene/1", "background_depth": scene.background_depth,
            "primitives": prims}


def scene_from_dict(doc: dict) -> Scene:
    prims = []
    try:
        for item in doc.get("primitives", []):
            kind = item["type"]
            if kind == "plane":
                prims.append(Plane(tuple(map(float, item["normal"])), float(item["distance"])))
            elif kind == "box":
                rot = tuple(map(float, item.get("rotation", (1, 0, 0, 0, 1, 0, 0, 0, 1))))
                prims.append(
                    Box(tuple(map(float, item["center"])), tuple(map(float, item["size"])), rot)
                )
            elif kind == "sphere":
                prims.append(Sphere(tuple(map(float, item["center"])), float(item["radius"])))
            else:
                raise ConfigurationError(f"unknown primitive type {kind!r}")
        background = float(doc.get("background_depth", 10.0))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"bad scene document: {exc}") from exc
    if not (background > 0 and math.isfinite(background)):
        raise ConfigurationError("background depth must be positive and finite")
    return Scene(tuple(prims), background)


def save_scene(scene: Scene, path) -> int:
    return write_json(path, scene_to_dict(scene))


def load_scene(path) -> Scene:
    return scene_from_dict(read_json(path))


# --- rig ---------------------------------------------------------------------


def default_rig(
    focal: float = 300.0,
    baseline: float = 0.2,
    working_depth: float = 1.0,
    width: int = SENSOR_WIDTH,
    height: int = SENSOR_HEIGHT,
) -> RigCalibration:
    """Camera and DLP side by side, the projector shifted ``baseline`` along +X.

    The projector's principal point is offset by ``focal*baseline/working_depth``
    pixels (lens shift) so both views overlap fully at ``working_depth``: a
    projector pixel ``u`` then lands on camera column ``u`` on a plane at that
    depth.
    """
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    shift = focal * baseline / working_depth
    return RigCalibration(
        Intrinsics(focal, focal, cx, cy),
        Intrinsics(focal, focal, cx + shift, cy),
        np.eye(3),
        np.array([baseline, 0.0, 0.0]),
    )


# --- projector timelines -------------------------------------------------------


@dataclass
class Timeline:
    """Per-dot edge schedules, indexed by ``row * cols + col``."""

    duration_us: int
    step_us: float
    cols: int
    times: list[np.ndarray]
    pols: list[np.ndarray]

    def edges(self, row: int, col: int) -> tuple[np.ndarray, np.ndarray]:
        i = row * self.cols + col
        return self.times[i], self.pols[i]

    def __len__(self) -> int:
        return len(self.times)


def render_timeline(
    pattern: PatternSpec,
    duration_us: float,
    step_us: float = DMD_STEP_US,
    allow_fast_step: bool = False,
) -> Timeline:
    """Quantized square-wave edge schedule of every dot.

    Raises:
        ValueError: ``step_us`` below the DMD limit unless ``allow_fast_step``.
    """
    if step_us < DMD_STEP_US and not allow_fast_step:
        raise ValueError(f"step {step_us} us is below the {DMD_STEP_US} us DMD limit")
    times, pols = [], []
    cache: dict[SignalSpec, tuple[np.ndarray, np.ndarray]] = {}
    for r in range(pattern.rows):
        for c in range(pattern.cols):
            sig = pattern.signal(r, c)
            if sig not in cache:
                cache[sig] = square_wave_edges(sig, duration_us, step_us)
            t, p = cache[sig]
            times.append(t)
            pols.append(p)
    return Timeline(int(math.ceil(duration_us)), float(step_us), pattern.cols, times, pols)


# --- dot projection ------------------------------------------------------------


@dataclass
class DotTrace:
    """Ground truth for one projector dot."""

    row: int
    col: int
    projector: tuple[float, float]
    camera: tuple[float, float] | None = None
    footprint: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    point: np.ndarray | None = None
    visible: bool = False
    reason: str = ""

    @property
    def depth(self) -> float:
        return float(self.point[2]) if self.point is not None else float("nan")


def footprint_pixels(x: float, y: float, size: int, width: int, height: int) -> np.ndarray:
    """Nearest-pixel ``size x size`` block centred on ``(x, y)``, clipped to the sensor."""
    x0 = int(math.floor(x - (size - 1) / 2.0 + 0.5))
    y0 = int(math.floor(y - (size - 1) / 2.0 + 0.5))
    xs = np.arange(x0, x0 + size)
    ys = np.arange(y0, y0 + size)
    gx, gy = np.meshgrid(xs, ys)
    pix = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    ok = (pix[:, 0] >= 0) & (pix[:, 0] < width) & (pix[:, 1] >= 0) & (pix[:, 1] < height)
    return pix[ok].astype(np.int64)


def project_dots(
    pattern: PatternSpec,
    scene: Scene,
    rig: RigCalibration,
    width: int = SENSOR_WIDTH,
    height: int = SENSOR_HEIGHT,
) -> list[DotTrace]:
    """Cast every dot's projector ray into the scene and image the hit point in the camera.

    A dot is absent when its ray misses the scene, hits beyond the background
    depth, is hidden from the camera by nearer geometry, or lands outside the
    sensor.
    """
    rows, cols = np.meshgrid(np.arange(pattern.rows), np.arange(pattern.cols), indexing="ij")
    rows, cols = rows.reshape(-1), cols.reshape(-1)
    u, v = pattern.projector_position(rows, cols)
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    op, dp = rig.projector_ray(u, v)
    t_hit = scene.intersect(op, dp)
    points = op + np.where(np.isfinite(t_hit), t_hit, 0.0)[:, None] * dp

    # Occlusion: the camera ray towards the point must hit it first.
    dist = np.linalg.norm(points, axis=1)
    dc = points / np.where(dist > 0, dist, 1.0)[:, None]
    t_cam = scene.intersect(np.zeros(3), dc)
    with np.errstate(divide="ignore", invalid="ignore"):
        cam_xy = rig.project_camera(points)

    traces = []
    for i in range(len(rows)):
        tr = DotTrace(int(rows[i]), int(cols[i]), (float(u[i]), float(v[i])))
        if not np.isfinite(t_hit[i]):
            tr.reason = "miss"
        elif points[i, 2] > scene.background_depth or points[i, 2] <= 0:
            tr.reason = "background"
        elif abs(t_cam[i] - dist[i]) > _OCCLUSION_TOL:
            tr.reason = "occluded"
            tr.point = points[i].copy()
        else:
            x, y = float(cam_xy[i, 0]), float(cam_xy[i, 1])
            tr.point = points[i].copy()
            tr.camera = (x, y)
            if not (-0.5 <= x < width - 0.5 and -0.5 <= y < height - 0.5):
                tr.reason = "outside"
            else:
                tr.footprint = footprint_pixels(x, y, pattern.dot_size, width, height)
                tr.visible = len(tr.footprint) > 0
                tr.reason = "" if tr.visible else "outside"
        traces.append(tr)
    return traces


def write_truth(traces: Sequence[DotTrace], pattern: PatternSpec, path) -> int:
    """Ground-truth sidecar CSV: one row per dot."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col", "symbol", "proj_x", "proj_y", "visible", "camera_x", "camera_y",
                "X", "Y", "Z", "reason"])
    nan = float("nan")
    for tr in traces:
        cx, cy = tr.camera if tr.camera is not None else (nan, nan)
        X, Y, Z = tr.point if tr.point is not None else (nan, nan, nan)
        w.writerow([tr.row, tr.col, int(pattern.grid.symbols[tr.row, tr.col]),
                    _g(tr.projector[0]), _g(tr.projector[1]), int(tr.visible),
                    _g(cx), _g(cy), _g(X), _g(Y), _g(Z), tr.reason])
    return atomic_write_text(path, buf.getvalue())


def read_truth(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({
            "row": int(r["row"]), "col": int(r["col"]), "symbol": int(r["symbol"]),
            "proj_x": float(r["proj_x"]), "proj_y": float(r["proj_y"]),
            "visible": r["visible"] == "1",
            "camera_x": float(r["camera_x"]), "camera_y": float(r["camera_y"]),
            "X": float(r["X"]), "Y": float(r["Y"]), "Z": float(r["Z"]),
            "reason": r["reason"],
        })
    return out


def _g(v: float) -> str:
    return format(float(v), ".10g")


# --- event generation -----------------------------------------------------------


@dataclass(frozen=True)
class SensorParams:
    """ATIS-like emission model. Times in µs, rates in events per second.

    Each illumination edge fires a burst of ``1 + Geom`` events (mean
    ``burst_mean``, at most ``burst_cap``). The first event arrives at
    ``edge + latency + N(0, jitter)``; later ones follow after
    ``refractory + Exp(burst_interval)``.
    """

    contrast_threshold: float = 0.15
    illumination_contrast: float = 1.0
    latency_us: float = 100.0
    jitter_us: float = 10.0
    refractory_us: float = 10.0
    burst_mean: float = 2.0
    burst_cap: int = 10
    burst_interval_us: float = 10.0
    bandwidth_eps: float = SENSOR_BANDWIDTH_EPS
    noise_rate: float = 0.0

    def __post_init__(self):
        for name in ("contrast_threshold", "illumination_contrast", "latency_us", "jitter_us",
                     "refractory_us", "burst_interval_us", "noise_rate"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.burst_mean < 1 or self.burst_cap < 1:
            raise ConfigurationError("burst_mean and burst_cap must be >= 1")
        if not self.bandwidth_eps > 0:
            raise ConfigurationError("bandwidth cap must be positive")

    @property
    def fires(self) -> bool:
        """Whether a projector edge changes illuminance enough to trigger events."""
        return self.illumination_contrast >= self.contrast_threshold


@dataclass
class SimulationResult:
    stream: EventStream
    generated: int
    dropped: int
    dropped_bins: int = 0


_BIN_US = 1000


def _pixel_events(
    edges_t: np.ndarray, edges_p: np.ndarray, params: SensorParams, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    n = len(edges_t)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int8)
    p_geom = 1.0 / params.burst_mean
    lengths = np.minimum(rng.geometric(p_geom, n), params.burst_cap)
    first = edges_t + params.latency_us + rng.normal(0.0, params.jitter_us, n)
    total = int(lengths.sum())
    gaps = params.refractory_us + rng.exponential(params.burst_interval_us, total)
    starts = np.cumsum(lengths) - lengths
    gaps[starts] = 0.0
    acc = np.cumsum(gaps)
    offset = acc - np.repeat(acc[starts], lengths)
    t = np.repeat(first, lengths) + offset
    t = np.maximum(np.floor(t + 0.5), 0).astype(np.int64)
    p = np.repeat(edges_p, lengths)
    order = np.argsort(t, kind="stable")
    t, p = t[order], p[order]
    refr = params.refractory_us
    if refr > 0 and len(t) > 1 and (np.diff(t) < refr).any():
        # Hold events that arrive while the pixel is still refractory.
        out = t.tolist()
        step = int(math.ceil(refr))
        for i in range(1, len(out)):
            if out[i] - out[i - 1] < refr:
                out[i] = out[i - 1] + step
        t = np.array(out, dtype=np.int64)
    return t, p


def generate_events(
    timeline: Timeline,
    traces: Sequence[DotTrace],
    params: SensorParams = SensorParams(),
    seed: int = 0,
    width: int = SENSOR_WIDTH,
    height: int = SENSOR_HEIGHT,
    duration_us: float | None = None,
    threads: int = 1,
) -> SimulationResult:
    """Emit the event stream for the lit pixels of every visible dot.

    Each pixel draws from its own generator seeded by ``(seed, x, y)``, so
    the output does not depend on ``threads``. Per pixel the edges of all
    covering dots are merged. Events over the bandwidth cap within a 1 ms bin
    are dropped (latest first) and counted.
    """
    duration = float(timeline.duration_us if duration_us is None else duration_us)
    pixel_dots: dict[int, list[int]] = {}
    for tr in traces:
        if not tr.visible:
            continue
        dot = tr.row * timeline.cols + tr.col
        for x, y in tr.footprint.tolist():
            pixel_dots.setdefault(y * width + x, []).append(dot)
    pixels = sorted(pixel_dots)

    def run(pix: int):
        dots = pixel_dots[pix]
        if len(dots) == 1:
            et, ep = timeline.times[dots[0]], timeline.pols[dots[0]]
        else:
            et = np.concatenate([timeline.times[d] for d in dots])
            ep = np.concatenate([timeline.pols[d] for d in dots])
            o = np.argsort(et, kind="stable")
            et, ep = et[o], ep[o]
        y, x = divmod(pix, width)
        rng = np.random.default_rng([seed, 1, x, y])
        return _pixel_events(et.astype(np.float64), ep, params, rng)

    if not params.fires:
        results = []
    elif threads > 1 and len(pixels) > 64:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, pixels, chunksize=64))
    else:
        results = [run(pix) for pix in pixels]

    ts, xs, ys, ps = [], [], [], []
    for pix, (t, p) in (zip(pixels, results) if params.fires else ()):
        y, x = divmod(pix, width)
        ts.append(t)
        ps.append(p)
        xs.append(np.full(len(t), x, dtype=np.int32))
        ys.append(np.full(len(t), y, dtype=np.int32))

    if params.noise_rate > 0 and duration > 0:
        rng = np.random.default_rng([seed, 2])
        n = int(rng.poisson(params.noise_rate * width * height * duration * 1e-6))
        ts.append(rng.integers(0, max(int(duration), 1), n, dtype=np.int64))
        xs.append(rng.integers(0, width, n).astype(np.int32))
        ys.append(rng.integers(0, height, n).astype(np.int32))
        ps.append(np.where(rng.random(n) < 0.5, 1, -1).astype(np.int8))

    if not ts:
        return SimulationResult(EventStream.empty(width, height), 0, 0)
    t = np.concatenate(ts)
    order = np.argsort(t, kind="stable")
    t = t[order]
    x = np.concatenate(xs)[order]
    y = np.concatenate(ys)[order]
    p = np.concatenate(ps)[order]
    generated = len(t)

    cap = int(params.bandwidth_eps * _BIN_US * 1e-6)
    bins = t // _BIN_US
    first_in_bin = np.searchsorted(bins, bins, side="left")
    rank = np.arange(len(t)) - first_in_bin
    keep = rank < cap
    dropped = int((~keep).sum())
    dropped_bins = int(len(np.unique(bins[~keep]))) if dropped else 0
    if dropped:
        t, x, y, p = t[keep], x[keep], y[keep], p[keep]
    return SimulationResult(EventStream(t, x, y, p, width, height), generated, dropped, dropped_bins)


def simulate(
    pattern: PatternSpec,
    scene: Scene,
    rig: RigCalibration,
    duration_us: float,
    params: SensorParams = SensorParams(),
    seed: int = 0,
    step_us: float = DMD_STEP_US,
    allow_fast_step: bool = False,
    threads: int = 1,
):
    """Full forward pass. Returns ``(SimulationResult, traces, timeline)``."""
    timeline = render_timeline(pattern, duration_us, step_us, allow_fast_step)
    traces = project_dots(pattern, scene, rig)
    result = generate_events(timeline, traces, params, seed, duration_us=duration_us,
                             threads=threads)
    return result, traces, timeline


def single_footprint_stream(
    signal: SignalSpec,
    duration_us: float,
    params: SensorParams = SensorParams(),
    seed: int = 0,
    center: tuple[int, int] = (100, 100),
    size: int = 3,
    step_us: float = 1.0,
) -> SimulationResult:
    """Events of one dot imaged on a ``size x size`` block, without a scene."""
    t, p = square_wave_edges(signal, duration_us, step_us)
    timeline = Timeline(int(math.ceil(duration_us)), step_us, 1, [t], [p])
    tr = DotTrace(0, 0, (0.0, 0.0), (float(center[0]), float(center[1])),
                  footprint_pixels(center[0], center[1], size, SENSOR_WIDTH, SENSOR_HEIGHT),
                  None, True)
    return generate_events(timeline, [tr], params, seed, duration_us=duration_us)

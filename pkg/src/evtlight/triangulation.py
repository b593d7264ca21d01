"""Camera/projector pinhole models, midpoint triangulation and PLY export.

The camera frame is the world frame. The projector pose maps projector
coordinates into it: ``X_cam = R @ X_proj + t``, so the projector's optical
centre sits at ``t``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from evtlight._io import atomic_write_text, read_json, write_json

PARALLEL_ANGLE_RAD = 1e-6


class CalibrationError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    """Rays are (nearly) parallel."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalized(self, u, v):
        """Inverse projection of pixel coordinates to the z=1 plane."""
        return (np.asarray(u, dtype=float) - self.cx) / self.fx, (
            np.asarray(v, dtype=float) - self.cy
        ) / self.fy


@dataclass(frozen=True)
class RigCalibration:
    camera: Intrinsics
    projector: Intrinsics
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.0, 0.0]))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        for name, K in (("camera", self.camera), ("projector", self.projector)):
            if K.fx == 0 or K.fy == 0:
                raise CalibrationError(f"{name} intrinsics are singular")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise CalibrationError("rotation must be orthonormal with det = +1")
        if not np.linalg.norm(t) > 0:
            raise CalibrationError("baseline must be non-zero")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.translation))

    @property
    def projector_center(self) -> np.ndarray:
        return self.translation

    def swapped(self) -> "RigCalibration":
        """Same rig with the roles of camera and projector exchanged."""
        R_inv = self.rotation.T
        return RigCalibration(self.projector, self.camera, R_inv, -R_inv @ self.translation)

    # --- single-view models -------------------------------------------------

    def camera_ray(self, u, v):
        return back_project(self.camera, u, v)

    def projector_ray(self, u, v):
        return back_project(self.projector, u, v, self.rotation, self.translation)

    def project_camera(self, points) -> np.ndarray:
        return project(self.camera, points)

    def project_projector(self, points) -> np.ndarray:
        return project(self.projector, points, self.rotation, self.translation)


def _ray_directions(K: Intrinsics, u, v, rotation=None) -> np.ndarray:
    xn, yn = K.normalized(u, v)
    d = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    if rotation is not None:
        d = d @ np.asarray(rotation).T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def back_project(K: Intrinsics, u, v, rotation=None, translation=None):
    """Ray ``(origin, unit direction)`` through pixel ``(u, v)``, in camera-frame coordinates.

    ``rotation``/``translation`` give the model's pose in the camera frame
    (identity/zero for the camera itself). Works on scalars or arrays.
    """
    d = _ray_directions(K, u, v, rotation)
    origin = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
    return np.broadcast_to(origin, d.shape).copy(), d


def project(K: Intrinsics, points, rotation=None, translation=None) -> np.ndarray:
    """Pixel coordinates of camera-frame ``points`` (shape ``(..., 3)``) in a posed view."""
    P = np.asarray(points, dtype=float)
    if translation is not None:
        P = P - np.asarray(translation)
    if rotation is not None:
        P = P @ np.asarray(rotation)  # R^T applied to row vectors
    z = P[..., 2]
    return np.stack([K.fx * P[..., 0] / z + K.cx, K.fy * P[..., 1] / z + K.cy], axis=-1)


@dataclass(frozen=True)
class Triangulated:
    point: np.ndarray
    gap: float
    depth_camera: float
    depth_projector: float


def midpoint(o1, d1, o2, d2):
    """Closest-approach midpoint of ray batches.

    Returns ``(points, gaps, s, u, sin_angle)`` where ``s``/``u`` are the ray
    parameters of the two feet of the common perpendicular.
    """
    o1, d1, o2, d2 = (np.asarray(a, dtype=float) for a in (o1, d1, o2, d2))
    w = o1 - o2
    a = np.einsum("...i,...i", d1, d1)
    b = np.einsum("...i,...i", d1, d2)
    c = np.einsum("...i,...i", d2, d2)
    d = np.einsum("...i,...i", d1, w)
    e = np.einsum("...i,...i", d2, w)
    cross = np.cross(d1, d2)
    sin_angle = np.linalg.norm(cross, axis=-1) / np.sqrt(a * c)
    denom = a * c - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (b * e - c * d) / denom
        u = (a * e - b * d) / denom
    p1 = o1 + s[..., None] * d1
    p2 = o2 + u[..., None] * d2
    return 0.5 * (p1 + p2), np.linalg.norm(p1 - p2, axis=-1), s, u, sin_angle


def triangulate(camera_pt, projector_pt, rig: RigCalibration) -> Triangulated:
    """Midpoint triangulation of one camera/projector correspondence.

    Raises:
        DegenerateGeometryError: rays closer than 1e-6 rad to parallel.
        ValueError: the point lies behind either view.
    """
    oc, dc = rig.camera_ray(*camera_pt)
    op, dp = rig.projector_ray(*projector_pt)
    pts, gaps, s, u, sin_angle = midpoint(oc, dc, op, dp)
    if not sin_angle > math.sin(PARALLEL_ANGLE_RAD):
        raise DegenerateGeometryError("camera and projector rays are parallel")
    if s <= 0 or u <= 0 or pts[2] <= 0:
        raise ValueError(f"negative depth (camera s={float(s):.4g}, projector u={float(u):.4g})")
    return Triangulated(pts, float(gaps), float(s), float(u))


def triangulate_many(camera_pts, projector_pts, rig: RigCalibration):
    """Vectorized triangulation. Returns ``(points, gaps, valid)``.

    ``valid`` is False for near-parallel rays and for points behind a view.
    """
    cam = np.asarray(camera_pts, dtype=float).reshape(-1, 2)
    proj = np.asarray(projector_pts, dtype=float).reshape(-1, 2)
    oc, dc = rig.camera_ray(cam[:, 0], cam[:, 1])
    op, dp = rig.projector_ray(proj[:, 0], proj[:, 1])
    pts, gaps, s, u, sin_angle = midpoint(oc, dc, op, dp)
    valid = (sin_angle > math.sin(PARALLEL_ANGLE_RAD)) & (s > 0) & (u > 0) & (pts[:, 2] > 0)
    return pts, gaps, valid


def intersect_projector_column(camera_pts, projector_u, rig: RigCalibration):
    """Intersect camera rays with the light planes of projector columns ``u``.

    Used by the phase method, which recovers only the projector column.
    Returns ``(points, valid)``.
    """
    cam = np.asarray(camera_pts, dtype=float).reshape(-1, 2)
    u = np.asarray(projector_u, dtype=float).reshape(-1)
    oc, dc = rig.camera_ray(cam[:, 0], cam[:, 1])
    d0 = _ray_directions(rig.projector, u, np.zeros_like(u), rig.rotation)
    d1 = _ray_directions(rig.projector, u, np.ones_like(u), rig.rotation)
    normal = np.cross(d0, d1)
    num = np.einsum("ij,ij->i", normal, rig.translation - oc)
    den = np.einsum("ij,ij->i", normal, dc)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = num / den
    pts = oc + s[:, None] * dc
    valid = np.isfinite(s) & (s > 0) & (np.abs(den) > 1e-12)
    return pts, valid


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) metres, camera frame
    gaps: np.ndarray
    provenance: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class CloudSummary:
    n_input: int
    n_accepted: int
    n_rejected_gap: int
    n_rejected_depth: int
    depth_min: float = float("nan")
    depth_max: float = float("nan")
    depth_mean: float = float("nan")
    depth_median: float = float("nan")
    depth_std: float = float("nan")

    def as_rows(self) -> list[tuple[str, float]]:
        return [(k, getattr(self, k)) for k in self.__dataclass_fields__]


def build_cloud(correspondences: Sequence, rig: RigCalibration, max_gap: float = 0.01):
    """Triangulate correspondences, keeping points with ``Z > 0`` and ``gap <= max_gap``.

    ``correspondences`` are objects with ``camera_point`` and ``projector_point``.
    Returns ``(PointCloud, CloudSummary)``.
    """
    n = len(correspondences)
    if n == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros(0), []), CloudSummary(0, 0, 0, 0)
    cam = np.array([c.camera_point for c in correspondences], dtype=float)
    proj = np.array([c.projector_point for c in correspondences], dtype=float)
    pts, gaps, valid = triangulate_many(cam, proj, rig)
    gap_ok = gaps <= max_gap
    keep = valid & gap_ok
    cloud = PointCloud(pts[keep], gaps[keep], [c for c, k in zip(correspondences, keep) if k])
    summary = CloudSummary(n, int(keep.sum()), int((valid & ~gap_ok).sum()), int((~valid).sum()))
    if keep.any():
        z = cloud.points[:, 2]
        summary.depth_min = float(z.min())
        summary.depth_max = float(z.max())
        summary.depth_mean = float(z.mean())
        summary.depth_median = float(np.median(z))
        summary.depth_std = float(z.std())
    return cloud, summary


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def export_ply(cloud: PointCloud | np.ndarray, path: str | os.PathLike) -> int:
    """Write an ASCII PLY of the cloud's vertices; returns the byte count."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        "comment evtlight point cloud, camera frame, metres",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines.extend(" ".join(_fmt(c) for c in p) for p in points.tolist())
    try:
        return atomic_write_text(path, "\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write PLY to {path}: {exc}") from exc


def read_ply_vertices(path: str | os.PathLike) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    count = 0
    end = 0
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            count = int(line.split()[2])
        if line == "end_header":
            end = i + 1
            break
    body = [list(map(float, ln.split())) for ln in lines[end : end + count]]
    return np.array(body, dtype=float).reshape(-1, 3)


# --- calibration file --------------------------------------------------------


def calibration_to_dict(rig: RigCalibration) -> dict:
    cam, proj = rig.camera, rig.projector
    return {
        "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "distortion": []},
        "projector": {
            "fx": proj.fx,
            "fy": proj.fy,
            "cx": proj.cx,
            "cy": proj.cy,
            "rotation": rig.rotation.reshape(-1).tolist(),
            "translation": rig.translation.tolist(),
            "distortion": [],
        },
    }


def calibration_from_dict(doc: dict) -> RigCalibration:
    try:
        cam = doc["camera"]
        proj = doc["projector"]
        if cam.get("distortion") or proj.get("distortion"):
            raise CalibrationError("lens distortion terms are not supported")
        return RigCalibration(
            Intrinsics(float(cam["fx"]), float(cam["fy"]), float(cam["cx"]), float(cam["cy"])),
            Intrinsics(float(proj["fx"]), float(proj["fy"]), float(proj["cx"]), float(proj["cy"])),
            np.asarray(proj.get("rotation", np.eye(3).reshape(-1)), dtype=float).reshape(3, 3),
            np.asarray(proj["translation"], dtype=float),
        )
    except (KeyError, TypeError) as exc:
        raise CalibrationError(f"bad calibration document: {exc}") from exc


def save_calibration(rig: RigCalibration, path: str | os.PathLike) -> int:
    return write_json(path, calibration_to_dict(rig))


def load_calibration(path: str | os.PathLike) -> RigCalibration:
    return calibration_from_dict(read_json(path))


def rotation_from_euler(rx: float = 0.0, ry: float = 0.0, rz: float = 0.0) -> np.ndarray:
    """Rotation ``Rz @ Ry @ Rx`` from angles in radians."""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    R = Rz @ Ry @ Rx
    # Re-orthonormalize so the 1e-9 check holds after trig round-off.
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt

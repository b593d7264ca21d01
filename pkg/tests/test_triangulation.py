import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evtlight.triangulation import (
    CalibrationError,
    DegenerateGeometryError,
    Intrinsics,
    PointCloud,
    RigCalibration,
    back_project,
    build_cloud,
    export_ply,
    intersect_projector_column,
    load_calibration,
    read_ply_vertices,
    rotation_from_euler,
    save_calibration,
    triangulate,
    triangulate_many,
)
from evtlight.correspondence import Correspondence
from evtlight.pipeline import histogram_modes


def unit_rig(baseline=0.2, f=1.0):
    K = Intrinsics(f, f, 0.0, 0.0)
    return RigCalibration(K, K, np.eye(3), np.array([baseline, 0.0, 0.0]))


def tilted_rig():
    return RigCalibration(Intrinsics(310, 305, 150.3, 121.1), Intrinsics(295, 300, 210.0, 118.2),
                          rotation_from_euler(0.01, -0.08, 0.02), np.array([0.2, 0.01, -0.005]))


def _corr(cam, proj):
    return Correspondence(tuple(cam), tuple(proj), (), 0, (0, 0))


# --- back projection ------------------------------------------------------------------


def test_principal_point_ray_is_optical_axis():
    o, d = back_project(Intrinsics(300, 300, 151.5, 119.5), 151.5, 119.5)
    assert np.allclose(o, 0) and np.allclose(d, [0, 0, 1])


def test_unit_focal_one_right():
    _, d = back_project(Intrinsics(1, 1, 0, 0), 1.0, 0.0)
    assert np.allclose(d, np.array([1, 0, 1]) / np.sqrt(2))


def test_project_back_project_round_trip():
    rig = tilted_rig()
    rng = np.random.default_rng(0)
    P = np.column_stack([rng.uniform(-0.4, 0.4, 1000), rng.uniform(-0.3, 0.3, 1000),
                         rng.uniform(0.5, 2.0, 1000)])
    for proj, ray in ((rig.project_camera, rig.camera_ray),
                      (rig.project_projector, rig.projector_ray)):
        uv = proj(P)
        o, d = ray(uv[:, 0], uv[:, 1])
        w = P - o
        dist = np.linalg.norm(w - (w * d).sum(axis=1, keepdims=True) * d, axis=1)
        assert dist.max() < 1e-9


# --- triangulation ----------------------------------------------------------------------


def test_point_on_axis_recovered():
    rig = tilted_rig()
    P = np.array([0.0, 0.0, 1.0])
    tri = triangulate(rig.project_camera(P), rig.project_projector(P), rig)
    assert np.linalg.norm(tri.point - P) < 1e-9
    assert tri.gap < 1e-12


def test_rectified_disparity_gives_depth():
    tri = triangulate((0.2, 0.0), (0.0, 0.0), unit_rig())
    assert tri.point[2] == pytest.approx(1.0)


@given(st.floats(0.05, 5.0), st.floats(0.05, 2.0), st.floats(-1.0, 1.0))
def test_baseline_scaling(s, d, x):
    z1 = triangulate((x + d, 0.1), (x, 0.1), unit_rig(0.2)).point[2]
    zs = triangulate((x + d, 0.1), (x, 0.1), unit_rig(0.2 * s)).point[2]
    assert zs == pytest.approx(s * z1, rel=1e-9)


def test_swap_symmetry():
    rig = tilted_rig()
    sw = rig.swapped()
    rng = np.random.default_rng(1)
    for _ in range(200):
        P = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2), rng.uniform(0.6, 1.8)])
        c, p = rig.project_camera(P), rig.project_projector(P)
        a = triangulate(c, p, rig).point
        b_proj_frame = triangulate(p, c, sw).point
        b = rig.rotation @ b_proj_frame + rig.translation
        assert np.linalg.norm(a - b) < 1e-9


def test_parallel_rays_degenerate():
    with pytest.raises(DegenerateGeometryError):
        triangulate((0.0, 0.0), (0.0, 0.0), unit_rig())


def test_negative_depth_rejected():
    with pytest.raises(ValueError, match="negative depth"):
        triangulate((0.0, 0.0), (0.2, 0.0), unit_rig())
    _, _, valid = triangulate_many([(0.0, 0.0), (0.2, 0.0)], [(0.2, 0.0), (0.0, 0.0)], unit_rig())
    assert valid.tolist() == [False, True]


def test_many_exact_points():
    rig = tilted_rig()
    rng = np.random.default_rng(2)
    n = 100_000
    P = np.column_stack([rng.uniform(-0.5, 0.5, n), rng.uniform(-0.4, 0.4, n),
                         rng.uniform(0.4, 3.0, n)])
    pts, gaps, valid = triangulate_many(rig.project_camera(P), rig.project_projector(P), rig)
    assert valid.all()
    assert np.linalg.norm(pts - P, axis=1).max() < 1e-9
    assert gaps.max() < 1e-12


def test_noise_propagation_first_order():
    f, b, Z, sigma = 600.0, 0.2, 1.0, 0.5
    rig = unit_rig(b, f)
    rng = np.random.default_rng(3)
    n = 20_000
    P = np.column_stack([rng.uniform(-0.1, 0.1, n), rng.uniform(-0.1, 0.1, n), np.full(n, Z)])
    cam = rig.project_camera(P)
    cam[:, 0] += rng.normal(0, sigma, n)
    pts, _, valid = triangulate_many(cam, rig.project_projector(P), rig)
    rms = np.sqrt(np.mean((pts[valid, 2] - Z) ** 2))
    predicted = Z**2 * sigma / (f * b)
    assert predicted / 1.5 < rms < predicted * 1.5


def test_projector_column_plane():
    rig = tilted_rig()
    rng = np.random.default_rng(4)
    P = np.column_stack([rng.uniform(-0.3, 0.3, 500), rng.uniform(-0.2, 0.2, 500),
                         rng.uniform(0.7, 1.5, 500)])
    uv = rig.project_projector(P)
    pts, valid = intersect_projector_column(rig.project_camera(P), uv[:, 0], rig)
    assert valid.all()
    assert np.abs(rig.project_projector(pts)[:, 0] - uv[:, 0]).max() < 1e-6


# --- clouds ------------------------------------------------------------------------------


def test_empty_cloud():
    cloud, summary = build_cloud([], unit_rig())
    assert len(cloud) == 0 and summary.n_input == 0


def test_plane_cloud():
    rig = tilted_rig()
    xs, ys = np.meshgrid(np.linspace(-0.3, 0.3, 20), np.linspace(-0.2, 0.2, 15))
    P = np.column_stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    corrs = [_corr(c, p) for c, p in zip(rig.project_camera(P), rig.project_projector(P))]
    cloud, summary = build_cloud(corrs, rig)
    assert summary.n_accepted == 300
    assert np.abs(cloud.points[:, 2] - 1.0).max() < 1e-6
    assert cloud.provenance[5] is corrs[5]


def test_cloud_rejects_gap_and_depth():
    rig = unit_rig()
    corrs = [_corr((0.2, 0.0), (0.0, 0.0)), _corr((0.2, 0.05), (0.0, 0.0)),
             _corr((0.0, 0.0), (0.2, 0.0))]
    cloud, summary = build_cloud(corrs, rig, max_gap=0.01)
    assert (summary.n_accepted, summary.n_rejected_gap, summary.n_rejected_depth) == (1, 1, 1)
    assert np.all(cloud.gaps <= 0.01)


def test_bimodal_two_planes():
    rig = tilted_rig()
    rng = np.random.default_rng(5)
    z = np.where(rng.random(400) < 0.5, 0.8, 1.0)
    P = np.column_stack([rng.uniform(-0.2, 0.2, 400), rng.uniform(-0.2, 0.2, 400), z])
    corrs = [_corr(c, p) for c, p in zip(rig.project_camera(P), rig.project_projector(P))]
    cloud, _ = build_cloud(corrs, rig)
    modes = histogram_modes(cloud.points[:, 2])
    assert len(modes) == 2
    assert modes == pytest.approx([0.8, 1.0], abs=0.01)


# --- files ---------------------------------------------------------------------------------


def test_ply_empty_and_single(tmp_path):
    export_ply(PointCloud(np.zeros((0, 3)), np.zeros(0), []), tmp_path / "e.ply")
    text = (tmp_path / "e.ply").read_text().splitlines()
    assert "element vertex 0" in text and text[-1] == "end_header"
    export_ply(np.array([[0.0, 0.0, 1.0]]), tmp_path / "one.ply")
    assert (tmp_path / "one.ply").read_text().splitlines()[-1] == "0 0 1"


def test_ply_count_matches_body(tmp_path):
    pts = np.random.default_rng(6).normal(size=(600, 3))
    export_ply(pts, tmp_path / "c.ply")
    lines = (tmp_path / "c.ply").read_text().splitlines()
    end = lines.index("end_header")
    assert "element vertex 600" in lines and len(lines) - end - 1 == 600
    assert np.allclose(read_ply_vertices(tmp_path / "c.ply"), pts, rtol=1e-8)


def test_ply_io_error(tmp_path):
    with pytest.raises(OSError, match="nowhere"):
        export_ply(np.zeros((1, 3)), tmp_path / "nowhere" / "x.ply")


def test_calibration_round_trip(tmp_path):
    rig = tilted_rig()
    save_calibration(rig, tmp_path / "r.cal")
    back = load_calibration(tmp_path / "r.cal")
    assert back.camera == rig.camera and back.projector == rig.projector
    assert np.array_equal(back.rotation, rig.rotation)
    assert np.array_equal(back.translation, rig.translation)


def test_calibration_validation():
    K = Intrinsics(1, 1, 0, 0)
    with pytest.raises(CalibrationError):
        RigCalibration(K, K, np.eye(3) * 1.01, np.array([0.2, 0, 0]))
    with pytest.raises(CalibrationError):
        RigCalibration(K, K, np.diag([1.0, 1.0, -1.0]), np.array([0.2, 0, 0]))
    with pytest.raises(CalibrationError):
        RigCalibration(K, K, np.eye(3), np.zeros(3))
    with pytest.raises(CalibrationError):
        RigCalibration(Intrinsics(0, 1, 0, 0), K)


def test_distortion_terms_rejected(tmp_path):
    import json

    from evtlight.triangulation import calibration_from_dict, calibration_to_dict

    doc = calibration_to_dict(unit_rig())
    assert doc["camera"]["distortion"] == []
    doc["camera"]["distortion"] = [0.1]
    with pytest.raises(CalibrationError):
        calibration_from_dict(json.loads(json.dumps(doc)))

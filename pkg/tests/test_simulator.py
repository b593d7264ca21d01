import numpy as np
import pytest

from evtlight.events import read_events, validate_stream, write_events
from evtlight.pattern import PatternSpec, SignalSpec, SymbolGrid, assign_signals, generate_psm
from evtlight.pattern.signals import square_wave_edges
from evtlight.pipeline import box_on_plane_scene
from evtlight.simulator import (
    Box,
    DotTrace,
    Plane,
    Scene,
    SensorParams,
    Sphere,
    Timeline,
    default_rig,
    footprint_pixels,
    generate_events,
    load_scene,
    plane_scene,
    project_dots,
    read_truth,
    render_timeline,
    save_scene,
    simulate,
    single_footprint_stream,
    write_truth,
)
from evtlight.triangulation import Intrinsics, RigCalibration

EXACT = SensorParams(jitter_us=0, burst_mean=1, refractory_us=0)


@pytest.fixture(scope="module")
def psm_pattern():
    return assign_signals(generate_psm(20, 30, 4, (3, 3), 2, 42), seed=7)


def _one_pixel_trace(x=10, y=20):
    return DotTrace(0, 0, (0.0, 0.0), (float(x), float(y)), np.array([[x, y]]), None, True)


def _lattice_pattern(rows=3, cols=3, pitch=1):
    grid = SymbolGrid(np.zeros((rows, cols), dtype=int), k=1, window=(1, 1))
    return PatternSpec(grid, {0: SignalSpec(20, 0.5)}, np.zeros((rows, cols)),
                       dot_pitch=pitch, dot_size=1, origin=(0.0, 0.0))


def _unit_rig(baseline=0.2):
    cam = Intrinsics(1, 1, 0, 0)
    return RigCalibration(cam, cam, np.eye(3), np.array([baseline, 0.0, 0.0]))


# --- timelines -------------------------------------------------------------------


def test_render_timeline_20hz_edges():
    pat = _lattice_pattern(1, 1)
    tl = render_timeline(pat, 100_000)
    t, p = tl.edges(0, 0)
    assert p.tolist() == [1, -1, 1, -1]
    assert np.all(np.abs(t - np.array([0, 25_000, 50_000, 75_000])) <= 350)


def test_render_timeline_refuses_fast_step(psm_pattern):
    with pytest.raises(ValueError):
        render_timeline(psm_pattern, 100_000, step_us=100)
    assert len(render_timeline(psm_pattern, 100_000, 100, allow_fast_step=True)) == 600


def test_timeline_quantization_bound():
    sig = SignalSpec(33.0, 0.37, 0.123)
    exact_t, _ = square_wave_edges(sig, 300_000, 1)
    q_t, _ = square_wave_edges(sig, 300_000, 700)
    n = min(len(exact_t), len(q_t))
    assert np.all(np.abs(q_t[:n] - exact_t[:n]) <= 350 + 1)
    assert np.all(q_t % 700 == 0)


# --- projection --------------------------------------------------------------------


@pytest.mark.parametrize("depth,disparity", [(1.0, 0.2), (2.0, 0.1)])
def test_plane_disparity_unit_focal(depth, disparity):
    traces = project_dots(_lattice_pattern(), plane_scene(depth), _unit_rig())
    for tr in traces:
        assert tr.camera is not None
        assert tr.camera[0] - tr.projector[0] == pytest.approx(disparity, abs=1e-12)
        assert tr.camera[1] == pytest.approx(tr.projector[1], abs=1e-12)
        assert tr.depth == pytest.approx(depth)


def test_default_rig_overlaps_at_one_metre(psm_pattern):
    traces = project_dots(psm_pattern, plane_scene(1.0), default_rig())
    assert all(tr.visible for tr in traces)
    for tr in traces:
        assert tr.camera == pytest.approx(tr.projector, abs=1e-9)
        assert len(tr.footprint) == 9


def test_box_gives_two_disparity_populations(psm_pattern):
    rig = default_rig()
    traces = project_dots(psm_pattern, box_on_plane_scene(psm_pattern, rig), rig)
    vis = [tr for tr in traces if tr.visible]
    disp = np.array([tr.camera[0] - tr.projector[0] for tr in vis])
    depth = np.array([tr.depth for tr in vis])
    # Camera x = u - 60 + 60/Z for the default rig.
    assert set(np.round(disp, 6)) == {0.0, 15.0}
    assert np.allclose(depth[np.isclose(disp, 15.0)], 0.8)
    assert np.allclose(depth[np.isclose(disp, 0.0)], 1.0)
    box = {(tr.row, tr.col) for tr in vis if np.isclose(tr.depth, 0.8)}
    assert box == {(r, c) for r in range(8, 13) for c in range(9, 19)}
    # Plane dots just right of the box are hidden from the camera.
    hidden = [tr for tr in traces if tr.reason == "occluded"]
    assert hidden and all(19 <= tr.col for tr in hidden)


def test_missing_scene_marks_absent(psm_pattern):
    traces = project_dots(psm_pattern, Scene((), 5.0), default_rig())
    assert {tr.reason for tr in traces} == {"miss"}
    far = project_dots(psm_pattern, plane_scene(8.0, background_depth=5.0), default_rig())
    assert {tr.reason for tr in far} == {"background"}


def test_sphere_and_box_intersections():
    o = np.zeros((1, 3))
    d = np.array([[0.0, 0.0, 1.0]])
    assert Sphere((0, 0, 2), 0.5).intersect(o, d)[0] == pytest.approx(1.5)
    assert Box((0, 0, 2), (1, 1, 1)).intersect(o, d)[0] == pytest.approx(1.5)
    assert Plane((0, 0, 1), 3).intersect(o, d)[0] == pytest.approx(3)
    assert np.isinf(Sphere((5, 0, 2), 0.5).intersect(o, d)[0])


def test_footprint_nearest_pixel_and_clip():
    fp = footprint_pixels(10.2, 10.6, 3, 304, 240)
    assert sorted(map(tuple, fp.tolist())) == [(x, y) for x in (9, 10, 11) for y in (10, 11, 12)]
    assert len(footprint_pixels(0.0, 0.0, 3, 304, 240)) == 4


def test_scene_and_truth_files(tmp_path, psm_pattern):
    rig = default_rig()
    scene = box_on_plane_scene(psm_pattern, rig)
    save_scene(scene, tmp_path / "s.scn")
    assert load_scene(tmp_path / "s.scn") == scene
    traces = project_dots(psm_pattern, scene, rig)
    write_truth(traces, psm_pattern, tmp_path / "t.csv")
    rows = read_truth(tmp_path / "t.csv")
    assert len(rows) == 600
    assert sum(r["visible"] for r in rows) == sum(tr.visible for tr in traces)


# --- event generation ------------------------------------------------------------------


def test_single_edge_exact_event():
    tl = Timeline(10_000, 1, 1, [np.array([5000])], [np.array([1], dtype=np.int8)])
    params = SensorParams(latency_us=100, jitter_us=0, burst_mean=1)
    s = generate_events(tl, [_one_pixel_trace()], params).stream
    assert len(s) == 1
    assert (s.t[0], s.x[0], s.y[0], s.p[0]) == (5100, 10, 20, 1)


def test_zero_dots_zero_noise_is_empty():
    tl = Timeline(10_000, 1, 1, [], [])
    assert len(generate_events(tl, [], SensorParams()).stream) == 0


def test_noiseless_stream_is_shifted_schedule():
    sig = SignalSpec(200, 0.3)
    res = single_footprint_stream(sig, 50_000, EXACT, size=1)
    t, p = square_wave_edges(sig, 50_000, 1)
    assert res.stream.t.tolist() == (t + 100).tolist()
    assert res.stream.p.tolist() == p.tolist()
    again = single_footprint_stream(sig, 50_000, EXACT, size=1, seed=99)
    assert again.stream == res.stream


def test_event_count_scales_with_area():
    sig = SignalSpec(100, 0.5)
    n1 = len(single_footprint_stream(sig, 100_000, EXACT, size=1).stream)
    n3 = len(single_footprint_stream(sig, 100_000, EXACT, size=3).stream)
    n5 = len(single_footprint_stream(sig, 100_000, EXACT, size=5).stream)
    assert n3 == 9 * n1 and n5 == 25 * n1


def test_deterministic_and_thread_independent(psm_pattern):
    rig = default_rig()
    scene = box_on_plane_scene(psm_pattern, rig)
    a, _, _ = simulate(psm_pattern, scene, rig, 200_000, seed=3)
    b, _, _ = simulate(psm_pattern, scene, rig, 200_000, seed=3, threads=4)
    c, _, _ = simulate(psm_pattern, scene, rig, 200_000, seed=4)
    assert a.stream == b.stream
    assert a.stream != c.stream
    assert validate_stream(a.stream).ok


def test_every_edge_fires_and_respects_refractory():
    sig = SignalSpec(1000, 0.5)
    params = SensorParams(refractory_us=15)
    res = single_footprint_stream(sig, 100_000, params, seed=1, size=1)
    t, p = res.stream.t, res.stream.p
    assert np.diff(t).min() >= 15
    # Polarity runs equal the number of edges: every edge fired at least once.
    runs = 1 + int((np.diff(p) != 0).sum())
    assert runs == len(square_wave_edges(sig, 100_000, 1)[0])


def test_burst_lengths_follow_geometric():
    sig = SignalSpec(1000, 0.5)
    params = SensorParams(burst_mean=2, burst_cap=10)
    res = single_footprint_stream(sig, 500_000, params, seed=11)
    s = res.stream
    lengths = []
    for pix in np.unique(s.pixel_index):
        p = s.p[s.pixel_index == pix]
        change = np.flatnonzero(np.diff(p) != 0) + 1
        lengths.extend(np.diff(np.concatenate([[0], change, [len(p)]])).tolist())
    lengths = np.array(lengths)
    n = len(lengths)
    assert n == 9 * 1000
    q = 0.5
    for k in range(1, 6):
        expected = n * q * (1 - q) ** (k - 1)
        sigma = np.sqrt(n * q * (1 - q) ** (k - 1) * (1 - q * (1 - q) ** (k - 1)))
        assert abs((lengths == k).sum() - expected) < 3 * sigma
    assert lengths.max() <= 10
    assert lengths.mean() == pytest.approx(2.0, rel=0.05)


def test_bandwidth_cap_drops_and_reports():
    sig = SignalSpec(1000, 0.5)
    params = SensorParams(bandwidth_eps=5000)  # 5 events per 1 ms bin
    res = single_footprint_stream(sig, 20_000, params, seed=0)
    assert res.dropped > 0 and res.dropped_bins > 0
    assert res.generated == len(res.stream) + res.dropped
    counts = np.bincount(res.stream.t // 1000)
    assert counts.max() <= 5


def test_no_drops_for_default_scene(psm_pattern):
    rig = default_rig()
    res, _, _ = simulate(psm_pattern, plane_scene(1.0), rig, 200_000, seed=0)
    assert res.dropped == 0


def test_noise_events_added_at_rate():
    tl = Timeline(1_000_000, 1, 1, [], [])
    res = generate_events(tl, [], SensorParams(noise_rate=0.1), duration_us=1_000_000)
    expected = 0.1 * 304 * 240
    assert abs(len(res.stream) - expected) < 4 * np.sqrt(expected)


def test_subthreshold_contrast_emits_nothing():
    params = SensorParams(contrast_threshold=0.5, illumination_contrast=0.2)
    assert len(single_footprint_stream(SignalSpec(100, 0.5), 50_000, params).stream) == 0


def test_simulated_stream_round_trips(tmp_path, psm_pattern):
    rig = default_rig()
    res, _, _ = simulate(psm_pattern, plane_scene(1.0), rig, 100_000, seed=2)
    write_events(res.stream, tmp_path / "e.evtb")
    assert read_events(tmp_path / "e.evtb") == res.stream

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evtlight.events import (
    Event,
    EventFormatError,
    EventStream,
    read_events,
    validate_stream,
    write_events,
)


def test_empty_stream_is_valid():
    assert validate_stream(EventStream.empty()).ok


def test_non_monotonic_reported_with_index():
    s = EventStream([5, 3], [0, 0], [0, 0], [1, 1])
    rep = validate_stream(s)
    assert [v.message for v in rep.violations] == ["non-monotonic at index 1"]


def test_out_of_bounds_x():
    s = EventStream([0], [304], [0], [1])
    rep = validate_stream(s)
    assert len(rep.violations) == 1 and rep.violations[0].kind == "bounds"
    assert "index 0" in rep.violations[0].message


def test_every_violation_listed_in_index_order():
    s = EventStream([10, 5, 6, 7], [0, 400, 1, 1], [0, 0, 0, 999], [1, 1, 0, -1])
    kinds = [(v.index, v.kind) for v in validate_stream(s).violations]
    assert kinds == [(1, "order"), (1, "bounds"), (2, "polarity"), (3, "bounds")]


def test_validate_never_raises_on_garbage():
    rng = np.random.default_rng(0)
    n = 500
    s = EventStream(rng.integers(-10, 10, n), rng.integers(-5, 400, n),
                    rng.integers(-5, 300, n), rng.integers(-3, 3, n))
    rep = validate_stream(s)
    assert not rep.ok


def test_read_single_text_record(tmp_path):
    path = tmp_path / "one.evt1"
    path.write_text("# evt1 304 240\n100,10,20,1\n")
    s = read_events(path)
    assert len(s) == 1
    assert s[0] == Event(x=10, y=20, t=100, p=1)


def test_read_zero_records(tmp_path):
    path = tmp_path / "zero.evt1"
    path.write_text("# evt1 304 240\n")
    assert len(read_events(path)) == 0


def test_write_empty_is_header_only(tmp_path):
    path = tmp_path / "e.evt1"
    assert write_events(EventStream.empty(), path) == 0
    assert path.read_text() == "# evt1 304 240\n"


def test_write_three_in_order(tmp_path):
    path = tmp_path / "three.evt1"
    s = EventStream([1, 2, 2], [0, 1, 2], [3, 4, 5], [1, -1, 1])
    assert write_events(s, path) == 3
    assert path.read_text().splitlines()[1:] == ["1,0,3,1", "2,1,4,-1", "2,2,5,1"]


def test_binary_layout(tmp_path):
    path = tmp_path / "b.evtb"
    write_events(EventStream([7], [1], [2], [-1], 16, 8), path)
    raw = path.read_bytes()
    assert raw == b"EVT1" + bytes([16, 0, 8, 0]) + (7).to_bytes(8, "little") + bytes(
        [1, 0, 2, 0, 0xFF])


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.evt1"
    path.write_text("# evt1 304 240\n1,2,3,1\n2,2,x,1\n")
    with pytest.raises(EventFormatError, match=":3:"):
        read_events(path)


def test_truncated_binary_reports_offset(tmp_path):
    path = tmp_path / "t.evtb"
    write_events(EventStream([1, 2], [0, 0], [0, 0], [1, -1]), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(EventFormatError, match="offset 21"):
        read_events(path)


def test_non_monotonic_file_rejected(tmp_path):
    path = tmp_path / "nm.evt1"
    path.write_text("# evt1 304 240\n5,0,0,1\n3,0,0,1\n")
    with pytest.raises(EventFormatError, match="non-monotonic at index 1"):
        read_events(path)


def test_write_invalid_stream_refused(tmp_path):
    with pytest.raises(EventFormatError):
        write_events(EventStream([2, 1], [0, 0], [0, 0], [1, 1]), tmp_path / "x.evt1")


def test_io_error_names_path(tmp_path):
    target = tmp_path / "missing_dir" / "x.evt1"
    with pytest.raises(OSError, match="missing_dir"):
        write_events(EventStream.empty(), target)


def test_header_geometry_overrides_default(tmp_path):
    path = tmp_path / "g.evt1"
    path.write_text("# evt1 32 16\n0,31,15,1\n")
    s = read_events(path)
    assert s.geometry == (32, 16)


def test_concatenate_is_stable():
    a = EventStream([1, 3], [0, 0], [0, 0], [1, 1])
    b = EventStream([1, 2], [5, 5], [0, 0], [-1, -1])
    c = EventStream.concatenate([a, b])
    assert c.t.tolist() == [1, 1, 2, 3]
    assert c.x.tolist() == [0, 5, 5, 0]


def test_arrays_are_read_only():
    s = EventStream([1], [0], [0], [1])
    with pytest.raises(ValueError):
        s.t[0] = 5


events_strategy = st.lists(
    st.tuples(st.integers(0, 2**40), st.integers(0, 303), st.integers(0, 239),
              st.sampled_from([1, -1])),
    max_size=200,
)


@given(events_strategy, st.booleans())
def test_round_trip_property(tmp_path_factory, records, binary):
    records = sorted(records, key=lambda r: r[0])
    s = EventStream([r[0] for r in records], [r[1] for r in records],
                    [r[2] for r in records], [r[3] for r in records])
    path = tmp_path_factory.mktemp("rt") / ("s.evtb" if binary else "s.evt1")
    write_events(s, path)
    assert read_events(path) == s


def test_round_trip_large_simulated(tmp_path):
    from evtlight.pattern.signals import SignalSpec
    from evtlight.simulator import single_footprint_stream

    sim = single_footprint_stream(SignalSpec(1000, 0.5), 3_000_000, seed=4)
    assert len(sim.stream) > 100_000
    for name in ("big.evt1", "big.evtb"):
        p1, p2 = tmp_path / name, tmp_path / ("again_" + name)
        write_events(sim.stream, p1)
        back = read_events(p1)
        assert back == sim.stream
        write_events(back, p2)
        assert p1.read_bytes() == p2.read_bytes()

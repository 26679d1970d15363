import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evrecon import events as ev
from evrecon.errors import CoordinateOutOfRange, MalformedLine, NonMonotoneTimestamp

DAVIS = ev.SensorGeometry(346, 260)
G8 = ev.SensorGeometry(8, 8)


def stream_of(ts, xs=None, ys=None, ps=None, geometry=G8):
    n = len(ts)
    xs = [0] * n if xs is None else xs
    ys = [0] * n if ys is None else ys
    ps = [1] * n if ps is None else ps
    return ev.EventStream(ts, xs, ys, ps, geometry)


def brute_voxel(t, x, y, p, geometry, bins):
    """Tent-weighted temporal binning, evaluated literally per (bin, pixel, event)."""
    out = np.zeros((bins, geometry.h, geometry.w))
    span = t[-1] - t[0]
    for n in range(bins):
        for r in range(geometry.h):
            for c in range(geometry.w):
                acc = 0.0
                for i in range(len(t)):
                    if x[i] != c or y[i] != r:
                        continue
                    ts = 0.0 if span == 0 else (bins - 1) * (t[i] - t[0]) / span
                    acc += p[i] * max(0.0, 1.0 - abs(n - ts))
                out[n, r, c] = acc
    return out


@st.composite
def windows(draw, max_events=100, geometry=G8):
    n = draw(st.integers(1, max_events))
    t = np.sort(np.array(draw(st.lists(st.integers(0, 10_000), min_size=n, max_size=n))))
    x = draw(st.lists(st.integers(0, geometry.w - 1), min_size=n, max_size=n))
    y = draw(st.lists(st.integers(0, geometry.h - 1), min_size=n, max_size=n))
    p = draw(st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n))
    return ev.EventWindow(ev.EventStream(t, x, y, p, geometry), 0)


# ------------------------------------------------------------ parsing


def test_parse_microsecond_line():
    s = ev.parse_events(b"0.000001 10 20 1\n", DAVIS)
    assert list(s) == [ev.Event(x=10, y=20, t=1, p=1)]


def test_parse_out_of_range_column():
    with pytest.raises(CoordinateOutOfRange):
        ev.parse_events(b"0.5 400 10 1\n", DAVIS)


def test_parse_davis_corner_accepted():
    s = ev.parse_events(b"0.1 345 259 0\n", DAVIS)
    assert s[0] == ev.Event(345, 259, 100000, -1)


def test_parse_empty():
    assert len(ev.parse_events(b"", DAVIS)) == 0


@pytest.mark.parametrize("line", [b"0.1 1 2\n", b"0.1 a 2 1\n", b"0.1 1 2 1 9\n"])
def test_parse_malformed(line):
    with pytest.raises(MalformedLine):
        ev.parse_events(line, DAVIS)


def test_parse_strict_rejects_decreasing_time():
    data = b"0.2 1 1 1\n0.1 1 1 1\n"
    with pytest.raises(NonMonotoneTimestamp):
        ev.parse_events(data, DAVIS)
    s = ev.parse_events(data, DAVIS, strict=False)
    assert list(s.t) == [100000, 200000]


def test_binary_and_text_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    n = 500
    s = ev.EventStream(np.sort(rng.integers(0, 10**6, n)), rng.integers(0, 346, n), rng.integers(0, 260, n),
                       rng.choice([-1, 1], n), DAVIS)
    for name in ("e.bin", "e.txt"):
        ev.write_events(s, tmp_path / name)
        assert ev.read_events(tmp_path / name, DAVIS) == s


# ------------------------------------------------------------ windows


def test_window_by_count_examples():
    assert [len(w) for w in ev.window_by_count(stream_of(range(7)), 7)] == [7]
    ws = ev.window_by_count(stream_of(range(15)), 7)
    assert [list(w.events.t) for w in ws] == [list(range(7)), list(range(7, 14))]
    assert ev.window_by_count(stream_of(range(3)), 7) == []


def test_window_by_duration_examples():
    ws = ev.window_by_duration(stream_of([0, 5, 10]), 10)
    assert [list(w.events.t) for w in ws] == [[0, 5], [10]]
    assert [len(w) for w in ev.window_by_duration(stream_of([42]), 10)] == [1]
    assert [len(w) for w in ev.window_by_duration(stream_of([0, 0, 0, 0]), 1)] == [4]


@given(st.lists(st.integers(0, 1000), max_size=60), st.integers(1, 20))
def test_count_windows_partition_prefix(ts, n):
    s = stream_of(sorted(ts))
    ws = ev.window_by_count(s, n)
    assert len(ws) == len(ts) // n
    cat = np.concatenate([w.events.t for w in ws]) if ws else np.zeros(0, int)
    assert np.array_equal(cat, s.t[: n * (len(ts) // n)])


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=60), st.integers(1, 300))
def test_duration_windows_disjoint_and_ordered(ts, dt):
    s = stream_of(sorted(ts))
    ws = ev.window_by_duration(s, dt)
    assert sum(len(w) for w in ws) == len(ts)
    for a, b in zip(ws[:-1], ws[1:]):
        assert a.t_end < b.t_start
    for w in ws:
        assert w.t_end - w.t_start < dt


# ------------------------------------------------------------ frames and voxels


def test_accumulate_frame_examples():
    w = ev.EventWindow(stream_of([0], [3], [4], [1]), 0)
    f = ev.accumulate_frame(w, G8).values
    assert f[4, 3] == 1 and np.count_nonzero(f) == 1
    w = ev.EventWindow(stream_of([0, 1], [2, 2], [2, 2], [1, -1]), 0)
    assert not ev.accumulate_frame(w, G8).values.any()
    w = ev.EventWindow(stream_of([0, 1, 2], [0, 0, 0], [0, 0, 0], [1, 1, -1]), 0)
    assert ev.accumulate_frame(w, G8).values[0, 0] == 1


def test_voxel_two_events_at_ends():
    w = ev.EventWindow(stream_of([0, 4], [1, 5], [2, 6], [1, 1]), 0)
    g = ev.encode_voxel_grid(w, G8, 5).values
    expect = np.zeros((5, 8, 8))
    expect[0, 2, 1] = 1
    expect[4, 6, 5] = 1
    assert np.array_equal(g, expect)


def test_voxel_fractional_split():
    # span 4 us over 4 bin intervals: t=1.25 us would need sub-us, so use span 16
    w = ev.EventWindow(stream_of([0, 5, 16], [0, 1, 0], [0, 0, 1], [1, 1, 1]), 0)
    g = ev.encode_voxel_grid(w, G8, 5).values
    # t* = 4 * 5 / 16 = 1.25
    assert g[1, 0, 1] == pytest.approx(0.75, abs=1e-15)
    assert g[2, 0, 1] == pytest.approx(0.25, abs=1e-15)
    assert g[:, 0, 1].sum() == pytest.approx(1.0)


def test_voxel_single_event_all_in_first_bin():
    w = ev.EventWindow(stream_of([7], [2], [3], [-1]), 0)
    g = ev.encode_voxel_grid(w, G8, 5).values
    assert g[0, 3, 2] == -1 and np.count_nonzero(g) == 1


@settings(max_examples=200, deadline=None)
@given(windows())
def test_voxel_matches_bruteforce(w):
    e = w.events
    g = ev.encode_voxel_grid(w, G8, 5).values
    ref = brute_voxel(e.t.tolist(), e.x.tolist(), e.y.tolist(), e.p.tolist(), G8, 5)
    np.testing.assert_allclose(g, ref, rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(windows(), st.integers(1, 9))
def test_voxel_conservation_and_bounds(w, bins):
    e = w.events
    g = ev.encode_voxel_grid(w, G8, bins).values
    assert abs(g.sum() - e.p.sum()) <= 1e-9 * max(len(e), 1)
    counts = np.zeros((8, 8))
    np.add.at(counts, (e.y, e.x), 1)
    assert np.all(np.abs(g) <= counts[None] + 1e-12)
    frame = ev.accumulate_frame(w, G8).values
    np.testing.assert_allclose(g.sum(axis=0), frame, atol=1e-9)


def test_voxel_rejects_out_of_bounds_window():
    w = ev.EventWindow(stream_of([0], [9], [0], [1], geometry=ev.SensorGeometry(16, 16)), 0)
    with pytest.raises(CoordinateOutOfRange):
        ev.encode_voxel_grid(w, G8)


def test_default_bins_and_davis_geometry():
    assert ev.DEFAULT_BINS == 5
    assert (DAVIS.w, DAVIS.h) == (346, 260)
    g = ev.encode_voxel_grid(ev.EventWindow(stream_of([0, 10], [345, 0], [259, 0], [1, -1], geometry=DAVIS), 0),
                             DAVIS).values
    assert g.shape == (5, 260, 346)

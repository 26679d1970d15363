import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evrecon import events as ev
from evrecon import recon as rc
from evrecon import sim
from evrecon.errors import MissingFile, NonMonotoneManifest, OutOfOrderWindow
from evrecon.fileio import write_pgm

G4 = ev.SensorGeometry(4, 4)
NO_DECAY = rc.IntegratorConfig(C=0.1, decay=0.0)


def window(ts, xs, ys, ps, k=0, geometry=G4):
    return ev.EventWindow(ev.EventStream(ts, xs, ys, ps, geometry), k)


def test_init_state():
    s = rc.init_state(G4)
    assert s.shape == (4, 4) and not s.log_surface.any()
    t = rc.init_state(G4)
    assert np.array_equal(s.log_surface, t.log_surface) and s.t == t.t


def test_constant_surface_is_mid_grey():
    img = rc.normalize_image(np.zeros((4, 4)))
    assert np.all(img.values == 0.5)


def test_normalize_endpoints():
    s = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(rc.normalize_image(s, 0, 100).values, s)


def test_normalize_percentiles_nearest():
    s = np.arange(100.0).reshape(10, 10)
    out = rc.normalize_image(s, 1, 99).values.ravel()
    assert out[1] == 0 and out[98] == 1
    assert out[0] == 0 and out[99] == 1
    np.testing.assert_allclose(out[1:99], (np.arange(1, 99) - 1) / 97)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(-50, 50)), st.floats(0, 40), st.floats(60, 100))
def test_normalize_range_and_monotone(s, lo, hi):
    out = rc.normalize_image(s, lo, hi).values.ravel()
    assert np.all((out >= 0) & (out <= 1))
    order = np.argsort(s.ravel(), kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


def test_single_event_brightest():
    img, _ = rc.reconstruct_window(window([5], [1], [2], [1]), rc.init_state(G4), NO_DECAY)
    v = img.values
    others = np.delete(v.ravel(), 2 * 4 + 1)
    assert np.all(v[2, 1] > others)


def test_untouched_pixel_unchanged_without_decay():
    s = rc.init_state(G4)
    _, s = rc.reconstruct_window(window([0, 1], [0, 3], [0, 3], [1, -1]), s, NO_DECAY)
    L, _ = rc.integrate_window(window([10], [0], [0], [1], k=1), s, NO_DECAY)
    assert L[3, 3] == s.log_surface[3, 3]
    assert L[1, 1] == 0.0


def test_purity_and_state_untouched():
    s = rc.init_state(G4)
    w = window([0, 3, 9], [0, 1, 2], [0, 1, 2], [1, -1, 1])
    cfg = rc.IntegratorConfig(decay=2.0)
    a_img, a_state = rc.reconstruct_window(w, s, cfg)
    b_img, b_state = rc.reconstruct_window(w, s, cfg)
    assert np.array_equal(a_img.values, b_img.values)
    assert np.array_equal(a_state.log_surface, b_state.log_surface)
    assert not s.log_surface.any()
    with pytest.raises(ValueError):
        s.log_surface[0, 0] = 1.0


def test_out_of_order_window():
    s = rc.init_state(G4)
    _, s = rc.reconstruct_window(window([10, 20], [0, 0], [0, 0], [1, 1]), s, NO_DECAY)
    with pytest.raises(OutOfOrderWindow):
        rc.reconstruct_window(window([5], [0], [0], [1]), s, NO_DECAY)


def test_decay_pulls_toward_mean():
    s = rc.init_state(G4)
    cfg = rc.IntegratorConfig(C=1.0, decay=5.0)
    _, s = rc.reconstruct_window(window([0], [0], [0], [1]), s, cfg)
    L, _ = rc.integrate_window(window([1_000_000], [3], [3], [1], k=1), s, cfg)
    # pixel (0,0) relaxes over 1 s at rate 5/s toward the mean at window end,
    # which already holds the new event at (3,3)
    mean = 2.0 / 16
    expect = mean + (1.0 - mean) * np.exp(-5.0)
    assert L[0, 0] == pytest.approx(expect, rel=1e-6)


def test_integrator_exact_on_simulated_ramp():
    rng = np.random.default_rng(11)
    L0 = rng.uniform(-2, 0, (6, 8))
    dL = rng.uniform(-1, 1, (6, 8))
    frames = [sim.LogIntensityFrame(L0 + dL * k / 4, 1000 * k) for k in range(5)]
    stream = sim.generate_events(frames)
    wins = ev.window_by_count(stream, max(1, len(stream) // 3))
    state = rc.init_state(stream.geometry)
    for w in wins:
        _, state = rc.reconstruct_window(w, state, NO_DECAY)
    used = stream[: sum(len(w) for w in wins)]
    count = np.zeros((6, 8))
    for e in used:
        count[e.y, e.x] += e.p
    np.testing.assert_allclose(state.log_surface, 0.1 * count, atol=1e-9)
    full = rc.init_state(stream.geometry)
    _, full = rc.reconstruct_window(ev.EventWindow(stream, 0), full, NO_DECAY)
    # within C of the true change up to the constant
    err = full.log_surface - dL
    assert np.all(np.abs(err) < 0.1 + 1e-12)


def _write_manifest(tmp_path, times):
    lines = []
    for k, t in enumerate(times):
        img = np.full((3, 4), k / 4.0)
        write_pgm(tmp_path / f"f{k}.pgm", img)
        lines.append(f"{t} f{k}.pgm\n")
    p = tmp_path / "frames.txt"
    p.write_text("".join(lines))
    return p


def test_external_frames(tmp_path):
    imgs = rc.load_external_frames(_write_manifest(tmp_path, [0.1, 0.2, 0.3]))
    assert [i.k for i in imgs] == [0, 1, 2]
    assert [i.t_mid for i in imgs] == [100000, 200000, 300000]
    # 8-bit values divided by 255
    assert imgs[1].values[0, 0] == pytest.approx(round(0.25 * 255) / 255, abs=1e-12)


def test_external_frames_errors(tmp_path):
    with pytest.raises(NonMonotoneManifest):
        rc.load_external_frames(_write_manifest(tmp_path, [3, 2, 1]))
    with pytest.raises(MissingFile):
        rc.load_external_frames(tmp_path / "nope.txt")

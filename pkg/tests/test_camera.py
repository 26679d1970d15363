import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from evrecon.camera import CameraIntrinsics, Pose, look_at, rot_to_quat, so3_exp, so3_log, quat_to_rot


def _symbolic_projection():
    fx, fy, cx, cy, k1, X, Y, Z = sp.symbols("fx fy cx cy k1 X Y Z")
    u, v = X / Z, Y / Z
    r2 = u**2 + v**2
    expr = [sp.expand(fx * u * (1 + k1 * r2) + cx), sp.expand(fy * v * (1 + k1 * r2) + cy)]
    return sp.lambdify((fx, fy, cx, cy, k1, X, Y, Z), expr, "math")


def test_projection_identity_case():
    intr = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 0.0)
    np.testing.assert_array_equal(intr.project(np.array([0.0, 0.0, 1.0])), [[0.0, 0.0]])


def test_projection_matches_symbolic_expansion():
    f = _symbolic_projection()
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = np.array([rng.uniform(100, 900), rng.uniform(100, 900), rng.uniform(0, 400), rng.uniform(0, 300),
                      rng.uniform(-0.3, 0.3)])
        Xc = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 10)])
        got = CameraIntrinsics(*p).project(Xc)[0]
        want = f(*p, *Xc)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.2, 0.2), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_normalize_inverts_projection(k1, x, y):
    intr = CameraIntrinsics(300.0, 310.0, 170.0, 130.0, k1)
    uv = intr.project(np.array([x, y, 1.0]))
    np.testing.assert_allclose(intr.normalize(uv)[0], [x, y], atol=1e-9)


def test_so3_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3.0) / np.linalg.norm(w)
        R = so3_exp(w)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(so3_log(R), w, atol=1e-9)
        np.testing.assert_allclose(quat_to_rot(rot_to_quat(R)), R, atol=1e-12)


def test_pose_algebra():
    rng = np.random.default_rng(2)
    a = Pose.from_rt(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    b = Pose.from_rt(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    X = rng.normal(size=(4, 3))
    np.testing.assert_allclose(a.compose(b).transform(X), a.transform(b.transform(X)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().transform(a.transform(X)), X, atol=1e-12)
    np.testing.assert_allclose(a.transform(a.center), [[0, 0, 0]], atol=1e-12)


def test_look_at_points_optical_axis():
    pose = look_at([3.0, -1.0, -4.0], [0.0, 0.0, 0.0])
    z = pose.transform(np.zeros(3))[0]
    assert z[0] == pytest.approx(0, abs=1e-12) and z[1] == pytest.approx(0, abs=1e-12) and z[2] > 0


def test_default_intrinsics():
    k = CameraIntrinsics.default_for(346, 260)
    assert (k.fx, k.cx, k.cy) == (1.2 * 346, 172.5, 129.5)
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0)

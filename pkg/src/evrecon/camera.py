"""Pinhole camera model, poses and rotation helpers.

Poses are world-to-camera: ``X_cam = R @ X_world + t``.  Quaternions are
stored scalar-first ``(w, x, y, z)``.  Pixel coordinates put the centre of
pixel ``(col, row)`` at ``(col, row)``.
"""

from dataclasses import dataclass, field

import numpy as np


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(w):
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    K = skew(w)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(th) / th * K + (1 - np.cos(th)) / th**2 * K @ K


def so3_log(R):
    c = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    th = np.arccos(c)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if th < 1e-8:
        return 0.5 * v
    if np.pi - th < 1e-6:
        # axis from the symmetric part
        B = (R + np.eye(3)) / 2
        i = int(np.argmax(np.diag(B)))
        axis = B[:, i] / np.sqrt(B[i, i])
        return th * axis / np.linalg.norm(axis)
    return th / (2 * np.sin(th)) * v


def quat_to_rot(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def rotation_angle_deg(Ra, Rb):
    """Geodesic angle between two rotations, in degrees."""
    c = np.clip((np.trace(Ra.T @ Rb) - 1) / 2, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def look_at(center, target, up=(0.0, -1.0, 0.0)):
    """World-to-camera rotation for a camera at ``center`` looking at ``target``.

    Camera axes: +z forward, +x right, +y down.
    """
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose.from_rt(R, -R @ center)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def params(self):
        return np.array([self.fx, self.fy, self.cx, self.cy, self.k1])

    @classmethod
    def from_params(cls, p):
        return cls(*[float(v) for v in p])

    @classmethod
    def default_for(cls, w, h):
        """Self-calibration prior: f = 1.2 * max(w, h), centred principal point."""
        f = 1.2 * max(w, h)
        return cls(f, f, (w - 1) / 2.0, (h - 1) / 2.0)

    def project(self, Xc):
        """Camera-frame points (N, 3) to pixels (N, 2)."""
        Xc = np.atleast_2d(Xc)
        u = Xc[:, 0] / Xc[:, 2]
        v = Xc[:, 1] / Xc[:, 2]
        d = 1.0 + self.k1 * (u * u + v * v)
        return np.stack([self.fx * d * u + self.cx, self.fy * d * v + self.cy], axis=1)

    def normalize(self, uv):
        """Pixels (N, 2) to normalized image coordinates; inverts k1 iteratively."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        xd = (uv[:, 0] - self.cx) / self.fx
        yd = (uv[:, 1] - self.cy) / self.fy
        if self.k1 == 0.0:
            return np.stack([xd, yd], axis=1)
        x, y = xd.copy(), yd.copy()
        for _ in range(20):
            d = 1.0 + self.k1 * (x * x + y * y)
            x, y = xd / d, yd / d
        return np.stack([x, y], axis=1)


@dataclass(frozen=True, eq=False)
class Pose:
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        q = q / np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).copy())

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rt(cls, R, t):
        return cls(rot_to_quat(R), t)

    @property
    def R(self):
        return quat_to_rot(self.q)

    @property
    def center(self):
        return -self.R.T @ self.t

    def transform(self, X):
        return np.atleast_2d(X) @ self.R.T + self.t

    def inverse(self):
        R = self.R
        return Pose.from_rt(R.T, -R.T @ self.t)

    def compose(self, other):
        """``self * other``: apply ``other`` first."""
        R1, R2 = self.R, other.R
        return Pose.from_rt(R1 @ R2, R1 @ other.t + self.t)

    def __repr__(self):
        return f"Pose(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def project_points(pose, intr, X):
    return intr.project(pose.transform(X))


def triangulation_angle_deg(c1, c2, X):
    """Angle at ``X`` between the rays to two camera centres."""
    a = np.atleast_2d(c1) - np.atleast_2d(X)
    b = np.atleast_2d(c2) - np.atleast_2d(X)
    cos = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + 1e-300)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))

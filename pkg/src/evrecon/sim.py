"""Synthetic event camera: ray-cast textured scenes, threshold-crossing events.

Each pixel keeps a reference log level.  Between two rendered frames the
log intensity is interpolated linearly in time, and an event is emitted
every time the signal moves a full contrast step ``C`` away from the
reference; the reference then advances by ``p * C``.  Reference levels are
tracked as integer multiples of ``C`` above the first frame, so crossing
counts do not accumulate rounding drift.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, Pose, look_at
from .errors import DegenerateTrajectory
from .events import EventStream, SensorGeometry

LOG_EPS = 1e-3
DEFAULT_CONTRAST = 0.1
# slack on threshold comparisons, in units of C
_LEVEL_TOL = 1e-9


def log_intensity(intensity):
    return np.log(np.asarray(intensity, dtype=np.float64) + LOG_EPS)


@dataclass(frozen=True, eq=False)
class LogIntensityFrame:
    values: np.ndarray  # (h, w)
    t: int  # microseconds


@dataclass(frozen=True)
class SimulatorConfig:
    C: float = DEFAULT_CONTRAST

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("contrast threshold must be positive")


# ---------------------------------------------------------------- textures


class ValueNoiseTexture:
    """Smooth multi-octave value noise on a 2D surface parameterisation.

    Returns intensities in ``[lo, hi]``.
    """

    def __init__(self, seed=0, base_cell=0.25, octaves=3, lo=0.05, hi=1.0, contrast_gamma=1.0):
        rng = np.random.default_rng(seed)
        self.base_cell = base_cell
        self.octaves = octaves
        self.lo, self.hi = lo, hi
        self.gamma = contrast_gamma
        self._lattices = [rng.random((257, 257)) for _ in range(octaves)]
        self._offsets = rng.random((octaves, 2)) * 64

    def __call__(self, u, v):
        acc = np.zeros(np.shape(u))
        norm = 0.0
        for o in range(self.octaves):
            cell = self.base_cell / 2**o
            amp = 0.5**o
            gu = np.asarray(u) / cell + self._offsets[o, 0]
            gv = np.asarray(v) / cell + self._offsets[o, 1]
            i0 = np.floor(gu).astype(np.int64)
            j0 = np.floor(gv).astype(np.int64)
            fu = gu - i0
            fv = gv - j0
            # smoothstep keeps the surface C1
            fu = fu * fu * (3 - 2 * fu)
            fv = fv * fv * (3 - 2 * fv)
            lat = self._lattices[o]
            i0 %= 256
            j0 %= 256
            a = lat[i0, j0] * (1 - fu) + lat[i0 + 1, j0] * fu
            b = lat[i0, j0 + 1] * (1 - fu) + lat[i0 + 1, j0 + 1] * fu
            acc += amp * (a * (1 - fv) + b * fv)
            norm += amp
        s = np.clip(acc / norm, 0.0, 1.0)
        # spread the mid-heavy distribution of summed noise
        s = np.clip(0.5 + 1.8 * (s - 0.5), 0.0, 1.0) ** self.gamma
        return self.lo + (self.hi - self.lo) * s


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True, eq=False)
class TexturedPlane:
    """Plane through ``origin`` spanned by orthonormal ``u_axis``, ``v_axis``.

    The visible side is the one the normal ``u x v`` points to.
    """

    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half_extent: float = np.inf

    @property
    def normal(self):
        n = np.cross(self.u_axis, self.v_axis)
        return n / np.linalg.norm(n)

    def contains(self, c):
        return float(np.dot(np.asarray(c) - self.origin, self.normal)) <= 0.0

    def intersect(self, o, d):
        """Ray hits: returns (distance along ray, surface uv) with inf for misses."""
        n = self.normal
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((self.origin - o) @ n) / denom
        s = np.where((denom < 0) & (s > 0), s, np.inf)
        P = o + np.where(np.isfinite(s), s, 0.0)[:, None] * d
        rel = P - self.origin
        u, v = rel @ self.u_axis, rel @ self.v_axis
        s = np.where((np.abs(u) <= self.half_extent) & (np.abs(v) <= self.half_extent), s, np.inf)
        return s, u, v


@dataclass(frozen=True, eq=False)
class TexturedBox:
    """Axis-aligned box; each face textured with its own uv offset."""

    lo: np.ndarray
    hi: np.ndarray

    def contains(self, c):
        c = np.asarray(c)
        return bool(np.all(c >= self.lo) and np.all(c <= self.hi))

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (self.lo - o) * inv
            t2 = (self.hi - o) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tnear = np.max(tmin, axis=1)
        tfar = np.min(tmax, axis=1)
        axis = np.argmax(tmin, axis=1)
        hit = (tnear <= tfar) & (tnear > 0)
        s = np.where(hit, tnear, np.inf)
        P = o + np.where(hit, tnear, 0.0)[:, None] * d
        # face uv: the two coordinates orthogonal to the hit axis, offset per face
        side = (np.take_along_axis(d, axis[:, None], 1)[:, 0] > 0).astype(np.int64)
        face = axis * 2 + side
        other = np.array([[1, 2], [0, 2], [0, 1]])[axis]
        u = np.take_along_axis(P, other[:, :1], 1)[:, 0] + 7.0 * face
        v = np.take_along_axis(P, other[:, 1:], 1)[:, 0] + 3.0 * face
        return s, u, v


# -------------------------------------------------------------- trajectories


@dataclass(frozen=True, eq=False)
class Keyframe:
    t: float  # seconds
    pose: Pose


class KeyframeTrajectory:
    """Piecewise interpolation between timed poses (lerp centre, slerp rotation)."""

    def __init__(self, keyframes):
        self.keyframes = sorted(keyframes, key=lambda k: k.t)
        if not self.keyframes:
            raise ValueError("trajectory needs at least one keyframe")

    @property
    def duration(self):
        return self.keyframes[-1].t - self.keyframes[0].t

    def pose_at(self, t):
        ks = self.keyframes
        if t <= ks[0].t:
            return ks[0].pose
        if t >= ks[-1].t:
            return ks[-1].pose
        i = max(j for j in range(len(ks)) if ks[j].t <= t)
        a, b = ks[i], ks[i + 1]
        s = (t - a.t) / (b.t - a.t)
        qa, qb = a.pose.q, b.pose.q
        if np.dot(qa, qb) < 0:
            qb = -qb
        cos = np.clip(np.dot(qa, qb), -1.0, 1.0)
        th = math.acos(cos)
        if th < 1e-9:
            q = qa
        else:
            q = (math.sin((1 - s) * th) * qa + math.sin(s * th) * qb) / math.sin(th)
        c = (1 - s) * a.pose.center + s * b.pose.center
        R = Pose(q).R
        return Pose(q, -R @ c)


def linear_trajectory(start, velocity, duration):
    """Constant-velocity translation with fixed orientation."""
    c1 = start.center + np.asarray(velocity, dtype=np.float64) * duration
    R = start.R
    return KeyframeTrajectory([Keyframe(0.0, start), Keyframe(duration, Pose.from_rt(R, -R @ c1))])


# -------------------------------------------------------------------- scene


@dataclass(eq=False)
class SyntheticScene:
    """Ground-truth world for the simulator.

    ``fade_in`` seconds at the start ramp texture contrast from a uniform
    grey up to full, so an integrator started from a flat state recovers
    absolute log intensity up to a constant.
    """

    objects: list
    texture: ValueNoiseTexture
    intrinsics: CameraIntrinsics
    geometry: SensorGeometry
    trajectory: KeyframeTrajectory
    background: float = 0.3
    fade_in: float = 0.0
    view_times: list = field(default_factory=list)

    def intensity_at(self, pose, t=None):
        """Render intensity (h, w) and z-depth (h, w, 0 where empty) at a pose."""
        w, h = self.geometry.w, self.geometry.h
        cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        pix = np.stack([cols.ravel(), rows.ravel()], axis=1)
        xy = self.intrinsics.normalize(pix)
        d_cam = np.concatenate([xy, np.ones((len(xy), 1))], axis=1)
        R = pose.R
        d_world = d_cam @ R  # rows are R^T d
        o = pose.center
        best = np.full(len(d_cam), np.inf)
        tex = np.full(len(d_cam), self.background)
        for obj in self.objects:
            s, u, v = obj.intersect(o, d_world)
            closer = s < best
            if np.any(closer):
                best = np.where(closer, s, best)
                tex = np.where(closer, self.texture(u, v), tex)
        depth = np.where(np.isfinite(best), best, 0.0)  # d_cam has unit z
        if t is not None and self.fade_in > 0 and t < self.fade_in:
            a = max(t, 0.0) / self.fade_in
            tex = self.background + a * (tex - self.background)
        return tex.reshape(h, w), depth.reshape(h, w)

    def check_trajectory(self, times):
        for t in times:
            c = self.trajectory.pose_at(t).center
            for obj in self.objects:
                if obj.contains(c):
                    raise DegenerateTrajectory(f"camera at t={t:.6f}s is inside scene geometry at {c}")


@dataclass(eq=False)
class RenderedSequence:
    frames: list  # LogIntensityFrame
    poses: list  # Pose per frame
    depths: list  # (h, w) z-depth per frame
    times_us: list


def frame_times_us(frame_count, frame_rate):
    return [int(round(i * 1e6 / frame_rate)) for i in range(frame_count)]


def render_sequence(scene, frame_count, frame_rate):
    """Render ``frame_count`` log-intensity frames at ``frame_rate`` Hz."""
    if frame_count < 2:
        raise ValueError("need at least 2 frames")
    times = frame_times_us(frame_count, frame_rate)
    scene.check_trajectory([t * 1e-6 for t in times])
    frames, poses, depths = [], [], []
    for t_us in times:
        t = t_us * 1e-6
        pose = scene.trajectory.pose_at(t)
        inten, depth = scene.intensity_at(pose, t)
        frames.append(LogIntensityFrame(log_intensity(inten), t_us))
        poses.append(pose)
        depths.append(depth)
    return RenderedSequence(frames, poses, depths, times)


# -------------------------------------------------------------------- events


def generate_events(frames, config=SimulatorConfig()):
    """Threshold-crossing events for a sequence of log-intensity frames."""
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    h, w = frames[0].values.shape
    geometry = SensorGeometry(w, h)
    C = config.C
    base = np.asarray(frames[0].values, dtype=np.float64).ravel()
    level = np.zeros(base.size, dtype=np.int64)
    pix = np.arange(base.size, dtype=np.int64)
    chunks = []
    for fa, fb in zip(frames[:-1], frames[1:]):
        if fb.t <= fa.t:
            raise ValueError("frame timestamps must be strictly increasing")
        a = (fa.values.ravel() - base) / C
        b = (fb.values.ravel() - base) / C
        up = np.floor(b + _LEVEL_TOL).astype(np.int64)
        dn = np.ceil(b - _LEVEL_TOL).astype(np.int64)
        n_up = np.maximum(up - level, 0)
        n_dn = np.maximum(level - dn, 0)
        n = n_up + n_dn
        total = int(n.sum())
        if total:
            who = np.repeat(pix, n)
            # k-th crossing of each pixel, k = 1..n
            first = np.cumsum(n) - n
            k = np.arange(total, dtype=np.int64) - np.repeat(first, n) + 1
            pol = np.where(np.repeat(n_up, n) > 0, 1, -1).astype(np.int8)
            lvl = level[who] + pol * k
            da = a[who]
            db = b[who]
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(db != da, (lvl - da) / (db - da), 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            ts = fa.t + np.rint(frac * (fb.t - fa.t)).astype(np.int64)
            order = np.argsort(ts, kind="stable")
            chunks.append((ts[order], who[order], pol[order]))
        level = level + n_up - n_dn
    if not chunks:
        return EventStream.empty(geometry)
    t = np.concatenate([c[0] for c in chunks])
    who = np.concatenate([c[1] for c in chunks])
    p = np.concatenate([c[2] for c in chunks])
    return EventStream(t, who % w, who // w, p, geometry)


# ---------------------------------------------------------- stock scenes


def plane_scene(geometry=SensorGeometry(64, 48), depth=5.0, step=0.1, frame_rate=30.0,
                frames=2, focal=None, seed=0, texture=None, half_extent=np.inf):
    """Fronto-parallel textured plane at ``depth``; camera slides along +x.

    A finite ``half_extent`` centres the textured square between the first
    and last camera positions; the rest of the view is flat background.
    """
    f = focal if focal is not None else 1.2 * max(geometry.w, geometry.h)
    intr = CameraIntrinsics(f, f, (geometry.w - 1) / 2, (geometry.h - 1) / 2)
    x0 = 0.5 * step * (frames - 1) if np.isfinite(half_extent) else 0.0
    plane = TexturedPlane(np.array([x0, 0.0, depth]), np.array([1.0, 0.0, 0.0]), np.array([0.0, -1.0, 0.0]),
                          half_extent=half_extent)
    start = Pose.identity()
    duration = (frames - 1) / frame_rate
    traj = linear_trajectory(start, [step * frame_rate, 0.0, 0.0], duration)
    tex = texture if texture is not None else ValueNoiseTexture(seed=seed)
    return SyntheticScene([plane], tex, intr, geometry, traj)


def orbit_scene(geometry=SensorGeometry(346, 260), views=8, arc_deg=70.0, radius=4.0,
                height=1.2, box_size=1.6, transition=0.05, dwell=0.02, guard=0.01,
                seed=0, texture=None):
    """Camera visiting ``views`` stations on a circular arc around a textured box.

    Time is split into periods of ``guard + transition + dwell`` seconds.
    Period 0 fades the scene in at the first station; period ``i`` holds
    still for ``guard``, moves to station ``i`` and rests there.  Duration
    windows of one period, anchored at the first event, therefore each end
    on a still camera.  ``scene.view_times`` holds the arrival times.
    """
    f = 0.9 * max(geometry.w, geometry.h)
    intr = CameraIntrinsics(f, f, (geometry.w - 1) / 2, (geometry.h - 1) / 2)
    half = box_size / 2
    box = TexturedBox(np.array([-half, -half, -half]), np.array([half, half, half]))
    ground = TexturedPlane(np.array([0.0, half, 0.0]), np.array([1.0, 0.0, 0.0]),
                           np.array([0.0, 0.0, 1.0]), half_extent=3.0)
    target = np.zeros(3)
    angles = np.radians(np.linspace(-arc_deg / 2, arc_deg / 2, views)) + np.radians(35.0)
    stations = [look_at([radius * np.sin(a), -height, -radius * np.cos(a)], target) for a in angles]
    period = guard + transition + dwell
    keys = [Keyframe(0.0, stations[0])]
    view_times = [transition]
    for i in range(1, views):
        t0 = i * period + guard
        keys.append(Keyframe(t0, stations[i - 1]))
        keys.append(Keyframe(t0 + transition, stations[i]))
        view_times.append(t0 + transition)
    tex = texture if texture is not None else ValueNoiseTexture(seed=seed, base_cell=0.2, octaves=4)
    scene = SyntheticScene([box, ground], tex, intr, geometry, KeyframeTrajectory(keys),
                           background=0.3, fade_in=transition, view_times=view_times)
    scene.period = period
    return scene


def render_times(scene, times_s):
    """Render frames at explicit times (seconds)."""
    scene.check_trajectory(times_s)
    frames, poses, depths = [], [], []
    for t in times_s:
        pose = scene.trajectory.pose_at(t)
        inten, depth = scene.intensity_at(pose, t)
        frames.append(LogIntensityFrame(log_intensity(inten), int(round(t * 1e6))))
        poses.append(pose)
        depths.append(depth)
    return RenderedSequence(frames, poses, depths, [f.t for f in frames])


def orbit_sample_times(scene, substeps=4):
    """Frame times: ``substeps`` across the fade-in and across every move."""
    times = list(np.linspace(0.0, scene.fade_in, substeps + 1)) if scene.fade_in > 0 else [0.0]
    ks = scene.trajectory.keyframes
    for a, b in zip(ks[:-1], ks[1:]):
        if b.t <= a.t or np.allclose(a.pose.center, b.pose.center):
            continue
        if a.t > times[-1]:
            times.append(a.t)
        times.extend(a.t + (b.t - a.t) * (i + 1) / substeps for i in range(substeps))
    return [float(t) for t in times]

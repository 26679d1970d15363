"""Incremental structure from motion.

The reconstruction grows from a two-view initialisation by alternating
absolute-pose registration, triangulation of new tracks, local bundle
adjustment and outlier filtering, with a global adjustment whenever the
model has grown by a quarter since the last one.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import bundle
from .bundle import FIXED, FREE, SPHERE, BAOptions, BAProblem
from .camera import CameraIntrinsics, Pose, rot_to_quat, triangulation_angle_deg
from .errors import CheiralityAmbiguity, NoRegistrableImage, NoValidInitialPair
from .fileio import write_ply
from .pnp import solve_pnp_ransac
from .triangulation import pairwise_angles, triangulate_dlt, triangulate_pair

MIN_INIT_ANGLE = 3.0
MIN_2D3D = 12
MAX_REPROJ = 4.0
MIN_TRI_ANGLE = 1.5
CHEIRALITY_MARGIN = 1.2
LOCAL_BA_SIZE = 5
GLOBAL_BA_GROWTH = 1.25


@dataclass(eq=False)
class Point3D:
    xyz: np.ndarray
    track: list  # [(image id, feature index), ...] in registered images
    error: float = 0.0


@dataclass(eq=False)
class Reconstruction:
    """Registered poses, points and the 2D keypoints they are observed at.

    ``points`` is keyed by scene-graph track id, so every track yields at
    most one point.  ``gauge`` holds ``(fixed image, scale image, baseline)``.
    """

    intrinsics: CameraIntrinsics
    keypoints: dict  # image id -> (N, 2) pixel coordinates
    image_size: tuple = (0, 0)
    poses: dict = field(default_factory=dict)
    points: dict = field(default_factory=dict)
    gauge: tuple = None
    names: dict = field(default_factory=dict)
    refine_intrinsics: bool = False
    log: list = field(default_factory=list)

    @property
    def registered(self):
        return sorted(self.poses)

    def observations(self, images=None):
        """Flat arrays (image, point id, feature, xy) over all observations."""
        imgs, pids, feats, xy = [], [], [], []
        for pid, pt in self.points.items():
            for img, f in pt.track:
                if images is not None and img not in images:
                    continue
                imgs.append(img)
                pids.append(pid)
                feats.append(f)
                xy.append(self.keypoints[img][f])
        return (np.array(imgs, dtype=np.int64), np.array(pids, dtype=np.int64),
                np.array(feats, dtype=np.int64), np.array(xy, dtype=np.float64).reshape(-1, 2))

    def reprojection_errors(self):
        """Per-observation errors aligned with :meth:`observations`."""
        imgs, pids, _, xy = self.observations()
        if len(imgs) == 0:
            return np.zeros(0)
        Rs = np.array([self.poses[i].R for i in imgs])
        ts = np.array([self.poses[i].t for i in imgs])
        X = np.array([self.points[p].xyz for p in pids])
        Xc = np.einsum("mij,mj->mi", Rs, X) + ts
        return np.linalg.norm(bundle.project(self.intrinsics.params, Xc) - xy, axis=1)

    def depths(self):
        imgs, pids, _, _ = self.observations()
        if len(imgs) == 0:
            return np.zeros(0)
        Rs = np.array([self.poses[i].R for i in imgs])
        ts = np.array([self.poses[i].t for i in imgs])
        X = np.array([self.points[p].xyz for p in pids])
        return (np.einsum("mij,mj->mi", Rs, X) + ts)[:, 2]

    def mean_reprojection_error(self):
        e = self.reprojection_errors()
        return float(e.mean()) if len(e) else 0.0

    def update_point_errors(self):
        e = self.reprojection_errors()
        _, pids, _, _ = self.observations()
        for pid in self.points:
            m = pids == pid
            self.points[pid].error = float(e[m].mean()) if np.any(m) else 0.0

    def point_array(self):
        ids = sorted(self.points)
        return ids, np.array([self.points[i].xyz for i in ids]).reshape(-1, 3)


# ------------------------------------------------------------ initial pair


def _correspondence_xy(graph, keypoints, a, b):
    vp = graph.edge(a, b)
    c = np.asarray(vp.correspondences)
    if vp.a != a:
        c = c[:, ::-1]
    return c, keypoints[a][c[:, 0]], keypoints[b][c[:, 1]]


def essential_from_geometry(geom, intr):
    if geom.kind == "E":
        return geom.matrix
    if geom.kind == "F":
        K = intr.K
        return K.T @ geom.matrix @ K
    if "E" in geom.relation and geom.relation["E"][0] is not None:
        return geom.relation["E"][0]
    if "F" in geom.relation and geom.relation["F"][0] is not None:
        K = intr.K
        return K.T @ geom.relation["F"][0] @ K
    return None


def relative_pose(E, xn1, xn2):
    """Choose among the four decompositions of ``E`` by cheirality.

    Returns (R, t, points, in-front mask, sorted candidate counts).
    """
    from .twoview import decompose_essential

    results = []
    I, z = np.eye(3), np.zeros(3)
    for R, t in decompose_essential(E):
        X = triangulate_pair(I, z, R, t, xn1, xn2)
        d1 = X[:, 2]
        d2 = (X @ R.T + t)[:, 2]
        front = np.isfinite(d1) & (d1 > 0) & (d2 > 0)
        results.append((int(front.sum()), R, t, X, front))
    results.sort(key=lambda r: -r[0])
    counts = [r[0] for r in results]
    n, R, t, X, front = results[0]
    return R, t, X, front, counts


def _median_angle(R, t, X, front):
    if not np.any(front):
        return 0.0
    c2 = -R.T @ t
    return float(np.median(triangulation_angle_deg(np.zeros(3), c2, X[front])))


def select_initial_pair(graph, keypoints, intrinsics, min_angle=MIN_INIT_ANGLE):
    """Edge with the most inliers among those with enough parallax."""
    cands = []
    for (a, b), vp in sorted(graph.edges.items()):
        if vp.geometry.degenerate:
            continue
        E = essential_from_geometry(vp.geometry, intrinsics)
        if E is None:
            continue
        _, x1, x2 = _correspondence_xy(graph, keypoints, a, b)
        R, t, X, front, _ = relative_pose(E, intrinsics.normalize(x1), intrinsics.normalize(x2))
        ang = _median_angle(R, t, X, front)
        if ang >= min_angle:
            cands.append((-vp.num_inliers, -ang, a, b))
    if not cands:
        raise NoValidInitialPair("no verified, non-degenerate pair with enough triangulation angle")
    cands.sort()
    return cands[0][2], cands[0][3]


def initialize_two_view(graph, a, b, keypoints, intrinsics, image_size=(0, 0), margin=CHEIRALITY_MARGIN):
    """Two-view reconstruction with camera ``a`` at the origin and unit baseline."""
    vp = graph.edge(a, b)
    E = essential_from_geometry(vp.geometry, intrinsics)
    _, x1, x2 = _correspondence_xy(graph, keypoints, a, b)
    R, t, _, _, counts = relative_pose(E, intrinsics.normalize(x1), intrinsics.normalize(x2))
    if counts[0] == 0 or counts[0] < margin * counts[1]:
        raise CheiralityAmbiguity(f"cheirality counts {counts} do not single out a pose")
    t = t / np.linalg.norm(t)
    rec = Reconstruction(intrinsics, keypoints, image_size)
    rec.poses[a] = Pose.identity()
    rec.poses[b] = Pose.from_rt(R, t)
    rec.gauge = (a, b, 1.0)
    triangulate_tracks(rec, graph)
    rec.log.append(f"initialised with images {a} and {b}: {len(rec.points)} points")
    return rec


# ------------------------------------------------------------ registration


def _image_track_index(graph):
    idx = {}
    for tid, tr in enumerate(graph.tracks):
        for img, f in tr:
            idx.setdefault(int(img), []).append((int(f), tid))
    return idx


def _grid_coverage(xy, size, cells=4):
    w, h = size
    if w <= 0 or h <= 0 or len(xy) == 0:
        return 0
    cx = np.clip((xy[:, 0] * cells / w).astype(int), 0, cells - 1)
    cy = np.clip((xy[:, 1] * cells / h).astype(int), 0, cells - 1)
    return len(set(zip(cx.tolist(), cy.tolist())))


def registration_candidates(rec, graph, min_2d3d=MIN_2D3D):
    """Unregistered images ordered by (visible points, grid coverage, -id)."""
    index = _image_track_index(graph)
    cands = []
    for img in graph.nodes:
        if img in rec.poses:
            continue
        corr = [(f, tid) for f, tid in index.get(img, []) if tid in rec.points]
        if len(corr) < min_2d3d:
            continue
        xy = rec.keypoints[img][[f for f, _ in corr]]
        cands.append((-len(corr), -_grid_coverage(xy, rec.image_size), img, corr))
    cands.sort(key=lambda c: c[:3])
    return [(c[2], c[3]) for c in cands]


def register_next_image(rec, graph, rng=None, min_2d3d=MIN_2D3D, threshold=MAX_REPROJ):
    """Register the best candidate image; returns (image id, Pose).

    Candidates are tried in ranking order until absolute pose estimation
    yields at least ``min_2d3d`` inliers.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for img, corr in registration_candidates(rec, graph, min_2d3d):
        feats = np.array([f for f, _ in corr])
        tids = [tid for _, tid in corr]
        X = np.array([rec.points[t].xyz for t in tids])
        uv = rec.keypoints[img][feats]
        pose, mask = solve_pnp_ransac(X, uv, rec.intrinsics, rng, threshold=threshold)
        if pose is None or mask.sum() < min_2d3d:
            continue
        rec.poses[img] = pose
        for f, tid, ok in zip(feats, tids, mask):
            if ok:
                rec.points[tid].track.append((img, int(f)))
        rec.log.append(f"registered image {img} with {int(mask.sum())}/{len(mask)} inliers")
        return img, pose
    raise NoRegistrableImage(f"no unregistered image has {min_2d3d} usable 2D-3D correspondences")


# ------------------------------------------------------------ triangulation


def triangulate_tracks(rec, graph, max_err=MAX_REPROJ, min_angle=MIN_TRI_ANGLE):
    """Triangulate every track with two or more registered views and no point yet."""
    intr = rec.intrinsics
    added = 0
    for tid, tr in enumerate(graph.tracks):
        if tid in rec.points:
            continue
        obs = [(int(i), int(f)) for i, f in tr if int(i) in rec.poses]
        if len(obs) < 2:
            continue
        poses = [rec.poses[i] for i, _ in obs]
        Rs = np.array([p.R for p in poses])
        ts = np.array([p.t for p in poses])
        uv = np.array([rec.keypoints[i][f] for i, f in obs])
        X = triangulate_dlt(Rs, ts, intr.normalize(uv))
        if X is None or not np.all(np.isfinite(X)):
            continue
        Xc = np.einsum("vij,j->vi", Rs, X) + ts
        if np.any(Xc[:, 2] <= 0):
            continue
        err = np.linalg.norm(bundle.project(intr.params, Xc) - uv, axis=1)
        if err.max() > max_err:
            continue
        if pairwise_angles([p.center for p in poses], X).min() < min_angle:
            continue
        rec.points[tid] = Point3D(X, obs, float(err.mean()))
        added += 1
    return added


# ------------------------------------------------------------ adjustment


def _problem(rec, free_images, loss_scale, refine_intrinsics):
    """BA problem over points seen by ``free_images``; other viewers are fixed."""
    free_images = set(free_images)
    pids = sorted(pid for pid, pt in rec.points.items() if any(i in free_images for i, _ in pt.track))
    pid_index = {p: k for k, p in enumerate(pids)}
    cams = sorted({i for p in pids for i, _ in rec.points[p].track})
    cam_index = {c: k for k, c in enumerate(cams)}
    oc, op, xy = [], [], []
    for p in pids:
        for i, f in rec.points[p].track:
            oc.append(cam_index[i])
            op.append(pid_index[p])
            xy.append(rec.keypoints[i][f])
    g0, g1, _ = rec.gauge
    modes = []
    for c in cams:
        if c not in free_images or c == g0:
            modes.append(FIXED)
        elif c == g1 and g0 in rec.poses:
            modes.append(SPHERE)
        else:
            modes.append(FREE)
    anchor = rec.poses[g0].center if g0 in rec.poses else None
    prob = BAProblem(rec.intrinsics.params, [rec.poses[c].R for c in cams], [rec.poses[c].t for c in cams],
                     [rec.points[p].xyz for p in pids], oc, op, xy, modes, anchor=anchor,
                     refine_intrinsics=refine_intrinsics, loss_scale=loss_scale)
    return prob, cams, pids


def bundle_adjust(rec, options=BAOptions(), images=None):
    """Refine ``rec`` in place; returns (rec, final cost).

    ``images`` restricts the free cameras (local adjustment); by default all
    registered images are free apart from the gauge.  The last run's report
    is kept in ``rec.last_ba``.
    """
    images = rec.registered if images is None else images
    refine = options.refine_intrinsics or rec.refine_intrinsics
    prob, cams, pids = _problem(rec, images, options.loss_scale, refine)
    if len(pids) == 0:
        rec.last_ba = None
        return rec, 0.0
    out, report = bundle.solve(prob, options)
    for k, c in enumerate(cams):
        if prob.modes[k] != FIXED:
            rec.poses[c] = Pose.from_rt(out.R[k], out.t[k])
    for k, p in enumerate(pids):
        rec.points[p].xyz = out.X[k].copy()
    if refine:
        rec.intrinsics = CameraIntrinsics.from_params(out.intr)
    rec.last_ba = report
    rec.update_point_errors()
    return rec, report.final_cost


def local_window(rec, image, size=LOCAL_BA_SIZE):
    """``image`` plus the registered images sharing most points with it."""
    shared = {}
    for pt in rec.points.values():
        imgs = {i for i, _ in pt.track}
        if image in imgs:
            for i in imgs - {image}:
                shared[i] = shared.get(i, 0) + 1
    others = sorted(shared, key=lambda i: (-shared[i], i))[:size - 1]
    return sorted([image] + others)


def filter_outliers(rec, max_err=MAX_REPROJ, min_angle=MIN_TRI_ANGLE):
    """Drop bad observations, then points that are too short or too flat.

    An observation is bad if its reprojection error exceeds ``max_err`` or
    the point lies behind that camera.  A point is removed if fewer than two
    observations remain or its largest pairwise triangulation angle is below
    ``min_angle``.  Returns (observations removed, points removed).
    """
    intr = rec.intrinsics
    n_obs = n_pts = 0
    for pid in sorted(rec.points):
        pt = rec.points[pid]
        keep = []
        for i, f in pt.track:
            pose = rec.poses[i]
            Xc = pose.transform(pt.xyz)
            ok = Xc[0, 2] > 0 and np.linalg.norm(intr.project(Xc)[0] - rec.keypoints[i][f]) <= max_err
            if ok:
                keep.append((i, f))
            else:
                n_obs += 1
        pt.track = keep
        if len(keep) < 2 or pairwise_angles([rec.poses[i].center for i, _ in keep], pt.xyz).max() < min_angle:
            n_obs += len(keep)
            del rec.points[pid]
            n_pts += 1
    rec.update_point_errors()
    return n_obs, n_pts


# ------------------------------------------------------------ driver


@dataclass
class SfMOptions:
    min_init_angle: float = MIN_INIT_ANGLE
    min_2d3d: int = MIN_2D3D
    max_reproj: float = MAX_REPROJ
    min_tri_angle: float = MIN_TRI_ANGLE
    local_ba_size: int = LOCAL_BA_SIZE
    global_ba_growth: float = GLOBAL_BA_GROWTH
    loss_scale: float = 2.0
    refine_intrinsics: bool | None = None  # default: only when intrinsics were not given
    seed: int = 0


def run_incremental(graph, keypoints, intrinsics=None, image_size=(0, 0), options=SfMOptions(), names=None):
    """Full incremental reconstruction of the component holding the initial pair."""
    if intrinsics is None:
        intrinsics = CameraIntrinsics.default_for(*image_size)
        refine = True if options.refine_intrinsics is None else options.refine_intrinsics
    else:
        refine = bool(options.refine_intrinsics)
    rng = np.random.default_rng(options.seed)
    a, b = select_initial_pair(graph, keypoints, intrinsics, options.min_init_angle)
    rec = initialize_two_view(graph, a, b, keypoints, intrinsics, image_size)
    rec.names = dict(names or {})
    ba_global = BAOptions(loss_scale=options.loss_scale, refine_intrinsics=refine)
    ba_local = BAOptions(loss_scale=options.loss_scale, refine_intrinsics=False)
    bundle_adjust(rec, ba_global)
    filter_outliers(rec, options.max_reproj, options.min_tri_angle)
    last_global = len(rec.poses)
    while len(rec.poses) < len(graph.nodes):
        try:
            img, _ = register_next_image(rec, graph, rng, options.min_2d3d, options.max_reproj)
        except NoRegistrableImage:
            break
        triangulate_tracks(rec, graph, options.max_reproj, options.min_tri_angle)
        bundle_adjust(rec, ba_local, images=local_window(rec, img, options.local_ba_size))
        filter_outliers(rec, options.max_reproj, options.min_tri_angle)
        if len(rec.poses) >= options.global_ba_growth * last_global:
            bundle_adjust(rec, ba_global)
            filter_outliers(rec, options.max_reproj, options.min_tri_angle)
            last_global = len(rec.poses)
    # tracks that became triangulable after the last registrations
    triangulate_tracks(rec, graph, options.max_reproj, options.min_tri_angle)
    bundle_adjust(rec, ba_global)
    filter_outliers(rec, options.max_reproj, options.min_tri_angle)
    unreg = [i for i in graph.nodes if i not in rec.poses]
    if unreg:
        rec.log.append(f"unregistered images: {unreg}")
    return rec


# ------------------------------------------------------------ evaluation


def umeyama(src, dst, with_scale=True):
    """Similarity (s, R, t) minimising ``sum ||s R src_i + t - dst_i||^2``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        S[2, 2] = -1
    R = u @ S @ vt
    var = np.mean(np.sum(xs * xs, axis=1))
    s = float(np.trace(np.diag(d) @ S) / var) if with_scale else 1.0
    return s, R, mu_d - s * R @ mu_s


def transform_reconstruction(rec, s, R, t):
    """Apply ``X -> s R X + t`` to the world frame of ``rec`` (in place)."""
    for img, pose in list(rec.poses.items()):
        Rc = pose.R @ R.T
        rec.poses[img] = Pose.from_rt(Rc, s * pose.t - Rc @ t)
    for pt in rec.points.values():
        pt.xyz = s * R @ pt.xyz + t
    if rec.gauge is not None:
        g0, g1, base = rec.gauge
        rec.gauge = (g0, g1, base * s)
    return rec


def pose_errors(rec, gt_poses):
    """Align estimated centres to ground truth; per-image (rotation deg, centre distance)."""
    ids = [i for i in rec.registered if i in gt_poses]
    est = np.array([rec.poses[i].center for i in ids])
    gt = np.array([gt_poses[i].center for i in ids])
    s, R, t = umeyama(est, gt)
    out = {}
    for i, c_est, c_gt in zip(ids, est, gt):
        R_al = rec.poses[i].R @ R.T
        rot = np.degrees(np.arccos(np.clip((np.trace(R_al.T @ gt_poses[i].R) - 1) / 2, -1, 1)))
        out[i] = (float(rot), float(np.linalg.norm(s * R @ c_est + t - c_gt)))
    return out, (s, R, t)


# ------------------------------------------------------------ export


def export_text(rec, directory):
    """Write cameras.txt, images.txt and points3D.txt."""
    os.makedirs(directory, exist_ok=True)
    intr = rec.intrinsics
    w, h = rec.image_size
    feat_to_point = {}
    for pid, pt in rec.points.items():
        for i, f in pt.track:
            feat_to_point[(i, f)] = pid
    with open(os.path.join(directory, "cameras.txt"), "w") as fh:
        fh.write("# CAMERA_ID MODEL WIDTH HEIGHT fx fy cx cy k1\n")
        fh.write(f"1 PINHOLE_K1 {w} {h} {intr.fx:.17g} {intr.fy:.17g} {intr.cx:.17g} {intr.cy:.17g} {intr.k1:.17g}\n")
    with open(os.path.join(directory, "images.txt"), "w") as fh:
        fh.write("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID), POINT3D_ID -1 if untriangulated\n")
        for img in rec.registered:
            pose = rec.poses[img]
            q, t = pose.q, pose.t
            name = rec.names.get(img, f"{img:06d}")
            fh.write(f"{img} {q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g} {t[0]:.17g} {t[1]:.17g} {t[2]:.17g} 1 {name}\n")
            kp = rec.keypoints[img]
            fh.write(" ".join(f"{x:.17g} {y:.17g} {feat_to_point.get((img, f), -1)}"
                              for f, (x, y) in enumerate(kp)) + "\n")
    with open(os.path.join(directory, "points3D.txt"), "w") as fh:
        fh.write("# POINT3D_ID X Y Z ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for pid in sorted(rec.points):
            pt = rec.points[pid]
            x, y, z = pt.xyz
            track = " ".join(f"{i} {f}" for i, f in pt.track)
            fh.write(f"{pid} {x:.17g} {y:.17g} {z:.17g} {pt.error:.17g} {track}\n")


def read_text(directory):
    """Inverse of :func:`export_text`."""
    with open(os.path.join(directory, "cameras.txt")) as fh:
        line = [ln for ln in fh if not ln.startswith("#")][0].split()
    w, h = int(line[2]), int(line[3])
    intr = CameraIntrinsics(*[float(v) for v in line[4:9]])
    poses, names, keypoints = {}, {}, {}
    with open(os.path.join(directory, "images.txt")) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    for head, obs in zip(lines[0::2], lines[1::2]):
        parts = head.split()
        img = int(parts[0])
        q = [float(v) for v in parts[1:5]]
        t = [float(v) for v in parts[5:8]]
        poses[img] = Pose(q, t)
        names[img] = parts[9] if len(parts) > 9 else str(img)
        vals = obs.split()
        keypoints[img] = np.array([[float(vals[k]), float(vals[k + 1])] for k in range(0, len(vals), 3)]).reshape(-1, 2)
    rec = Reconstruction(intr, keypoints, (w, h), poses, {}, None, names)
    with open(os.path.join(directory, "points3D.txt")) as fh:
        for ln in fh:
            if ln.startswith("#") or not ln.strip():
                continue
            parts = ln.split()
            pid = int(parts[0])
            xyz = np.array([float(v) for v in parts[1:4]])
            tr = [int(v) for v in parts[5:]]
            rec.points[pid] = Point3D(xyz, list(zip(tr[0::2], tr[1::2])), float(parts[4]))
    return rec


def export_ply(rec, path, binary=True):
    _, X = rec.point_array()
    write_ply(path, X, binary=binary)

"""Synthetic scenes shared by unit and acceptance tests."""

import numpy as np

from evrecon.camera import CameraIntrinsics, Pose, look_at, skew, so3_exp
from evrecon.twoview import homography_transfer_error, sampson_distance

INTR = CameraIntrinsics(400.0, 400.0, 320.0, 240.0)
IMAGE = (640, 480)


def homography_pair(rng, n_in=50, n_out=None, screen=True):
    """Exact correspondences under a random homography plus uniform outliers.

    With ``screen`` an outlier is redrawn while its transfer error under the
    generating model is below twice the threshold, so it cannot be confused
    with an inlier.  Rows are shuffled; returns (x1, x2, H, inlier mask).
    """
    H = np.eye(3) + rng.normal(scale=[[0.1, 0.1, 20], [0.1, 0.1, 20], [1e-4, 1e-4, 0]])
    H /= H[2, 2]
    x1 = rng.uniform([0, 0], IMAGE, (n_in, 2))
    p = np.c_[x1, np.ones(n_in)] @ H.T
    x2 = p[:, :2] / p[:, 2:]
    return _with_outliers(rng, x1, x2, H, lambda a, b: homography_transfer_error(H, a, b), 2.0, n_out, screen)


def essential_pair(rng, n_in=50, n_out=None, screen=True, threshold=1.5):
    """Exact projections of random depths through a random relative pose.

    Outliers are screened against ``threshold`` (Sampson distance, px).
    """
    R = so3_exp(rng.normal(size=3) * 0.1)
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    X = np.c_[rng.uniform(-2, 2, (n_in, 2)), rng.uniform(4, 8, n_in)]
    K = INTR.K
    x1 = ((X / X[:, 2:]) @ K.T)[:, :2]
    Xc = X @ R.T + t
    x2 = ((Xc / Xc[:, 2:]) @ K.T)[:, :2]
    E = skew(t) @ R
    Ki = np.linalg.inv(K)
    F = Ki.T @ E @ Ki
    return _with_outliers(rng, x1, x2, E, lambda a, b: sampson_distance(F, a, b), threshold, n_out, screen)


def _with_outliers(rng, x1, x2, M, residual, threshold, n_out, screen):
    n_in = len(x1)
    n_out = int(round(0.2 * n_in / 0.8)) if n_out is None else n_out
    o1, o2 = [], []
    while len(o1) < n_out:
        u = rng.uniform([0, 0], IMAGE, (1, 2))
        v = rng.uniform([0, 0], IMAGE, (1, 2))
        if not screen or residual(u, v)[0] > 2 * threshold:
            o1.append(u[0])
            o2.append(v[0])
    a = np.r_[x1, np.reshape(o1, (-1, 2))]
    b = np.r_[x2, np.reshape(o2, (-1, 2))]
    inl = np.r_[np.ones(n_in, bool), np.zeros(n_out, bool)]
    perm = rng.permutation(len(a))
    return a[perm], b[perm], M, inl[perm]


def orbit_cameras(views=10, radius=6.0, seed=0):
    """Cameras on a ring looking at the origin, plus intrinsics."""
    rng = np.random.default_rng(seed)
    poses = []
    for k in range(views):
        a = 2 * np.pi * k / views * 0.35
        c = np.array([radius * np.sin(a), -1.0 + 0.1 * rng.normal(), -radius * np.cos(a)])
        poses.append(look_at(c, [0.0, 0.0, 0.0]))
    return poses


def random_points(rng, n, half=1.5):
    return rng.uniform(-half, half, (n, 3))


def project(pose, intr, X):
    return intr.project(pose.transform(X))


def small_perturbation(pose, rng, rot_sigma, trans_sigma):
    R = so3_exp(rng.normal(scale=rot_sigma, size=3)) @ pose.R
    return Pose.from_rt(R, pose.t + rng.normal(scale=trans_sigma, size=3))


def relative_essential(p1, p2):
    R = p2.R @ p1.R.T
    return skew(p2.t - R @ p1.t) @ R


def scene_graph(poses, X, intr, edges=None, visible=None):
    """Exact keypoints (feature k of every image is point k) and E-verified edges.

    ``visible`` maps image -> indices of the points it sees (default all).
    Returns (graph, keypoints).
    """
    from evrecon.graph import VerifiedPair, build_scene_graph
    from evrecon.twoview import TwoViewGeometry

    n = len(poses)
    keypoints = {i: project(p, intr, X) for i, p in enumerate(poses)}
    visible = visible or {}
    edges = edges if edges is not None else [(a, b) for a in range(n) for b in range(a + 1, n)]
    pairs = []
    for a, b in edges:
        common = np.intersect1d(visible.get(a, np.arange(len(X))), visible.get(b, np.arange(len(X))))
        geom = TwoViewGeometry("E", relative_essential(poses[a], poses[b]), np.arange(len(common)))
        pairs.append(VerifiedPair(a, b, geom, np.stack([common, common], axis=1)))
    return build_scene_graph(list(range(n)), pairs), keypoints

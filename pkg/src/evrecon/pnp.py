"""Absolute pose: P3P minimal solver, RANSAC and reprojection refinement."""

import numpy as np
from numpy.polynomial import polynomial as P

from .bundle import FREE, BAOptions, BAProblem, solve
from .camera import Pose

PNP_THRESHOLD = 4.0  # px


def kabsch(A, B):
    """Rotation R and translation t minimising ``sum ||R A_i + t - B_i||^2``."""
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    H = (A - ca).T @ (B - cb)
    u, _, vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    R = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return R, cb - R @ ca


def p3p(bearings, X):
    """Camera poses (R, t) consistent with three bearing/world-point pairs.

    With depths ``s_i`` along the unit bearings, the law of cosines gives
    three quadratics; writing ``u = s2/s1`` and ``v = s3/s1`` and
    eliminating ``s1`` leaves two quadratics in ``u`` whose resultant is a
    quartic in ``v``.  Returns up to four (R, t) with ``X_c = R X + t``.
    """
    f = np.asarray(bearings, dtype=np.float64)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    X = np.asarray(X, dtype=np.float64)
    a2 = np.sum((X[1] - X[2]) ** 2)
    b2 = np.sum((X[0] - X[2]) ** 2)
    c2 = np.sum((X[0] - X[1]) ** 2)
    if min(a2, b2, c2) < 1e-18:
        return []
    ca, cb, cg = f[1] @ f[2], f[0] @ f[2], f[0] @ f[1]
    # polynomials in v, lowest degree first
    base = np.array([1.0, -2 * cb, 1.0])  # 1 + v^2 - 2 v cb
    p2 = np.array([b2])
    p1 = np.array([0.0, -2 * b2 * ca])
    p0 = P.polysub(np.array([0.0, 0.0, b2]), a2 * base)
    q2 = np.array([b2])
    q1 = np.array([-2 * b2 * cg])
    q0 = P.polysub(np.array([b2]), c2 * base)
    m = P.polymul
    t1 = P.polysub(m(p2, q0), m(p0, q2))
    t2 = P.polysub(m(p2, q1), m(p1, q2))
    t3 = P.polysub(m(p1, q0), m(p0, q1))
    res = P.polysub(m(t1, t1), m(t2, t3))
    res = np.trim_zeros(res, "b")
    if len(res) < 2:
        return []
    out = []
    for v in P.polyroots(res):
        if abs(v.imag) > 1e-6 * max(1.0, abs(v.real)):
            continue
        v = v.real
        dres = P.polyder(res)
        for _ in range(2):
            dv = P.polyval(v, dres)
            if dv == 0:
                break
            v -= P.polyval(v, res) / dv
        if v <= 0:
            continue
        den = P.polyval(v, p1) - P.polyval(v, q1)
        if abs(den) < 1e-14:
            continue
        u = -(P.polyval(v, p0) - P.polyval(v, q0)) / den
        if u <= 0:
            continue
        g = 1 + v * v - 2 * v * cb
        if g <= 0:
            continue
        s1 = np.sqrt(b2 / g)
        Xc = np.stack([s1 * f[0], u * s1 * f[1], v * s1 * f[2]])
        R, t = kabsch(X, Xc)
        out.append((R, t))
    return out


def _reproj(R, t, X, xn):
    Xc = X @ R.T + t
    with np.errstate(divide="ignore", invalid="ignore"):
        e = Xc[:, :2] / Xc[:, 2:3] - xn
    err = np.sqrt(np.sum(e * e, axis=1))
    return np.where((Xc[:, 2] > 0) & np.isfinite(err), err, np.inf)


def refine_pose(pose, intr, X, uv, loss_scale=None, max_iterations=50):
    """Per-image LM on reprojection error; points and intrinsics held fixed."""
    n = len(X)
    prob = BAProblem(intr.params, pose.R[None], pose.t[None], X, np.zeros(n, int), np.arange(n), uv,
                     [FREE], loss_scale=loss_scale, point_fixed=np.ones(n, dtype=bool))
    out, _ = solve(prob, BAOptions(max_iterations=max_iterations, loss_scale=loss_scale))
    return Pose.from_rt(out.R[0], out.t[0])


def solve_pnp_ransac(X, uv, intr, rng, threshold=PNP_THRESHOLD, confidence=0.999, max_iters=10_000,
                     min_inliers=6):
    """Robust absolute pose from 2D-3D correspondences.

    ``uv`` are pixels; the threshold is compared in pixels (scaled by the
    mean focal length in normalised coordinates).  Returns (Pose, inlier
    mask) or (None, mask).
    """
    from .twoview import ransac_iterations

    X = np.asarray(X, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    n = len(X)
    if n < 4:
        return None, np.zeros(n, dtype=bool)
    xn = intr.normalize(uv)
    bear = np.concatenate([xn, np.ones((n, 1))], axis=1)
    f = 0.5 * (intr.fx + intr.fy)
    th = threshold / f
    best, best_mask, best_cost = None, np.zeros(n, dtype=bool), np.inf
    needed, it = max_iters, 0
    while it < min(needed, max_iters):
        it += 1
        s = rng.choice(n, 4, replace=False)
        for R, t in p3p(bear[s[:3]], X[s[:3]]):
            # the fourth point disambiguates the up-to-four solutions cheaply
            if _reproj(R, t, X[s[3:]], xn[s[3:]])[0] > th:
                continue
            e = _reproj(R, t, X, xn)
            cost = float(np.sum(np.minimum(e, th) ** 2))
            if cost < best_cost:
                best, best_cost = (R, t), cost
                best_mask = e <= th
                needed = ransac_iterations(best_mask.sum() / n, 4, confidence, max_iters)
    if best is None or best_mask.sum() < min_inliers:
        return None, best_mask
    pose = Pose.from_rt(*best)
    pose = refine_pose(pose, intr, X[best_mask], uv[best_mask])
    e = _reproj(pose.R, pose.t, X, xn)
    return pose, e <= th

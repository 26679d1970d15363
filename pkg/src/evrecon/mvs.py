"""Dense reconstruction: PatchMatch depth/normal maps and consistency fusion.

Each pixel of a reference view carries a slanted plane (depth along the
pixel ray plus a unit normal in the reference camera frame).  The plane
induces a homography into each neighbour view; matching cost is one minus
the normalised cross-correlation over a square window, averaged over the
neighbours where the warped window is fully visible.
"""

import math
import os
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .camera import triangulation_angle_deg
from .errors import NoUsableNeighbors
from .fileio import write_pfm, write_ply

FLAT_VARIANCE = 1e-8


@dataclass(frozen=True)
class StereoParams:
    radius: int = 5
    iterations: int = 3
    cost_threshold: float = 0.6
    num_neighbors: int = 4
    min_angle: float = 2.0
    max_angle: float = 45.0
    refine_steps: int = 4
    depth_range: tuple | None = None  # (d_min, d_max); default from sparse points
    seed: int = 0

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("window radius must be >= 1")
        if self.depth_range is not None and not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ValueError("need 0 < d_min < d_max")


@dataclass(eq=False)
class DepthMap:
    ref: int
    depth: np.ndarray  # (h, w), 0 = invalid
    normal: np.ndarray  # (h, w, 3), reference camera frame
    cost: np.ndarray  # (h, w)
    d_min: float = 0.0
    d_max: float = 0.0


@dataclass(eq=False)
class DensePointCloud:
    points: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3) uint8
    normals: np.ndarray  # (N, 3)
    support: np.ndarray  # (N,) number of consistent views, reference included
    pixels: list = None  # per point: [(view, x, y), ...] supporting pixels

    def __len__(self):
        return len(self.points)


# ------------------------------------------------------------ geometry


def plane_homography(K_ref, K_src, R_rel, t_rel, n, X0):
    """Homography of the plane through ``X0`` with normal ``n`` (reference frame).

    ``R_rel, t_rel`` map reference-camera points into the source camera.
    """
    return K_src @ (R_rel + np.outer(t_rel, n) / (n @ X0)) @ np.linalg.inv(K_ref)


def relative_motion(pose_ref, pose_src):
    R = pose_src.R @ pose_ref.R.T
    return R, pose_src.t - R @ pose_ref.t


def select_stereo_neighbors(rec, ref, k=4, min_angle=2.0, max_angle=45.0):
    """Top-``k`` registered images by shared sparse points within the angle band.

    The angle of a candidate is the median triangulation angle of the
    shared points.
    """
    if ref not in rec.poses:
        raise NoUsableNeighbors(f"image {ref} is not registered")
    c_ref = rec.poses[ref].center
    shared = {}
    for pt in rec.points.values():
        imgs = {i for i, _ in pt.track}
        if ref not in imgs:
            continue
        for i in imgs - {ref}:
            shared.setdefault(i, []).append(pt.xyz)
    cands = []
    for i, X in shared.items():
        ang = float(np.median(triangulation_angle_deg(c_ref, rec.poses[i].center, np.array(X))))
        if min_angle <= ang <= max_angle:
            cands.append((-len(X), i))
    if not cands:
        raise NoUsableNeighbors(f"no neighbour of image {ref} within [{min_angle}, {max_angle}] degrees")
    cands.sort()
    return [i for _, i in cands[:k]]


def sparse_depth_range(rec, ref):
    """[0.25 x min, 4 x max] of the depths of sparse points seen in ``ref``."""
    pose = rec.poses[ref]
    X = np.array([pt.xyz for pt in rec.points.values() if any(i == ref for i, _ in pt.track)]).reshape(-1, 3)
    z = pose.transform(X)[:, 2] if len(X) else np.zeros(0)
    z = z[z > 0]
    if len(z) == 0:
        raise NoUsableNeighbors(f"image {ref} sees no sparse points in front of it")
    return 0.25 * float(z.min()), 4.0 * float(z.max())


# ------------------------------------------------------------ kernels


@numba.njit(cache=True)
def _bilinear(img, x, y):
    h, w = img.shape
    if not (x >= 0.0 and y >= 0.0 and x <= w - 1 and y <= h - 1):
        return math.nan
    x0 = min(int(x), w - 2)
    y0 = min(int(y), h - 2)
    fx = x - x0
    fy = y - y0
    return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x0 + 1])
            + fy * ((1 - fx) * img[y0 + 1, x0] + fx * img[y0 + 1, x0 + 1]))


@numba.njit(cache=True)
def _plane_cost(ref, srcs, Kinv, Ks, Rs, ts, x, y, d, n, radius):
    """Mean (1 - NCC) over neighbours; 2 for a flat or unmatched window."""
    h, w = ref.shape
    rx = Kinv[0, 0] * x + Kinv[0, 1] * y + Kinv[0, 2]
    ry = Kinv[1, 0] * x + Kinv[1, 1] * y + Kinv[1, 2]
    rz = Kinv[2, 0] * x + Kinv[2, 1] * y + Kinv[2, 2]
    nX0 = d * (n[0] * rx + n[1] * ry + n[2] * rz)
    if nX0 >= 0.0:
        return 2.0
    # reference window statistics
    cnt = 0
    sr = 0.0
    srr = 0.0
    for dy in range(-radius, radius + 1):
        yy = y + dy
        if yy < 0 or yy >= h:
            continue
        for dx in range(-radius, radius + 1):
            xx = x + dx
            if xx < 0 or xx >= w:
                continue
            v = ref[yy, xx]
            sr += v
            srr += v * v
            cnt += 1
    mr = sr / cnt
    var_r = srr / cnt - mr * mr
    if var_r < FLAT_VARIANCE:
        return 2.0
    total = 0.0
    used = 0
    H = np.empty((3, 3))
    M = np.empty((3, 3))
    for s in range(srcs.shape[0]):
        for i in range(3):
            for j in range(3):
                M[i, j] = Rs[s, i, j] + ts[s, i] * n[j] / nX0
        # H = Ks M Kinv
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for a in range(3):
                    ka = 0.0
                    for b in range(3):
                        ka += M[a, b] * Kinv[b, j]
                    acc += Ks[s, i, a] * ka
                H[i, j] = acc
        src = srcs[s]
        ss = 0.0
        sss = 0.0
        srs = 0.0
        ok = True
        for dy in range(-radius, radius + 1):
            yy = y + dy
            if yy < 0 or yy >= h:
                continue
            for dx in range(-radius, radius + 1):
                xx = x + dx
                if xx < 0 or xx >= w:
                    continue
                pz = H[2, 0] * xx + H[2, 1] * yy + H[2, 2]
                if pz <= 0.0:
                    ok = False
                    break
                px = (H[0, 0] * xx + H[0, 1] * yy + H[0, 2]) / pz
                py = (H[1, 0] * xx + H[1, 1] * yy + H[1, 2]) / pz
                v = _bilinear(src, px, py)
                if math.isnan(v):
                    ok = False
                    break
                r = ref[yy, xx]
                ss += v
                sss += v * v
                srs += r * v
            if not ok:
                break
        if not ok:
            continue
        ms = ss / cnt
        var_s = sss / cnt - ms * ms
        if var_s < FLAT_VARIANCE:
            ncc = 0.0
        else:
            ncc = (srs / cnt - mr * ms) / math.sqrt(var_r * var_s)
            ncc = max(-1.0, min(1.0, ncc))
        total += 1.0 - ncc
        used += 1
    if used == 0:
        return 2.0
    return total / used


@numba.njit(cache=True)
def _valid_normal(n, rx, ry, rz):
    return n[2] < 0.0 and n[0] * rx + n[1] * ry + n[2] * rz < 0.0


@numba.njit(cache=True)
def _random_normal(rx, ry, rz):
    n = np.empty(3)
    for _ in range(100):
        a = np.random.normal()
        b = np.random.normal()
        c = np.random.normal()
        nn = math.sqrt(a * a + b * b + c * c)
        if nn == 0.0:
            continue
        n[0] = a / nn
        n[1] = b / nn
        n[2] = c / nn
        if n[0] * rx + n[1] * ry + n[2] * rz > 0.0:
            n[0] = -n[0]
            n[1] = -n[1]
            n[2] = -n[2]
        if _valid_normal(n, rx, ry, rz):
            return n
    # fall back to fronto-parallel
    n[0] = 0.0
    n[1] = 0.0
    n[2] = -1.0
    return n


@numba.njit(cache=True)
def _seed(s):
    np.random.seed(s)


@numba.njit(cache=True)
def _init(ref, srcs, Kinv, Ks, Rs, ts, depth, normal, cost, dmin, dmax, radius):
    h, w = ref.shape
    for y in range(h):
        for x in range(w):
            rx = Kinv[0, 0] * x + Kinv[0, 1] * y + Kinv[0, 2]
            ry = Kinv[1, 0] * x + Kinv[1, 1] * y + Kinv[1, 2]
            rz = Kinv[2, 0] * x + Kinv[2, 1] * y + Kinv[2, 2]
            depth[y, x] = dmin + np.random.random() * (dmax - dmin)
            normal[y, x] = _random_normal(rx, ry, rz)
            cost[y, x] = _plane_cost(ref, srcs, Kinv, Ks, Rs, ts, x, y, depth[y, x], normal[y, x], radius)


@numba.njit(cache=True)
def _try(ref, srcs, Kinv, Ks, Rs, ts, depth, normal, cost, x, y, d, n, dmin, dmax, radius):
    if not (d >= dmin and d <= dmax):
        return False
    c = _plane_cost(ref, srcs, Kinv, Ks, Rs, ts, x, y, d, n, radius)
    if c < cost[y, x]:
        cost[y, x] = c
        depth[y, x] = d
        normal[y, x, 0] = n[0]
        normal[y, x, 1] = n[1]
        normal[y, x, 2] = n[2]
        return True
    return False


@numba.njit(cache=True)
def _sweep(ref, srcs, Kinv, Ks, Rs, ts, depth, normal, cost, dmin, dmax, radius, forward, refine_steps):
    """One raster sweep: propagate from the two already-visited neighbours, then refine."""
    h, w = ref.shape
    step = 1 if forward else -1
    n2 = np.empty(3)
    for k in range(h * w):
        idx = k if forward else h * w - 1 - k
        y = idx // w
        x = idx % w
        rx = Kinv[0, 0] * x + Kinv[0, 1] * y + Kinv[0, 2]
        ry = Kinv[1, 0] * x + Kinv[1, 1] * y + Kinv[1, 2]
        rz = Kinv[2, 0] * x + Kinv[2, 1] * y + Kinv[2, 2]
        for nb in range(2):
            qx = x - step if nb == 0 else x
            qy = y if nb == 0 else y - step
            if qx < 0 or qx >= w or qy < 0 or qy >= h:
                continue
            nq = normal[qy, qx]
            if not _valid_normal(nq, rx, ry, rz):
                continue
            qrx = Kinv[0, 0] * qx + Kinv[0, 1] * qy + Kinv[0, 2]
            qry = Kinv[1, 0] * qx + Kinv[1, 1] * qy + Kinv[1, 2]
            qrz = Kinv[2, 0] * qx + Kinv[2, 1] * qy + Kinv[2, 2]
            dq = depth[qy, qx]
            num = dq * (nq[0] * qrx + nq[1] * qry + nq[2] * qrz)
            den = nq[0] * rx + nq[1] * ry + nq[2] * rz
            if den == 0.0:
                continue
            n2[0] = nq[0]
            n2[1] = nq[1]
            n2[2] = nq[2]
            _try(ref, srcs, Kinv, Ks, Rs, ts, depth, normal, cost, x, y, num / den, n2, dmin, dmax, radius)
        d_rad = 0.25 * (dmax - dmin)
        n_rad = 0.5
        for _ in range(refine_steps):
            d = depth[y, x] + (2.0 * np.random.random() - 1.0) * d_rad
            n2[0] = normal[y, x, 0] + (2.0 * np.random.random() - 1.0) * n_rad
            n2[1] = normal[y, x, 1] + (2.0 * np.random.random() - 1.0) * n_rad
            n2[2] = normal[y, x, 2] + (2.0 * np.random.random() - 1.0) * n_rad
            nn = math.sqrt(n2[0] ** 2 + n2[1] ** 2 + n2[2] ** 2)
            d_rad *= 0.5
            n_rad *= 0.5
            if nn == 0.0:
                continue
            n2[0] /= nn
            n2[1] /= nn
            n2[2] /= nn
            if not _valid_normal(n2, rx, ry, rz):
                continue
            _try(ref, srcs, Kinv, Ks, Rs, ts, depth, normal, cost, x, y, d, n2, dmin, dmax, radius)


# ------------------------------------------------------------ PatchMatch


class PatchMatchState:
    """Mutable per-view state; exposes single sweeps for inspection."""

    def __init__(self, ref_img, src_imgs, K_ref, K_srcs, R_rels, t_rels, d_min, d_max, radius=5):
        self.ref = np.ascontiguousarray(ref_img, dtype=np.float64)
        self.srcs = np.ascontiguousarray(np.stack(src_imgs), dtype=np.float64)
        if self.srcs.shape[1:] != self.ref.shape:
            raise ValueError("neighbour images must match the reference size")
        self.Kinv = np.linalg.inv(np.asarray(K_ref, dtype=np.float64))
        self.Ks = np.ascontiguousarray(np.stack(K_srcs), dtype=np.float64)
        self.Rs = np.ascontiguousarray(np.stack(R_rels), dtype=np.float64)
        self.ts = np.ascontiguousarray(np.stack(t_rels), dtype=np.float64)
        self.d_min, self.d_max = float(d_min), float(d_max)
        self.radius = int(radius)
        h, w = self.ref.shape
        self.depth = np.zeros((h, w))
        self.normal = np.zeros((h, w, 3))
        self.normal[..., 2] = -1.0
        self.cost = np.full((h, w), 2.0)

    def initialize(self, seed):
        _seed(seed)
        _init(self.ref, self.srcs, self.Kinv, self.Ks, self.Rs, self.ts, self.depth, self.normal, self.cost,
              self.d_min, self.d_max, self.radius)

    def cost_of(self, x, y, d, n):
        return _plane_cost(self.ref, self.srcs, self.Kinv, self.Ks, self.Rs, self.ts, int(x), int(y),
                           float(d), np.asarray(n, dtype=np.float64), self.radius)

    def recompute_costs(self):
        h, w = self.ref.shape
        for y in range(h):
            for x in range(w):
                self.cost[y, x] = self.cost_of(x, y, self.depth[y, x], self.normal[y, x])

    def sweep(self, forward=True, refine_steps=0):
        _sweep(self.ref, self.srcs, self.Kinv, self.Ks, self.Rs, self.ts, self.depth, self.normal, self.cost,
               self.d_min, self.d_max, self.radius, forward, refine_steps)


def patchmatch_depth(ref_img, src_imgs, K_ref, K_srcs, R_rels, t_rels, d_min, d_max, params=StereoParams(),
                     ref_id=0):
    """Depth/normal map for one reference view.

    Each iteration runs a forward raster sweep then a reverse one.  Pixels
    whose final cost exceeds ``params.cost_threshold`` get depth 0.
    """
    st = PatchMatchState(ref_img, src_imgs, K_ref, K_srcs, R_rels, t_rels, d_min, d_max, params.radius)
    st.initialize(params.seed * 1000003 + ref_id)
    for _ in range(params.iterations):
        st.sweep(True, params.refine_steps)
        st.sweep(False, params.refine_steps)
    depth = np.where(st.cost <= params.cost_threshold, st.depth, 0.0)
    return DepthMap(ref_id, depth, st.normal, st.cost, d_min, d_max)


def _undistort(img, intr):
    """Resample an image to the distortion-free pinhole model."""
    if intr.k1 == 0.0:
        return np.asarray(img, dtype=np.float64)
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xx - intr.cx) / intr.fx
    v = (yy - intr.cy) / intr.fy
    d = 1.0 + intr.k1 * (u * u + v * v)
    coords = np.stack([intr.fy * d * v + intr.cy, intr.fx * d * u + intr.cx])
    return ndimage.map_coordinates(np.asarray(img, dtype=np.float64), coords, order=1, mode="nearest")


def compute_depth_maps(rec, images, params=StereoParams(), refs=None):
    """PatchMatch for every registered view that has usable neighbours."""
    intr = rec.intrinsics
    K = intr.K
    und = {i: _undistort(images[i], intr) for i in rec.registered}
    maps = {}
    for ref in (refs if refs is not None else rec.registered):
        try:
            nbrs = select_stereo_neighbors(rec, ref, params.num_neighbors, params.min_angle, params.max_angle)
            d_min, d_max = params.depth_range or sparse_depth_range(rec, ref)
        except NoUsableNeighbors:
            continue
        rel = [relative_motion(rec.poses[ref], rec.poses[j]) for j in nbrs]
        maps[ref] = patchmatch_depth(und[ref], [und[j] for j in nbrs], K, [K] * len(nbrs),
                                     [r for r, _ in rel], [t for _, t in rel], d_min, d_max, params, ref)
    return maps


# ------------------------------------------------------------ fusion


@numba.njit(cache=True)
def _fuse(depths, normals, images, Ks, Kinvs, Rs, ts, reproj_tol, depth_tol, min_support, out_pts, out_nrm,
          out_col, out_sup, out_pix):
    V, h, w = depths.shape
    used = np.zeros((V, h, w), dtype=np.bool_)
    count = 0
    sv = np.empty(V, dtype=np.int64)
    sx = np.empty(V, dtype=np.int64)
    sy = np.empty(V, dtype=np.int64)
    sX = np.empty((V, 3))
    keep = np.empty(V, dtype=np.bool_)
    for v in range(V):
        for y in range(h):
            for x in range(w):
                d = depths[v, y, x]
                if d <= 0.0 or used[v, y, x]:
                    continue
                Xw = _backproject(Kinvs[v], Rs[v], ts[v], x, y, d)
                m = 0
                sv[m] = v
                sx[m] = x
                sy[m] = y
                sX[m] = Xw
                m += 1
                for u in range(V):
                    if u == v:
                        continue
                    px, py, z = _project(Ks[u], Rs[u], ts[u], Xw)
                    if z <= 0.0:
                        continue
                    ix = int(math.floor(px + 0.5))
                    iy = int(math.floor(py + 0.5))
                    if ix < 0 or iy < 0 or ix >= w or iy >= h:
                        continue
                    du = depths[u, iy, ix]
                    if du <= 0.0 or used[u, iy, ix]:
                        continue
                    if abs(z - du) > depth_tol * du:
                        continue
                    Xu = _backproject(Kinvs[u], Rs[u], ts[u], ix, iy, du)
                    qx, qy, qz = _project(Ks[v], Rs[v], ts[v], Xu)
                    if qz <= 0.0 or (qx - x) ** 2 + (qy - y) ** 2 > reproj_tol * reproj_tol:
                        continue
                    sv[m] = u
                    sx[m] = ix
                    sy[m] = iy
                    sX[m] = Xu
                    m += 1
                if m < min_support:
                    continue
                for k in range(m):
                    keep[k] = True
                # average, then drop views the mean no longer projects into
                mean = np.zeros(3)
                for _ in range(5):
                    mean[:] = 0.0
                    nk = 0
                    for k in range(m):
                        if keep[k]:
                            mean += sX[k]
                            nk += 1
                    if nk < min_support:
                        break
                    mean /= nk
                    changed = False
                    for k in range(m):
                        if not keep[k]:
                            continue
                        px, py, z = _project(Ks[sv[k]], Rs[sv[k]], ts[sv[k]], mean)
                        if z <= 0.0 or (px - sx[k]) ** 2 + (py - sy[k]) ** 2 > reproj_tol * reproj_tol:
                            keep[k] = False
                            changed = True
                    if not changed:
                        break
                nk = 0
                for k in range(m):
                    if keep[k]:
                        nk += 1
                if nk < min_support:
                    continue
                # the final mean must match the surviving set
                ok = True
                mean[:] = 0.0
                for k in range(m):
                    if keep[k]:
                        mean += sX[k]
                mean /= nk
                for k in range(m):
                    if keep[k]:
                        px, py, z = _project(Ks[sv[k]], Rs[sv[k]], ts[sv[k]], mean)
                        if z <= 0.0 or (px - sx[k]) ** 2 + (py - sy[k]) ** 2 > reproj_tol * reproj_tol:
                            ok = False
                if not ok:
                    continue
                nrm = np.zeros(3)
                col = 0.0
                j = 0
                for k in range(m):
                    if not keep[k]:
                        continue
                    a = sv[k]
                    nc = normals[a, sy[k], sx[k]]
                    # camera-frame normal to world: R^T n
                    for r in range(3):
                        nrm[r] += Rs[a, 0, r] * nc[0] + Rs[a, 1, r] * nc[1] + Rs[a, 2, r] * nc[2]
                    col += images[a, sy[k], sx[k]]
                    used[a, sy[k], sx[k]] = True
                    out_pix[count, j, 0] = a
                    out_pix[count, j, 1] = sx[k]
                    out_pix[count, j, 2] = sy[k]
                    j += 1
                nn = math.sqrt(nrm[0] ** 2 + nrm[1] ** 2 + nrm[2] ** 2)
                if nn > 0:
                    nrm /= nn
                out_pts[count] = mean
                out_nrm[count] = nrm
                out_col[count] = col / nk
                out_sup[count] = nk
                count += 1
    return count


@numba.njit(cache=True)
def _backproject(Kinv, R, t, x, y, d):
    c = np.empty(3)
    for i in range(3):
        c[i] = d * (Kinv[i, 0] * x + Kinv[i, 1] * y + Kinv[i, 2]) - t[i]
    X = np.empty(3)
    for i in range(3):
        X[i] = R[0, i] * c[0] + R[1, i] * c[1] + R[2, i] * c[2]
    return X


@numba.njit(cache=True)
def _project(K, R, t, X):
    c0 = R[0, 0] * X[0] + R[0, 1] * X[1] + R[0, 2] * X[2] + t[0]
    c1 = R[1, 0] * X[0] + R[1, 1] * X[1] + R[1, 2] * X[2] + t[1]
    c2 = R[2, 0] * X[0] + R[2, 1] * X[1] + R[2, 2] * X[2] + t[2]
    if c2 <= 0.0:
        return 0.0, 0.0, c2
    px = (K[0, 0] * c0 + K[0, 1] * c1 + K[0, 2] * c2) / c2
    py = (K[1, 0] * c0 + K[1, 1] * c1 + K[1, 2] * c2) / c2
    return px, py, c2


def fuse_depth_maps(depth_maps, poses, intrinsics, images=None, reproj_tol=1.0, depth_tol=0.01, min_support=2):
    """Merge depth maps into a point cloud of multi-view consistent points.

    ``depth_maps`` maps view id to :class:`DepthMap`; views are visited in
    ascending id order.  ``min_support`` counts the reference view itself.
    """
    ids = sorted(depth_maps)
    if len(ids) < 2:
        return DensePointCloud(np.zeros((0, 3)), np.zeros((0, 3), np.uint8), np.zeros((0, 3)),
                               np.zeros(0, np.int64), [])
    depths = np.stack([depth_maps[i].depth for i in ids]).astype(np.float64)
    normals = np.stack([depth_maps[i].normal for i in ids]).astype(np.float64)
    V, h, w = depths.shape
    imgs = (np.stack([np.asarray(images[i], dtype=np.float64) for i in ids]) if images is not None
            else np.full((V, h, w), 0.5))
    K = np.asarray(intrinsics.K, dtype=np.float64)
    Ks = np.stack([K] * V)
    Kinvs = np.stack([np.linalg.inv(K)] * V)
    Rs = np.stack([poses[i].R for i in ids])
    ts = np.stack([poses[i].t for i in ids])
    cap = int(np.count_nonzero(depths > 0))
    out_pts = np.zeros((cap, 3))
    out_nrm = np.zeros((cap, 3))
    out_col = np.zeros(cap)
    out_sup = np.zeros(cap, dtype=np.int64)
    out_pix = np.full((cap, V, 3), -1, dtype=np.int64)
    n = _fuse(depths, normals, imgs, Ks, Kinvs, Rs, ts, float(reproj_tol), float(depth_tol), int(min_support),
              out_pts, out_nrm, out_col, out_sup, out_pix)
    colors = np.repeat(np.clip(np.rint(out_col[:n] * 255), 0, 255).astype(np.uint8)[:, None], 3, axis=1)
    pixels = [[(ids[a], int(x), int(y)) for a, x, y in out_pix[k] if a >= 0] for k in range(n)]
    return DensePointCloud(out_pts[:n].copy(), colors, out_nrm[:n].copy(), out_sup[:n].copy(), pixels)


def write_depth_map(directory, dm):
    os.makedirs(directory, exist_ok=True)
    write_pfm(os.path.join(directory, f"depth_{dm.ref:06d}.pfm"), dm.depth.astype(np.float32))
    write_pfm(os.path.join(directory, f"normal_{dm.ref:06d}.pfm"), dm.normal.astype(np.float32))


def write_dense_ply(path, cloud, binary=True):
    write_ply(path, cloud.points, colors=cloud.colors, normals=cloud.normals, binary=binary)

"""Two-view geometry: homography, fundamental and essential matrices.

Minimal/linear solvers plus RANSAC wrappers.  Point arrays are (N, 2)
pixel coordinates unless stated otherwise.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration

H_THRESHOLD = 2.0
F_THRESHOLD = 1.5
RANSAC_CONFIDENCE = 0.999
RANSAC_MAX_ITERS = 10_000
MIN_INLIERS = 15
PLANAR_RATIO = 0.9


def _hom(x):
    return np.concatenate([x, np.ones((len(x), 1))], axis=1)


def normalizing_transform(x):
    """Similarity moving the centroid to 0 and mean distance to sqrt(2)."""
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


# --------------------------------------------------------------- homography


def homography_dlt(x1, x2):
    """Normalised DLT for ``x2 ~ H x1`` from >= 4 correspondences; h33 = 1."""
    T1, T2 = normalizing_transform(x1), normalizing_transform(x2)
    p = _hom(x1) @ T1.T
    q = _hom(x2) @ T2.T
    n = len(p)
    A = np.zeros((2 * n, 9))
    A[0::2, 3:6] = -q[:, 2:3] * p
    A[0::2, 6:9] = q[:, 1:2] * p
    A[1::2, 0:3] = q[:, 2:3] * p
    A[1::2, 6:9] = -q[:, 0:1] * p
    _, _, vt = np.linalg.svd(A)
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(T2) @ Hn @ T1
    if abs(H[2, 2]) < 1e-12:
        return H / np.linalg.norm(H)
    return H / H[2, 2]


def homography_transfer_error(H, x1, x2):
    p = _hom(x1) @ H.T
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = p[:, :2] / p[:, 2:3]
    err = np.sqrt(((proj - x2) ** 2).sum(axis=1))
    return np.where(np.isfinite(err), err, np.inf)


# -------------------------------------------------------------- fundamental


def fundamental_8point(x1, x2):
    """Normalised 8-point algorithm with rank-2 projection; ``x2^T F x1 = 0``."""
    T1, T2 = normalizing_transform(x1), normalizing_transform(x2)
    p = _hom(x1) @ T1.T
    q = _hom(x2) @ T2.T
    A = (q[:, :, None] * p[:, None, :]).reshape(len(p), 9)
    _, _, vt = np.linalg.svd(A)
    F = vt[-1].reshape(3, 3)
    u, s, vt = np.linalg.svd(F)
    F = u @ np.diag([s[0], s[1], 0.0]) @ vt
    F = T2.T @ F @ T1
    return F / np.linalg.norm(F)


def sampson_distance(F, x1, x2):
    """First-order geometric error of ``x2^T F x1 = 0``, in pixels."""
    p = _hom(x1)
    q = _hom(x2)
    Fp = p @ F.T
    Ftq = q @ F
    num = np.sum(q * Fp, axis=1)
    den = Fp[:, 0] ** 2 + Fp[:, 1] ** 2 + Ftq[:, 0] ** 2 + Ftq[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(num) / np.sqrt(den)
    return np.where(np.isfinite(d), d, np.inf)


# ---------------------------------------------------------------- essential


def project_to_essential(E):
    u, s, vt = np.linalg.svd(E)
    sv = (s[0] + s[1]) / 2
    E = u @ np.diag([sv, sv, 0.0]) @ vt
    return E / np.linalg.norm(E)


def essential_linear(n1, n2):
    """Linear estimate from >= 8 normalised correspondences."""
    A = (_hom(n2)[:, :, None] * _hom(n1)[:, None, :]).reshape(len(n1), 9)
    _, _, vt = np.linalg.svd(A)
    return project_to_essential(vt[-1].reshape(3, 3))


# Polynomials in (x, y, z) up to degree 3, as coefficient vectors over a
# fixed monomial list.  Cubic monomials come first so that Gauss-Jordan
# elimination expresses them in the basis of the remaining ten.
_CUBIC = [(3, 0, 0), (0, 3, 0), (0, 0, 3), (2, 1, 0), (2, 0, 1), (1, 2, 0),
          (0, 2, 1), (1, 0, 2), (0, 1, 2), (1, 1, 1)]
_BASIS = [(2, 0, 0), (0, 2, 0), (0, 0, 2), (1, 1, 0), (1, 0, 1), (0, 1, 1),
          (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_MONO3 = _CUBIC + _BASIS
_IDX3 = {m: i for i, m in enumerate(_MONO3)}
_MONO1 = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_MONO2 = [m for m in _BASIS]
_IDX2 = {m: i for i, m in enumerate(_MONO2)}


def _product_map(ma, mb, idx):
    P = np.zeros((len(ma) * len(mb), len(idx)))
    for i, a in enumerate(ma):
        for j, b in enumerate(mb):
            m = tuple(u + v for u, v in zip(a, b))
            P[i * len(mb) + j, idx[m]] += 1.0
    return P


_P11 = _product_map(_MONO1, _MONO1, _IDX2)  # deg1 x deg1 -> deg2 (10)
_P21 = _product_map(_MONO2, _MONO1, _IDX3)  # deg2 x deg1 -> deg3 (20)
_LIFT13 = np.zeros((4, 20))
for _i, _m in enumerate(_MONO1):
    _LIFT13[_i, _IDX3[_m]] = 1.0


def _mul11(a, b):
    return np.einsum("...i,...j->...ij", a, b).reshape(*a.shape[:-1], 16) @ _P11


def _mul21(a, b):
    return np.einsum("...i,...j->...ij", a, b).reshape(*a.shape[:-1], 40) @ _P21


def _action_matrix_x():
    """Rows: coefficients of ``x * basis_j`` over the 20 monomials."""
    rows = []
    for m in _BASIS:
        rows.append(_IDX3[(m[0] + 1, m[1], m[2])])
    return rows


_XMUL = _action_matrix_x()


def essential_5point(n1, n2):
    """Essential matrices consistent with 5 normalised correspondences.

    Null space of the epipolar constraints ``E = xX + yY + zZ + W`` is
    combined with the cubic trace and determinant constraints; the ten
    solutions are eigenvectors of the multiplication-by-x action matrix.
    Returns a list of unit-Frobenius candidates (up to 10).
    """
    q1 = _hom(np.asarray(n1, dtype=np.float64))
    q2 = _hom(np.asarray(n2, dtype=np.float64))
    A = (q2[:, :, None] * q1[:, None, :]).reshape(len(q1), 9)
    _, _, vt = np.linalg.svd(A)
    basis = vt[-4:]  # X, Y, Z, W rows
    # entry (i, j) of E as a degree-1 polynomial over (x, y, z, 1)
    Ep = basis.T.reshape(3, 3, 4)
    EEt = np.zeros((3, 3, 10))
    for i in range(3):
        for j in range(3):
            EEt[i, j] = sum(_mul11(Ep[i, k], Ep[j, k]) for k in range(3))
    tr = EEt[0, 0] + EEt[1, 1] + EEt[2, 2]
    eqs = []
    for i in range(3):
        for j in range(3):
            lhs = sum(_mul21(EEt[i, k], Ep[k, j]) for k in range(3))
            eqs.append(2 * lhs - _mul21(tr, Ep[i, j]))
    det = (
        _mul21(_mul11(Ep[0, 1], Ep[1, 2]) - _mul11(Ep[0, 2], Ep[1, 1]), Ep[2, 0])
        + _mul21(_mul11(Ep[0, 2], Ep[1, 0]) - _mul11(Ep[0, 0], Ep[1, 2]), Ep[2, 1])
        + _mul21(_mul11(Ep[0, 0], Ep[1, 1]) - _mul11(Ep[0, 1], Ep[1, 0]), Ep[2, 2])
    )
    eqs.append(det)
    M = np.array(eqs)
    try:
        B = np.linalg.solve(M[:, :10], M[:, 10:])
    except np.linalg.LinAlgError:
        return []
    act = np.zeros((10, 10))
    for j, col in enumerate(_XMUL):
        if col < 10:
            act[j] = -B[col]
        else:
            act[j, col - 10] = 1.0
    vals, vecs = np.linalg.eig(act)
    out = []
    for k in range(10):
        v = vecs[:, k]
        if abs(v[9]) < 1e-12:
            continue
        sol = v[6:9] / v[9]
        if np.max(np.abs(sol.imag)) > 1e-6 * max(1.0, np.max(np.abs(sol.real))):
            continue
        x, y, z = sol.real
        E = (np.array([x, y, z, 1.0]) @ basis).reshape(3, 3)
        nrm = np.linalg.norm(E)
        if nrm > 0:
            out.append(E / nrm)
    return out


def essential_to_fundamental(E, K1, K2):
    F = np.linalg.inv(K2).T @ E @ np.linalg.inv(K1)
    return F / np.linalg.norm(F)


def decompose_essential(E):
    """The four (R, t) candidates with unit t."""
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    R1 = u @ W @ vt
    R2 = u @ W.T @ vt
    t = u[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def normalize_model(M):
    """Scale-free canonical form: unit Frobenius norm, largest entry positive."""
    M = M / np.linalg.norm(M)
    i = np.argmax(np.abs(M))
    return M if M.flat[i] > 0 else -M


def model_distance(A, B):
    """Frobenius distance between unit-normalised matrices, up to sign."""
    a = A / np.linalg.norm(A)
    b = B / np.linalg.norm(B)
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


# ------------------------------------------------------------------ RANSAC


def ransac_iterations(inlier_ratio, sample_size, confidence=RANSAC_CONFIDENCE, cap=RANSAC_MAX_ITERS):
    if inlier_ratio <= 0:
        return cap
    if inlier_ratio >= 1:
        return 1
    denom = math.log(1 - inlier_ratio**sample_size)
    if denom == 0:
        return cap
    return min(cap, max(1, int(math.ceil(math.log(1 - confidence) / denom))))


def _collinear(x, tol=1e-6):
    """True if all points lie (numerically) on one line or coincide."""
    c = x - x.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    scale = max(1.0, np.abs(x).max())
    return len(s) < 2 or s[1] <= tol * scale


def _draw_samples(rng, n, size, count):
    """``count`` index samples of ``size`` distinct elements from ``range(n)``."""
    keys = rng.random((count, n))
    return np.argpartition(keys, size - 1, axis=1)[:, :size] if size < n else np.argsort(keys, axis=1)


def ransac(data_size, sample_size, fit, residual, threshold, rng, max_iters=RANSAC_MAX_ITERS):
    """Adaptive RANSAC evaluated in chunks of hypotheses.

    ``fit(samples)`` takes an (S, sample_size) index array and returns
    ``(models, owner)``: a stack of candidate models and, for each, the row
    of ``samples`` that produced it (minimal solvers may return several or
    none).  ``residual(models)`` returns an (M, data_size) array.  Hypotheses
    are ranked by truncated squared residual (MSAC); the stopping rule uses
    the inlier count.  Samples are scanned in draw order so the result does
    not depend on the chunking.
    Returns (best model, inlier mask); the model is None if nothing fit.
    """
    best, best_mask, best_cost, best_count = None, np.zeros(data_size, dtype=bool), np.inf, 0
    needed = max_iters
    it = 0
    chunk = 16
    while it < min(needed, max_iters):
        count = min(chunk, max_iters - it)
        chunk = min(2 * chunk, 1024)
        samples = _draw_samples(rng, data_size, sample_size, count)
        models, owner = fit(samples)
        if len(models):
            r = residual(models)
            inl = r <= threshold
            counts = inl.sum(axis=1)
            sse = np.sum(np.where(inl, r, threshold) ** 2, axis=1)
        for i in range(count):
            it += 1
            for m in np.flatnonzero(owner == i) if len(models) else ():
                if sse[m] < best_cost:
                    best, best_mask, best_cost = models[m], inl[m].copy(), sse[m]
                    best_count = max(best_count, int(counts[m]))
                    needed = ransac_iterations(best_count / data_size, sample_size)
            if it >= needed:
                break
    return best, best_mask


@dataclass(eq=False)
class TwoViewGeometry:
    """Verified relation between two images.

    ``kind`` is the selected model ("H", "F" or "E"); ``matrix`` is that
    model.  ``inliers`` index into the tentative match list.  ``relation``
    records every model estimated with its inlier count.
    """

    kind: str
    matrix: np.ndarray
    inliers: np.ndarray
    relation: dict = field(default_factory=dict)
    degenerate: bool = False  # homography-dominated: unusable for initialisation

    @property
    def num_inliers(self):
        return len(self.inliers)


class Rejected:
    """Returned by :func:`verify_pair` when no model has enough inliers."""

    def __init__(self, reason, best_inliers=0):
        self.reason = reason
        self.best_inliers = best_inliers

    def __bool__(self):
        return False

    def __repr__(self):
        return f"Rejected({self.reason!r}, best_inliers={self.best_inliers})"


def _msac(r, threshold):
    return float(np.sum(np.minimum(r, threshold) ** 2))


def _refit(fit_all, residual, threshold, model, mask, min_pts):
    """Re-estimate on inliers; keep whichever model has the lower MSAC cost."""
    if mask.sum() < min_pts:
        return model, mask
    try:
        M2 = fit_all(mask)
    except np.linalg.LinAlgError:
        return model, mask
    r1 = residual(model[None])[0]
    r2 = residual(M2[None])[0]
    if _msac(r2, threshold) < _msac(r1, threshold):
        return M2, r2 <= threshold
    return model, mask


def _hom_batch_transfer(Hs, x1, x2):
    p = np.einsum("mij,nj->mni", Hs, _hom(x1))
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.sqrt(((p[..., :2] / p[..., 2:3] - x2) ** 2).sum(axis=-1))
    return np.where(np.isfinite(err), err, np.inf)


def _sampson_batch(Fs, x1, x2):
    p, q = _hom(x1), _hom(x2)
    Fp = np.einsum("mij,nj->mni", Fs, p)
    Ftq = np.einsum("mji,nj->mni", Fs, q)
    num = np.sum(q * Fp, axis=-1)
    den = Fp[..., 0] ** 2 + Fp[..., 1] ** 2 + Ftq[..., 0] ** 2 + Ftq[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(num) / np.sqrt(den)
    return np.where(np.isfinite(d), d, np.inf)


def _triangle_areas(x):
    """Doubled areas of the four triangles of each 4-point sample (S, 4, 2)."""
    out = []
    for i, j, k in itertools.combinations(range(4), 3):
        a, b = x[:, j] - x[:, i], x[:, k] - x[:, i]
        out.append(np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    return np.stack(out, axis=1)


def _homography_batch(p, q):
    """Minimal 4-point fits for stacks of normalised points (S, 4, 3)."""
    S = len(p)
    A = np.zeros((S, 8, 9))
    A[:, 0::2, 3:6] = -q[:, :, 2:3] * p
    A[:, 0::2, 6:9] = q[:, :, 1:2] * p
    A[:, 1::2, 0:3] = q[:, :, 2:3] * p
    A[:, 1::2, 6:9] = -q[:, :, 0:1] * p
    _, _, vt = np.linalg.svd(A)
    return vt[:, -1].reshape(S, 3, 3)


def _fundamental_batch(p, q):
    S = len(p)
    A = (q[:, :, :, None] * p[:, :, None, :]).reshape(S, -1, 9)
    _, _, vt = np.linalg.svd(A)
    F = vt[:, -1].reshape(S, 3, 3)
    u, s, vt = np.linalg.svd(F)
    s[:, 2] = 0.0
    return u @ (s[:, :, None] * vt)


def estimate_homography(x1, x2, rng, threshold=H_THRESHOLD):
    n = len(x1)
    if n < 4:
        return None, np.zeros(n, dtype=bool)
    T1, T2 = normalizing_transform(x1), normalizing_transform(x2)
    p, q = _hom(x1) @ T1.T, _hom(x2) @ T2.T
    T2i = np.linalg.inv(T2)

    def fit(samples):
        ok = (_triangle_areas(p[samples, :2]).min(axis=1) > 1e-8) & (_triangle_areas(q[samples, :2]).min(axis=1) > 1e-8)
        idx = np.flatnonzero(ok)
        Hs = T2i @ _homography_batch(p[samples[idx]], q[samples[idx]]) @ T1
        h33 = Hs[:, 2, 2]
        good = np.abs(h33) > 1e-12
        return Hs[good] / h33[good, None, None], idx[good]

    def residual(Hs):
        return _hom_batch_transfer(Hs, x1, x2)

    H, mask = ransac(n, 4, fit, residual, threshold, rng)
    if H is None:
        return None, mask
    return _refit(lambda m: homography_dlt(x1[m], x2[m]), residual, threshold, H, mask, 4)


def estimate_fundamental(x1, x2, rng, threshold=F_THRESHOLD):
    n = len(x1)
    if n < 8:
        return None, np.zeros(n, dtype=bool)
    T1, T2 = normalizing_transform(x1), normalizing_transform(x2)
    p, q = _hom(x1) @ T1.T, _hom(x2) @ T2.T

    def fit(samples):
        Fs = T2.T @ _fundamental_batch(p[samples], q[samples]) @ T1
        Fs /= np.linalg.norm(Fs, axis=(1, 2))[:, None, None]
        return Fs, np.arange(len(samples))

    def residual(Fs):
        return _sampson_batch(Fs, x1, x2)

    F, mask = ransac(n, 8, fit, residual, threshold, rng)
    if F is None:
        return None, mask
    return _refit(lambda m: fundamental_8point(x1[m], x2[m]), residual, threshold, F, mask, 8)


def estimate_essential(x1, x2, K1, K2, rng, threshold=F_THRESHOLD):
    """RANSAC over the 5-point solver; residuals are pixel Sampson distances."""
    n = len(x1)
    if n < 5:
        return None, np.zeros(n, dtype=bool)
    K1i, K2i = np.linalg.inv(K1), np.linalg.inv(K2)
    n1 = (_hom(x1) @ K1i.T)[:, :2]
    n2 = (_hom(x2) @ K2i.T)[:, :2]

    def fit(samples):
        models, owner = [], []
        for i, s in enumerate(samples):
            for E in essential_5point(n1[s], n2[s]):
                models.append(E)
                owner.append(i)
        if not models:
            return np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64)
        return np.array(models), np.array(owner)

    def residual(Es):
        return _sampson_batch(K2i.T @ Es @ K1i, x1, x2)

    E, mask = ransac(n, 5, fit, residual, threshold, rng)
    if E is None:
        return None, mask
    E, mask = _refit(lambda m: essential_linear(n1[m], n2[m]), residual, threshold, E, mask, 8)
    return project_to_essential(E), mask


def verify_pair(matches, fa, fb, intrinsics=None, rng=None, min_inliers=MIN_INLIERS,
                h_threshold=H_THRESHOLD, f_threshold=F_THRESHOLD, seed=0):
    """Robustly verify tentative matches between two feature sets.

    Estimates H and either E (when ``intrinsics`` is given: one
    :class:`CameraIntrinsics` or a pair) or F.  F/E is preferred unless the
    homography explains at least 90% as many matches, in which case H is
    selected and the pair flagged ``degenerate`` for initialisation.
    """
    pairs = np.asarray(getattr(matches, "pairs", matches), dtype=np.int64).reshape(-1, 2)
    need = 5 if intrinsics is not None else 8
    if len(pairs) < need:
        return Rejected(f"only {len(pairs)} tentative matches (< {need})")
    xa = getattr(fa, "xy", fa)[pairs[:, 0]]
    xb = getattr(fb, "xy", fb)[pairs[:, 1]]
    if _collinear(xa) or _collinear(xb):
        raise DegenerateConfiguration("all correspondences collinear or coincident")
    rng = rng if rng is not None else np.random.default_rng(seed)

    H, h_mask = estimate_homography(xa, xb, rng, h_threshold)
    if intrinsics is not None:
        ka, kb = intrinsics if isinstance(intrinsics, tuple) else (intrinsics, intrinsics)
        G, g_mask = estimate_essential(xa, xb, ka.K, kb.K, rng, f_threshold)
        g_kind = "E"
    else:
        G, g_mask = estimate_fundamental(xa, xb, rng, f_threshold)
        g_kind = "F"
    nh, ng = int(h_mask.sum()), int(g_mask.sum())
    relation = {"H": (H, nh), g_kind: (G, ng)}
    if G is not None and not (H is not None and nh >= PLANAR_RATIO * ng):
        kind, M, mask, degenerate = g_kind, G, g_mask, False
    elif H is not None:
        kind, M, mask, degenerate = "H", H, h_mask, True
    else:
        return Rejected("no model found")
    if mask.sum() < min_inliers:
        return Rejected(f"{int(mask.sum())} inliers < {min_inliers}", int(mask.sum()))
    return TwoViewGeometry(kind, M, np.flatnonzero(mask), relation, degenerate)

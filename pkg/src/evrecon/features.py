"""SIFT-style keypoints, descriptors and exhaustive matching.

Scale space: Gaussian pyramid with ``scales`` intervals per octave, no
initial upsampling, difference-of-Gaussian extrema refined to sub-pixel /
sub-scale precision.  Descriptors follow the classic 4x4 spatial x 8
orientation layout (128 values, clipped at 0.2 and L2-normalised).
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import CorruptHeader, ImageTooSmall


@dataclass(frozen=True)
class SiftParams:
    scales: int = 3
    sigma: float = 1.6
    input_sigma: float = 0.5
    contrast_threshold: float = 0.02
    edge_ratio: float = 10.0
    max_features: int = 4000
    border: int = 5
    octaves: int | None = None  # default floor(log2(min(w, h))) - 3


@dataclass(eq=False)
class FeatureSet:
    """Keypoints of one image, sorted by decreasing response."""

    image_id: int
    xy: np.ndarray  # (N, 2) col, row
    scale: np.ndarray  # (N,) sigma in pixels
    orientation: np.ndarray  # (N,) radians
    descriptors: np.ndarray  # (N, 128) float32, unit norm
    response: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.response is None:
            self.response = np.zeros(len(self.xy))

    def __len__(self):
        return len(self.xy)


@dataclass(eq=False)
class MatchSet:
    a: int
    b: int
    pairs: np.ndarray  # (M, 2) int, column 0 indexes image a's features

    def __len__(self):
        return len(self.pairs)


# ------------------------------------------------------------ scale space


def octave_count(w, h):
    return max(1, int(np.floor(np.log2(min(w, h)))) - 3)


def gaussian_pyramid(img, params=SiftParams()):
    """List (per octave) of ``scales + 3`` progressively blurred images."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    n_oct = params.octaves or octave_count(w, h)
    s = params.scales
    k = 2.0 ** (1.0 / s)
    sig = [params.sigma * k**i for i in range(s + 3)]
    incr = [np.sqrt(max(sig[0] ** 2 - params.input_sigma**2, 0.01))]
    incr += [np.sqrt(sig[i] ** 2 - sig[i - 1] ** 2) for i in range(1, s + 3)]
    pyr = []
    base = ndimage.gaussian_filter(img, incr[0], mode="nearest")
    for o in range(n_oct):
        if min(base.shape) < 2 * params.border + 3:
            break
        levels = [base]
        for i in range(1, s + 3):
            levels.append(ndimage.gaussian_filter(levels[-1], incr[i], mode="nearest"))
        pyr.append(np.stack(levels))
        base = levels[s][::2, ::2]
    return pyr


def dog_pyramid(gauss):
    return [g[1:] - g[:-1] for g in gauss]


def scale_space_extrema(dog, threshold, border):
    """Candidate (level, row, col) of 3x3x3 extrema in one octave's DoG stack.

    A sample qualifies when ``|D| > threshold`` and it is >= (or <=) all 26
    neighbours.  Levels 1..L-2 only; ``border`` pixels are skipped.
    """
    mx = ndimage.maximum_filter(dog, size=3, mode="nearest")
    mn = ndimage.minimum_filter(dog, size=3, mode="nearest")
    ok = ((dog >= mx) | (dog <= mn)) & (np.abs(dog) > threshold)
    ok[0] = ok[-1] = False
    ok[:, :border] = ok[:, -border:] = False
    ok[:, :, :border] = ok[:, :, -border:] = False
    return np.argwhere(ok)


def _derivs(D, s, r, c):
    v = D[s, r, c]
    g = 0.5 * np.array([
        D[s, r, c + 1] - D[s, r, c - 1],
        D[s, r + 1, c] - D[s, r - 1, c],
        D[s + 1, r, c] - D[s - 1, r, c],
    ])
    dxx = D[s, r, c + 1] + D[s, r, c - 1] - 2 * v
    dyy = D[s, r + 1, c] + D[s, r - 1, c] - 2 * v
    dss = D[s + 1, r, c] + D[s - 1, r, c] - 2 * v
    dxy = 0.25 * (D[s, r + 1, c + 1] - D[s, r + 1, c - 1] - D[s, r - 1, c + 1] + D[s, r - 1, c - 1])
    dxs = 0.25 * (D[s + 1, r, c + 1] - D[s + 1, r, c - 1] - D[s - 1, r, c + 1] + D[s - 1, r, c - 1])
    dys = 0.25 * (D[s + 1, r + 1, c] - D[s + 1, r - 1, c] - D[s - 1, r + 1, c] + D[s - 1, r - 1, c])
    H = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    return v, g, H


def _refine(D, s, r, c, params):
    n_lvl, h, w = D.shape
    b = params.border
    for _ in range(5):
        v, g, H = _derivs(D, s, r, c)
        try:
            off = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(off) < 0.5):
            break
        c += int(round(off[0]))
        r += int(round(off[1]))
        s += int(round(off[2]))
        if s < 1 or s > n_lvl - 2 or r < b or r >= h - b or c < b or c >= w - b:
            return None
    else:
        return None
    contrast = v + 0.5 * g @ off
    if abs(contrast) < params.contrast_threshold:
        return None
    tr = H[0, 0] + H[1, 1]
    det = H[0, 0] * H[1, 1] - H[0, 1] ** 2
    er = params.edge_ratio
    if det <= 0 or tr * tr * er >= (er + 1) ** 2 * det:
        return None
    return s, r, c, off, abs(contrast)


# ------------------------------------------------- orientation / descriptor

_ORI_BINS = 36
_DESC_D = 4
_DESC_N = 8


def _gradients(img):
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, 1:-1] = img[:, 2:] - img[:, :-2]
    dy[1:-1, :] = img[2:, :] - img[:-2, :]
    return np.hypot(dx, dy), np.arctan2(dy, dx)


def _orientations(mag, ang, r, c, sigma_oct):
    h, w = mag.shape
    sig = 1.5 * sigma_oct
    rad = int(round(3 * sig))
    r0, r1 = max(r - rad, 1), min(r + rad, h - 2)
    c0, c1 = max(c - rad, 1), min(c + rad, w - 2)
    if r1 < r0 or c1 < c0:
        return []
    yy, xx = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    wgt = np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * sig * sig))
    m = mag[r0:r1 + 1, c0:c1 + 1] * wgt
    a = ang[r0:r1 + 1, c0:c1 + 1]
    bins = np.round(_ORI_BINS * a / (2 * np.pi)).astype(np.int64) % _ORI_BINS
    hist = np.bincount(bins.ravel(), weights=m.ravel(), minlength=_ORI_BINS)
    hist = (np.roll(hist, 2) + np.roll(hist, -2)) / 16 + 4 * (np.roll(hist, 1) + np.roll(hist, -1)) / 16 + 6 * hist / 16
    peak = hist.max()
    if peak <= 0:
        return []
    out = []
    for i in range(_ORI_BINS):
        left, right = hist[i - 1], hist[(i + 1) % _ORI_BINS]
        if hist[i] > left and hist[i] > right and hist[i] >= 0.8 * peak:
            delta = 0.5 * (left - right) / (left - 2 * hist[i] + right)
            theta = 2 * np.pi * (i + delta) / _ORI_BINS
            out.append((theta + np.pi) % (2 * np.pi) - np.pi)
    return out


def _descriptor(mag, ang, x, y, theta, sigma_oct):
    d, n = _DESC_D, _DESC_N
    hw = 3.0 * sigma_oct
    rad = int(round(hw * np.sqrt(2) * (d + 1) * 0.5))
    h, w = mag.shape
    ci, ri = int(round(x)), int(round(y))
    r0, r1 = max(ri - rad, 1), min(ri + rad, h - 2)
    c0, c1 = max(ci - rad, 1), min(ci + rad, w - 2)
    yy, xx = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    dx = (xx - x).ravel()
    dy = (yy - y).ravel()
    cos, sin = np.cos(theta), np.sin(theta)
    xr = (cos * dx + sin * dy) / hw
    yr = (-sin * dx + cos * dy) / hw
    rb = yr + d / 2 - 0.5
    cb = xr + d / 2 - 0.5
    keep = (rb > -1) & (rb < d) & (cb > -1) & (cb < d)
    wgt = np.exp(-(xr * xr + yr * yr) / (2 * (0.5 * d) ** 2))
    m = (mag[r0:r1 + 1, c0:c1 + 1].ravel() * wgt)[keep]
    o = ((ang[r0:r1 + 1, c0:c1 + 1].ravel() - theta)[keep] % (2 * np.pi)) * n / (2 * np.pi)
    rb, cb = rb[keep], cb[keep]
    r_lo, c_lo, o_lo = np.floor(rb), np.floor(cb), np.floor(o)
    fr, fc, fo = rb - r_lo, cb - c_lo, o - o_lo
    r_lo = r_lo.astype(np.int64) + 1
    c_lo = c_lo.astype(np.int64) + 1
    o_lo = o_lo.astype(np.int64)
    hist = np.zeros((d + 2) * (d + 2) * n)
    for dr in (0, 1):
        wr = fr if dr else 1 - fr
        for dc in (0, 1):
            wc = fc if dc else 1 - fc
            for do in (0, 1):
                wo = fo if do else 1 - fo
                idx = ((r_lo + dr) * (d + 2) + (c_lo + dc)) * n + (o_lo + do) % n
                hist += np.bincount(idx, weights=m * wr * wc * wo, minlength=hist.size)
    desc = hist.reshape(d + 2, d + 2, n)[1:-1, 1:-1].ravel()
    nrm = np.linalg.norm(desc)
    if nrm <= 0:
        return None
    desc = np.minimum(desc / nrm, 0.2)
    nrm = np.linalg.norm(desc)
    return desc / nrm if nrm > 0 else None


def detect_features(image, params=SiftParams(), image_id=0):
    """Detect keypoints and compute descriptors on a ``[0, 1]`` image.

    ``image`` may be an :class:`~evrecon.recon.IntensityImage` or a 2D array.
    """
    img = np.asarray(getattr(image, "values", image), dtype=np.float64)
    h, w = img.shape
    if h < 32 or w < 32:
        raise ImageTooSmall(f"image is {w}x{h}; need at least 32x32")
    gauss = gaussian_pyramid(img, params)
    dogs = dog_pyramid(gauss)
    s_per = params.scales
    found = []
    for o, (G, D) in enumerate(zip(gauss, dogs)):
        grads = {}
        cand = scale_space_extrema(D, 0.5 * params.contrast_threshold, params.border)
        for s, r, c in cand:
            ref = _refine(D, int(s), int(r), int(c), params)
            if ref is None:
                continue
            s2, r2, c2, off, resp = ref
            layer = s2 + off[2]
            sigma_oct = params.sigma * 2.0 ** (layer / s_per)
            if s2 not in grads:
                grads[s2] = _gradients(G[s2])
            mag, ang = grads[s2]
            xo, yo = c2 + off[0], r2 + off[1]
            for theta in _orientations(mag, ang, r2, c2, sigma_oct):
                desc = _descriptor(mag, ang, xo, yo, theta, sigma_oct)
                if desc is None:
                    continue
                scale = 2.0**o
                found.append((resp, xo * scale, yo * scale, sigma_oct * scale, theta, desc))
    if not found:
        return FeatureSet(image_id, np.zeros((0, 2)), np.zeros(0), np.zeros(0),
                          np.zeros((0, 128), np.float32), np.zeros(0))
    found.sort(key=lambda f: (-f[0], f[2], f[1], f[4]))
    found = found[:params.max_features]
    xy = np.array([[f[1], f[2]] for f in found])
    xy[:, 0] = np.clip(xy[:, 0], 0, w - 1)
    xy[:, 1] = np.clip(xy[:, 1], 0, h - 1)
    return FeatureSet(
        image_id, xy,
        np.array([f[3] for f in found]),
        np.array([f[4] for f in found]),
        np.array([f[5] for f in found], dtype=np.float32),
        np.array([f[0] for f in found]),
    )


# --------------------------------------------------------------- matching


class DistanceCounter:
    """Counts descriptor distance evaluations (instrumentation)."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


distance_counter = DistanceCounter()


def descriptor_distances(da, db):
    """Full (Na, Nb) Euclidean distance matrix."""
    da = np.asarray(da, dtype=np.float64)
    db = np.asarray(db, dtype=np.float64)
    distance_counter.count += len(da) * len(db)
    d2 = (da * da).sum(1)[:, None] + (db * db).sum(1)[None, :] - 2.0 * da @ db.T
    return np.sqrt(np.maximum(d2, 0.0))


def match_exhaustive(fa, fb, ratio=0.8, cross_check=True):
    """Nearest-neighbour matching with ratio test and mutual cross-check.

    The ratio test is applied in both directions; when a side has a single
    candidate (no second neighbour) the test is waived for that side.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    a_id = getattr(fa, "image_id", 0)
    b_id = getattr(fb, "image_id", 1)
    da = getattr(fa, "descriptors", fa)
    db = getattr(fb, "descriptors", fb)
    if len(da) == 0 or len(db) == 0:
        return MatchSet(a_id, b_id, np.zeros((0, 2), dtype=np.int64))
    dist = descriptor_distances(da, db)
    ab = np.argmin(dist, axis=1)
    ba = np.argmin(dist, axis=0)
    ia = np.arange(len(da))
    keep = np.ones(len(da), dtype=bool)
    if cross_check:
        keep &= ba[ab] == ia
    keep &= _ratio_ok(dist, ab, ratio)
    # reverse ratio keeps the result symmetric under swapping a and b
    keep &= _ratio_ok(dist.T, ab, ratio, rows=ab, cols=ia)
    pairs = np.stack([ia[keep], ab[keep]], axis=1).astype(np.int64)
    return MatchSet(a_id, b_id, pairs)


def _ratio_ok(dist, nn, ratio, rows=None, cols=None):
    """Ratio test for each query row ``rows`` (default all) whose NN is ``nn``."""
    if dist.shape[1] < 2:
        return np.ones(len(nn), dtype=bool)
    if rows is None:
        rows = np.arange(dist.shape[0])
        cols = nn
    two = np.partition(dist[rows], 1, axis=1)[:, :2]
    best = dist[rows, cols]
    second = two[:, 1]
    # best equals the row minimum when cross-check holds; else the test fails anyway
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(second > 0, best / second < ratio, False)


# ----------------------------------------------------------- sidecar I/O

_FEAT_HEADER = struct.Struct("<4sIII")  # magic, version, image id, count
_MATCH_HEADER = struct.Struct("<4sIIII")  # magic, version, a, b, count


def encode_features(fs):
    """Binary sidecar: header then little-endian xy f8[N,2], scale, orientation,
    response f8[N], descriptors f4[N,128]."""
    n = len(fs)
    parts = [
        _FEAT_HEADER.pack(b"FEAT", 1, fs.image_id, n),
        np.ascontiguousarray(fs.xy, dtype="<f8").tobytes(),
        np.ascontiguousarray(fs.scale, dtype="<f8").tobytes(),
        np.ascontiguousarray(fs.orientation, dtype="<f8").tobytes(),
        np.ascontiguousarray(fs.response, dtype="<f8").tobytes(),
        np.ascontiguousarray(fs.descriptors, dtype="<f4").tobytes(),
    ]
    return b"".join(parts)


def decode_features(data):
    if len(data) < _FEAT_HEADER.size:
        raise CorruptHeader("feature sidecar too short")
    magic, version, image_id, n = _FEAT_HEADER.unpack_from(data)
    if magic != b"FEAT" or version != 1:
        raise CorruptHeader(f"bad feature sidecar header {magic!r} v{version}")
    need = _FEAT_HEADER.size + n * (16 + 8 * 3 + 128 * 4)
    if len(data) != need:
        raise CorruptHeader(f"feature sidecar holds {len(data)} bytes, expected {need}")
    off = _FEAT_HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).copy()
        off += arr.nbytes
        return arr

    xy = take("<f8", 2 * n).reshape(n, 2)
    scale = take("<f8", n)
    ori = take("<f8", n)
    resp = take("<f8", n)
    desc = take("<f4", 128 * n).reshape(n, 128)
    return FeatureSet(image_id, xy, scale, ori, desc.astype(np.float32), resp)


def encode_matches(ms):
    pairs = np.ascontiguousarray(ms.pairs, dtype="<u4")
    return _MATCH_HEADER.pack(b"MTCH", 1, ms.a, ms.b, len(pairs)) + pairs.tobytes()


def decode_matches(data):
    if len(data) < _MATCH_HEADER.size:
        raise CorruptHeader("match sidecar too short")
    magic, version, a, b, n = _MATCH_HEADER.unpack_from(data)
    if magic != b"MTCH" or version != 1:
        raise CorruptHeader(f"bad match sidecar header {magic!r} v{version}")
    if len(data) != _MATCH_HEADER.size + 8 * n:
        raise CorruptHeader("match sidecar length mismatch")
    pairs = np.frombuffer(data, dtype="<u4", count=2 * n, offset=_MATCH_HEADER.size)
    return MatchSet(a, b, pairs.reshape(n, 2).astype(np.int64))

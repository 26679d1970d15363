"""PGM / PFM images, PLY point clouds, trajectories and hashing helpers."""

import os

import numba
import numpy as np

from .errors import CorruptHeader, IoFailure, UnsupportedImageFormat

# ------------------------------------------------------------------ PGM


def _pnm_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptHeader("truncated PNM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates header and raster
    return tokens, pos + 1


def read_pgm(path):
    """Read a binary (P5) PGM into float64 ``[0, 1]`` (divides by maxval)."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic != b"P5":
        raise UnsupportedImageFormat(f"{path}: unsupported magic {magic!r}")
    try:
        tokens, off = _pnm_tokens(data[2:], 3)
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise CorruptHeader(f"{path}: bad PGM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise CorruptHeader(f"{path}: bad PGM dimensions {w}x{h} max {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    raster = data[2 + off:]
    need = w * h * np.dtype(dtype).itemsize
    if len(raster) < need:
        raise CorruptHeader(f"{path}: raster truncated ({len(raster)} < {need} bytes)")
    img = np.frombuffer(raster[:need], dtype=dtype).reshape(h, w)
    return img.astype(np.float64) / maxval


def write_pgm(path, img):
    """Write a ``[0, 1]`` image as 8-bit P5 (round to nearest)."""
    img = np.asarray(img, dtype=np.float64)
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


# ------------------------------------------------------------------ PFM


def read_pfm(path):
    """Read a PFM ("Pf" grey or "PF" colour); byte order from the scale sign.

    Rows are stored bottom-to-top on disk; the returned array is top-down.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic == b"Pf":
        channels = 1
    elif magic == b"PF":
        channels = 3
    else:
        raise UnsupportedImageFormat(f"{path}: unsupported magic {magic!r}")
    try:
        tokens, off = _pnm_tokens(data[2:], 3)
        w, h = int(tokens[0]), int(tokens[1])
        scale = float(tokens[2])
    except ValueError:
        raise CorruptHeader(f"{path}: bad PFM header") from None
    if scale == 0 or w < 1 or h < 1:
        raise CorruptHeader(f"{path}: bad PFM header")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    need = w * h * channels * 4
    raster = data[2 + off:2 + off + need]
    if len(raster) < need:
        raise CorruptHeader(f"{path}: raster truncated")
    img = np.frombuffer(raster, dtype=dtype).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(img.reshape(shape)).copy()


def write_pfm(path, img):
    """Write float32 little-endian PFM (scale -1.0)."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        magic, (h, w) = "Pf", img.shape
    elif img.ndim == 3 and img.shape[2] == 3:
        magic, (h, w) = "PF", img.shape[:2]
    else:
        raise UnsupportedImageFormat(f"cannot store shape {img.shape} as PFM")
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(img).astype("<f4").tobytes())


def read_image(path):
    path = os.fspath(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P5":
        return read_pgm(path)
    if magic in (b"Pf", b"PF"):
        return read_pfm(path)
    raise UnsupportedImageFormat(f"{path}: unsupported magic {magic!r}")


# ------------------------------------------------------------------ PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _vertex_dtype(has_color, has_normal, coord="f8"):
    fields = [("x", coord), ("y", coord), ("z", coord)]
    if has_normal:
        fields += [("nx", "f4"), ("ny", "f4"), ("nz", "f4")]
    if has_color:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    return fields


def write_ply(path, points, colors=None, normals=None, binary=True):
    """Write a vertex-only PLY 1.0 file.

    Coordinates are stored as double so binary round-trips are bit exact.
    ``colors`` are uint8 RGB (or floats in [0, 1], scaled by 255).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise ValueError("PLY coordinates must be finite")
    n = len(points)
    if colors is not None:
        colors = np.asarray(colors)
        if colors.dtype.kind == "f":
            colors = np.clip(np.rint(colors * 255), 0, 255)
        colors = colors.astype(np.uint8).reshape(n, -1)
        if colors.shape[1] == 1:
            colors = np.repeat(colors, 3, axis=1)
    if normals is not None:
        normals = np.asarray(normals, dtype=np.float32).reshape(n, 3)
    fields = _vertex_dtype(colors is not None, normals is not None)
    names = {"f8": "double", "f4": "float", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {n}"]
    header += [f"property {names[t]} {name}" for name, t in fields]
    header.append("end_header")
    rec = np.empty(n, dtype=[(name, "<" + t) for name, t in fields])
    rec["x"], rec["y"], rec["z"] = points.T
    if normals is not None:
        rec["nx"], rec["ny"], rec["nz"] = normals.T
    if colors is not None:
        rec["red"], rec["green"], rec["blue"] = colors[:, :3].T
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                fh.write(rec.tobytes())
            else:
                for r in rec:
                    vals = [repr(float(r[name])) if t.startswith("f") else str(int(r[name])) for name, t in fields]
                    fh.write((" ".join(vals) + "\n").encode("ascii"))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_ply(path):
    """Read the vertex element of a PLY file into a structured array."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise CorruptHeader(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    fmt = None
    n_vertex = None
    props = []
    current = None
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vertex = int(parts[2])
            elif int(parts[2]) != 0:
                raise UnsupportedImageFormat(f"{path}: only vertex elements supported")
        elif parts[0] == "property" and current == "vertex":
            if parts[1] == "list":
                raise UnsupportedImageFormat(f"{path}: list properties unsupported")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt is None or n_vertex is None:
        raise CorruptHeader(f"{path}: incomplete PLY header")
    if fmt == "ascii":
        dt = np.dtype([(name, t) for name, t in props])
        rows = data[body_start:].decode("ascii").split("\n")
        rec = np.empty(n_vertex, dtype=dt)
        for i in range(n_vertex):
            vals = rows[i].split()
            rec[i] = tuple(float(v) if dt[name].kind == "f" else int(v) for v, (name, _) in zip(vals, props))
        return rec
    order = {"binary_little_endian": "<", "binary_big_endian": ">"}.get(fmt)
    if order is None:
        raise CorruptHeader(f"{path}: unknown PLY format {fmt}")
    dt = np.dtype([(name, order + t) for name, t in props])
    if len(data) - body_start < n_vertex * dt.itemsize:
        raise CorruptHeader(f"{path}: vertex data truncated")
    return np.frombuffer(data, dtype=dt, count=n_vertex, offset=body_start).copy()


# ------------------------------------------------------------ trajectories


def write_trajectory(path, times_us, poses):
    """TUM-style ``t tx ty tz qx qy qz qw`` lines, camera-to-world, t in seconds."""
    with open(path, "w") as fh:
        for t, pose in zip(times_us, poses):
            inv = pose.inverse()
            qw, qx, qy, qz = inv.q
            tx, ty, tz = inv.t
            fh.write(f"{t / 1e6:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n")


def read_trajectory(path):
    from .camera import Pose

    times, poses = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            t, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in line.split())
            times.append(int(round(t * 1e6)))
            poses.append(Pose([qw, qx, qy, qz], [tx, ty, tz]).inverse())
    return times, poses


# ------------------------------------------------------------------ hashing

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data, h=_FNV_OFFSET):
    """64-bit FNV-1a; pass the previous value as ``h`` to chain chunks."""
    if len(data) > 4096:
        return int(_fnv1a64_np(np.frombuffer(data, dtype=np.uint8), np.uint64(h)))
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


@numba.njit(cache=True)
def _fnv1a64_np(arr, h):
    for b in arr:
        h = (h ^ np.uint64(b)) * np.uint64(_FNV_PRIME)
    return h


def hash_files(paths, extra=b""):
    h = _FNV_OFFSET
    for p in paths:
        with open(p, "rb") as fh:
            while chunk := fh.read(1 << 20):
                h = fnv1a64(chunk, h)
    return fnv1a64(extra, h)


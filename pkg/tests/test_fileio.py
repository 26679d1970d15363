import numpy as np
import pytest

from evrecon import fileio
from evrecon.camera import Pose, so3_exp
from evrecon.errors import CorruptHeader, UnsupportedImageFormat


def test_ply_single_point_ascii(tmp_path):
    p = tmp_path / "one.ply"
    fileio.write_ply(p, [[0.0, 0.0, 0.0]], binary=False)
    text = p.read_text().splitlines()
    assert "element vertex 1" in text
    body = text[text.index("end_header") + 1:]
    assert len(body) == 1 and [float(v) for v in body[0].split()] == [0.0, 0.0, 0.0]


@pytest.mark.parametrize("binary", [True, False])
def test_ply_empty(tmp_path, binary):
    p = tmp_path / "empty.ply"
    fileio.write_ply(p, np.zeros((0, 3)), binary=binary)
    data = p.read_bytes()
    assert data.startswith(b"ply\n") and b"element vertex 0\n" in data
    assert data.endswith(b"end_header\n")
    assert len(fileio.read_ply(p)) == 0


def test_ply_binary_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(1000, 3)) * 10.0 ** rng.integers(-5, 5, (1000, 1))
    col = rng.integers(0, 256, (1000, 3)).astype(np.uint8)
    nrm = rng.normal(size=(1000, 3)).astype(np.float32)
    p = tmp_path / "r.ply"
    fileio.write_ply(p, X, colors=col, normals=nrm)
    v = fileio.read_ply(p)
    back = np.stack([v["x"], v["y"], v["z"]], axis=1)
    assert back.tobytes() == X.tobytes()
    assert np.array_equal(np.stack([v["red"], v["green"], v["blue"]], 1), col)
    assert np.array_equal(np.stack([v["nx"], v["ny"], v["nz"]], 1), nrm)
    # header is little-endian and counts exact
    head = p.read_bytes().split(b"end_header\n")[0]
    assert b"format binary_little_endian 1.0" in head and b"element vertex 1000" in head


def test_ply_ascii_roundtrip(tmp_path):
    X = np.random.default_rng(1).normal(size=(20, 3))
    p = tmp_path / "a.ply"
    fileio.write_ply(p, X, binary=False)
    v = fileio.read_ply(p)
    assert np.array_equal(np.stack([v["x"], v["y"], v["z"]], 1), X)


def test_ply_rejects_nonfinite(tmp_path):
    with pytest.raises(ValueError):
        fileio.write_ply(tmp_path / "x.ply", [[0, np.nan, 0]])


def test_ply_corrupt(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_bytes(b"not a ply")
    with pytest.raises(CorruptHeader):
        fileio.read_ply(p)


def test_pgm_quantization_bound(tmp_path):
    img = np.random.default_rng(2).random((17, 23))
    p = tmp_path / "i.pgm"
    fileio.write_pgm(p, img)
    back = fileio.read_pgm(p)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1 / 510 + 1e-15


def test_pgm_with_comment_and_16bit(tmp_path):
    p = tmp_path / "c.pgm"
    raster = np.array([[0, 1000], [65535, 5]], dtype=">u2")
    p.write_bytes(b"P5\n# made by hand\n2 2\n65535\n" + raster.tobytes())
    np.testing.assert_array_equal(fileio.read_pgm(p), raster.astype(float) / 65535)


@pytest.mark.parametrize("shape", [(5, 7), (4, 3, 3)])
def test_pfm_roundtrip_exact(tmp_path, shape):
    img = np.random.default_rng(3).normal(size=shape).astype(np.float32)
    p = tmp_path / "i.pfm"
    fileio.write_pfm(p, img)
    assert np.array_equal(fileio.read_pfm(p), img)


def test_pfm_big_endian(tmp_path):
    img = np.arange(6, dtype=np.float32).reshape(2, 3)
    p = tmp_path / "be.pfm"
    # rows bottom-to-top, positive scale means big-endian
    p.write_bytes(b"Pf\n3 2\n1.0\n" + np.flipud(img).astype(">f4").tobytes())
    assert np.array_equal(fileio.read_pfm(p), img)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P9\n1 1\n255\n\x00")
    with pytest.raises(UnsupportedImageFormat):
        fileio.read_image(p)
    with pytest.raises(UnsupportedImageFormat):
        fileio.read_pgm(p)


def test_truncated_raster(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(CorruptHeader):
        fileio.read_pgm(p)


def test_trajectory_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    poses = [Pose.from_rt(so3_exp(rng.normal(size=3)), rng.normal(size=3)) for _ in range(5)]
    times = [0, 1000, 250000, 1000000, 1500001]
    p = tmp_path / "traj.txt"
    fileio.write_trajectory(p, times, poses)
    t2, p2 = fileio.read_trajectory(p)
    assert t2 == times
    for a, b in zip(poses, p2):
        np.testing.assert_allclose(a.R, b.R, atol=1e-8)
        np.testing.assert_allclose(a.t, b.t, atol=1e-8)


def test_fnv1a_reference_values():
    # published FNV-1a 64 test vectors
    assert fileio.fnv1a64(b"") == 0xCBF29CE484222325
    assert fileio.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fileio.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_fnv1a_chunking_matches_whole():
    data = np.random.default_rng(5).integers(0, 256, 10000, dtype=np.uint8).tobytes()
    h = fileio.fnv1a64(data[:5000])
    assert fileio.fnv1a64(data[5000:], h) == fileio.fnv1a64(data)

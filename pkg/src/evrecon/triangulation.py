"""Multi-view linear triangulation and acceptance gates."""

import itertools

import numpy as np

from .camera import triangulation_angle_deg


def triangulate_dlt(Rs, ts, xn):
    """Point minimising the algebraic error over all views.

    ``Rs`` (V, 3, 3), ``ts`` (V, 3) world-to-camera; ``xn`` (V, 2) normalised
    image coordinates.  Rows are scaled to unit norm before the SVD.
    """
    Rs = np.asarray(Rs, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    xn = np.asarray(xn, dtype=np.float64)
    Pm = np.concatenate([Rs, ts[:, :, None]], axis=2)  # (V, 3, 4)
    A = np.concatenate([
        xn[:, 0:1] * Pm[:, 2] - Pm[:, 0],
        xn[:, 1:2] * Pm[:, 2] - Pm[:, 1],
    ])
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(A)
    Xh = vt[-1]
    if abs(Xh[3]) < 1e-14:
        return None
    return Xh[:3] / Xh[3]


def triangulate_pair(R1, t1, R2, t2, xn1, xn2):
    """Vectorised two-view DLT for N correspondences; returns (N, 3)."""
    P1 = np.concatenate([R1, t1[:, None]], axis=1)
    P2 = np.concatenate([R2, t2[:, None]], axis=1)
    n = len(xn1)
    A = np.empty((n, 4, 4))
    A[:, 0] = xn1[:, :1] * P1[2] - P1[0]
    A[:, 1] = xn1[:, 1:2] * P1[2] - P1[1]
    A[:, 2] = xn2[:, :1] * P2[2] - P2[0]
    A[:, 3] = xn2[:, 1:2] * P2[2] - P2[1]
    A /= np.linalg.norm(A, axis=2, keepdims=True)
    _, _, vt = np.linalg.svd(A)
    Xh = vt[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return Xh[:, :3] / Xh[:, 3:4]


def pairwise_angles(centers, X):
    """Triangulation angles (degrees) at ``X`` for every pair of centres."""
    return np.array([triangulation_angle_deg(ci, cj, X)[0]
                     for ci, cj in itertools.combinations(centers, 2)])

"""Levenberg-Marquardt bundle adjustment on plain arrays.

Cost is ``sum_j rho(||pi(P_c, X_k) - x_j||^2)`` with the Cauchy loss
``rho(s) = b^2 log(1 + s / b^2)``.  Normal equations are weighted by
``rho'(s)`` (iteratively reweighted Gauss-Newton) and solved by eliminating
the 3x3 point blocks (Schur complement) and factoring the dense reduced
camera system.

Camera modes: ``FIXED`` cameras are constants, ``FREE`` cameras take a
6-vector ``(omega, dt)`` applied as ``R <- exp(omega) R, t <- t + dt`` and
``SPHERE`` cameras (the scale gauge) take ``(omega, delta)`` where the
centre moves in the tangent plane of a sphere around ``anchor`` and is
re-projected onto it, keeping one baseline length constant.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .camera import skew, so3_exp
from .errors import NumericalFailure

FIXED, FREE, SPHERE = 0, 1, 2
_DOF = {FIXED: 0, FREE: 6, SPHERE: 5}


@dataclass
class BAOptions:
    max_iterations: int = 100
    loss_scale: float = 2.0  # Cauchy scale, pixels; None for plain least squares
    refine_intrinsics: bool = False
    relative_tolerance: float = 1e-6
    gradient_tolerance: float = 1e-10
    initial_lambda: float = 1e-4
    max_lambda: float = 1e16


@dataclass
class BAReport:
    initial_cost: float
    final_cost: float
    iterations: int
    cost_history: list = field(default_factory=list)  # accepted-step costs, starting with the initial one
    termination: str = ""


def _tangent_basis(n):
    n = n / np.linalg.norm(n)
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return np.stack([u, np.cross(n, u)], axis=1)


def cauchy(s, b):
    """(rho, rho') of the Cauchy loss for squared residual norms ``s``."""
    if b is None:
        return s, np.ones_like(s)
    b2 = b * b
    return b2 * np.log1p(s / b2), 1.0 / (1.0 + s / b2)


def project(intr, Xc):
    """Pixel projection with one radial term; ``intr = (fx, fy, cx, cy, k1)``."""
    fx, fy, cx, cy, k1 = intr
    u = Xc[:, 0] / Xc[:, 2]
    v = Xc[:, 1] / Xc[:, 2]
    d = 1.0 + k1 * (u * u + v * v)
    return np.stack([fx * d * u + cx, fy * d * v + cy], axis=1)


def projection_jacobians(intr, Xc):
    """d(pixel)/d(Xc) as (M, 2, 3) and d(pixel)/d(intrinsics) as (M, 2, 5)."""
    fx, fy, cx, cy, k1 = intr
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    u, v = x / z, y / z
    r2 = u * u + v * v
    d = 1.0 + k1 * r2
    M = len(Xc)
    dpix_duv = np.empty((M, 2, 2))
    dpix_duv[:, 0, 0] = fx * (d + 2 * k1 * u * u)
    dpix_duv[:, 0, 1] = fx * 2 * k1 * u * v
    dpix_duv[:, 1, 0] = fy * 2 * k1 * u * v
    dpix_duv[:, 1, 1] = fy * (d + 2 * k1 * v * v)
    duv_dX = np.zeros((M, 2, 3))
    duv_dX[:, 0, 0] = 1 / z
    duv_dX[:, 0, 2] = -x / z**2
    duv_dX[:, 1, 1] = 1 / z
    duv_dX[:, 1, 2] = -y / z**2
    J_X = dpix_duv @ duv_dX
    J_i = np.zeros((M, 2, 5))
    J_i[:, 0, 0] = d * u
    J_i[:, 1, 1] = d * v
    J_i[:, 0, 2] = 1.0
    J_i[:, 1, 3] = 1.0
    J_i[:, 0, 4] = fx * r2 * u
    J_i[:, 1, 4] = fy * r2 * v
    return J_X, J_i


class BAProblem:
    """Cameras ``(R, t)`` (world-to-camera), points ``X`` and observations.

    ``obs_cam``/``obs_pt`` index cameras/points for each observed pixel
    ``obs_xy``.  ``modes`` holds FIXED/FREE/SPHERE per camera; a SPHERE
    camera keeps its distance to ``anchor`` constant.
    """

    def __init__(self, intr, R, t, X, obs_cam, obs_pt, obs_xy, modes, anchor=None,
                 refine_intrinsics=False, loss_scale=2.0, point_fixed=None):
        self.intr = np.asarray(intr, dtype=np.float64).copy()
        self.R = np.array(R, dtype=np.float64)
        self.t = np.array(t, dtype=np.float64)
        self.X = np.array(X, dtype=np.float64).reshape(-1, 3)
        self.obs_cam = np.asarray(obs_cam, dtype=np.int64)
        self.obs_pt = np.asarray(obs_pt, dtype=np.int64)
        self.obs_xy = np.asarray(obs_xy, dtype=np.float64).reshape(-1, 2)
        self.modes = np.asarray(modes, dtype=np.int64)
        self.anchor = None if anchor is None else np.asarray(anchor, dtype=np.float64)
        self.refine_intrinsics = refine_intrinsics
        self.loss_scale = loss_scale
        self.point_fixed = (np.zeros(len(self.X), dtype=bool) if point_fixed is None
                            else np.asarray(point_fixed, dtype=bool))
        if np.any(self.modes == SPHERE) and self.anchor is None:
            raise ValueError("a SPHERE camera needs an anchor point")
        self._layout()

    def _layout(self):
        self.cam_offset = np.full(len(self.modes), -1, dtype=np.int64)
        off = 0
        for i, m in enumerate(self.modes):
            if m != FIXED:
                self.cam_offset[i] = off
                off += _DOF[int(m)]
        self.n_cam_params = off
        self.intr_offset = off
        self.n_intr = 5 if self.refine_intrinsics else 0
        self.n_reduced = off + self.n_intr
        self.pt_offset = np.full(len(self.X), -1, dtype=np.int64)
        free_pts = np.flatnonzero(~self.point_fixed)
        self.pt_offset[free_pts] = np.arange(len(free_pts)) * 3
        self.n_point_params = 3 * len(free_pts)
        self.n_params = self.n_reduced + self.n_point_params

    def copy(self):
        p = object.__new__(BAProblem)
        p.__dict__.update(self.__dict__)
        p.intr = self.intr.copy()
        p.R = self.R.copy()
        p.t = self.t.copy()
        p.X = self.X.copy()
        return p

    # -- evaluation ------------------------------------------------------

    def camera_points(self):
        Rk = self.R[self.obs_cam]
        return np.einsum("mij,mj->mi", Rk, self.X[self.obs_pt]) + self.t[self.obs_cam]

    def residuals(self):
        return project(self.intr, self.camera_points()) - self.obs_xy

    def cost(self):
        r = self.residuals()
        rho, _ = cauchy(np.sum(r * r, axis=1), self.loss_scale)
        return float(np.sum(rho))

    def reprojection_errors(self):
        return np.linalg.norm(self.residuals(), axis=1)

    def jacobian_blocks(self):
        """Per-observation (residual, camera block (M,2,6), intrinsics (M,2,5), point (M,2,3))."""
        Xc = self.camera_points()
        r = project(self.intr, Xc) - self.obs_xy
        J_X, J_i = projection_jacobians(self.intr, Xc)
        Rk = self.R[self.obs_cam]
        J_pt = J_X @ Rk
        RX = np.einsum("mij,mj->mi", Rk, self.X[self.obs_pt])
        J_cam = np.zeros((len(Xc), 2, 6))
        modes = self.modes[self.obs_cam]
        free = modes == FREE
        if np.any(free):
            J_cam[free, :, :3] = -J_X[free] @ _skew_batch(RX[free])
            J_cam[free, :, 3:] = J_X[free]
        sph = modes == SPHERE
        if np.any(sph):
            J_cam[sph, :, :3] = -J_X[sph] @ _skew_batch(Xc[sph])
            for ci in np.unique(self.obs_cam[sph]):
                B = _tangent_basis(self._center(ci) - self.anchor)
                m = self.obs_cam == ci
                J_cam[m, :, 3:5] = -J_X[m] @ (self.R[ci] @ B)
        return r, J_cam, J_i, J_pt

    def _center(self, ci):
        return -self.R[ci].T @ self.t[ci]

    def jacobian(self):
        """Full sparse Jacobian (2M x n_params) in the update parametrisation."""
        r, J_cam, J_i, J_pt = self.jacobian_blocks()
        rows, cols, vals = [], [], []
        M = len(r)
        ridx = np.arange(2 * M).reshape(M, 2)
        for ci in range(len(self.modes)):
            if self.modes[ci] == FIXED:
                continue
            m = np.flatnonzero(self.obs_cam == ci)
            k = _DOF[int(self.modes[ci])]
            rr = np.repeat(ridx[m], k, axis=1)
            cc = np.broadcast_to(self.cam_offset[ci] + np.tile(np.arange(k), 2), rr.shape)
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(J_cam[m, :, :k].reshape(len(m), 2 * k).ravel())
        if self.refine_intrinsics:
            rows.append(np.repeat(ridx, 5, axis=1).ravel())
            cols.append(np.broadcast_to(self.intr_offset + np.tile(np.arange(5), 2), (M, 10)).ravel())
            vals.append(J_i.reshape(M, -1).ravel())
        fp = self.pt_offset[self.obs_pt]
        m = np.flatnonzero(fp >= 0)
        rows.append(np.repeat(ridx[m], 3, axis=1).ravel())
        cols.append((self.n_reduced + fp[m][:, None] + np.tile(np.arange(3), 2)[None]).ravel())
        vals.append(J_pt[m].reshape(len(m), 6).ravel())
        J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(2 * M, self.n_params))
        return r.ravel(), J

    # -- update ----------------------------------------------------------

    def retract(self, delta):
        """New problem with parameters moved by ``delta``."""
        p = self.copy()
        for ci in range(len(self.modes)):
            mode = self.modes[ci]
            if mode == FIXED:
                continue
            d = delta[self.cam_offset[ci]:self.cam_offset[ci] + _DOF[int(mode)]]
            dR = so3_exp(d[:3])
            if mode == FREE:
                p.R[ci] = dR @ self.R[ci]
                p.t[ci] = self.t[ci] + d[3:]
            else:
                c = self._center(ci)
                rad = c - self.anchor
                B = _tangent_basis(rad)
                c2 = c + B @ d[3:5]
                c2 = self.anchor + (c2 - self.anchor) * (np.linalg.norm(rad) / np.linalg.norm(c2 - self.anchor))
                p.R[ci] = dR @ self.R[ci]
                p.t[ci] = -p.R[ci] @ c2
        if self.refine_intrinsics:
            p.intr = self.intr + delta[self.intr_offset:self.intr_offset + 5]
        fp = np.flatnonzero(self.pt_offset >= 0)
        p.X[fp] = self.X[fp] + delta[self.n_reduced:].reshape(-1, 3)
        return p


def _skew_batch(v):
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -v[:, 2], v[:, 1]
    S[:, 1, 0], S[:, 1, 2] = v[:, 2], -v[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -v[:, 1], v[:, 0]
    return S


def _normal_equations(problem):
    r, J = problem.jacobian()
    s = r.reshape(-1, 2)
    _, w = cauchy(np.sum(s * s, axis=1), problem.loss_scale)
    W = sp.diags(np.repeat(w, 2))
    JtW = (J.T @ W).tocsr()
    A = (JtW @ J).tocsr()
    g = JtW @ r
    return A, g


def _solve_schur(A, g, lam, n_red):
    """Solve ``(A + lam diag(A)) x = -g`` by eliminating 3x3 point blocks."""
    n = A.shape[0]
    diag = A.diagonal()
    D = lam * np.maximum(diag, 1e-12)
    Ad = (A + sp.diags(D)).tocsr()
    U = Ad[:n_red, :n_red].toarray()
    Wm = Ad[:n_red, n_red:]
    V = Ad[n_red:, n_red:]
    npts = (n - n_red) // 3
    if npts:
        Vb = np.zeros((npts, 3, 3))
        Vc = V.tocoo()
        Vb[Vc.row // 3, Vc.row % 3, Vc.col % 3] = Vc.data
        det = np.linalg.det(Vb)
        if np.any(~np.isfinite(det)) or np.any(np.abs(det) < 1e-300):
            raise np.linalg.LinAlgError("singular point block")
        Vinv = np.linalg.inv(Vb)
        Vinv_sp = sp.block_diag(list(Vinv), format="csr")
        gp = g[n_red:]
    else:
        Vinv_sp = sp.csr_matrix((0, 0))
        gp = np.zeros(0)
    gc = g[:n_red]
    if n_red:
        WV = Wm @ Vinv_sp
        S = U - (WV @ Wm.T).toarray()
        rhs = -gc + WV @ gp
        c, low = scipy.linalg.cho_factor(S)
        dc = scipy.linalg.cho_solve((c, low), rhs)
    else:
        dc = np.zeros(0)
    dp = Vinv_sp @ (-gp - Wm.T @ dc) if npts else np.zeros(0)
    x = np.concatenate([dc, dp])
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("non-finite step")
    return x, D


def solve(problem, options=BAOptions()):
    """Run LM; returns (refined problem, report)."""
    problem = problem.copy()
    cost = problem.cost()
    report = BAReport(cost, cost, 0, [cost])
    if problem.n_params == 0 or len(problem.obs_cam) == 0:
        report.termination = "nothing to optimise"
        return problem, report
    lam = options.initial_lambda
    nu = 2.0
    for it in range(options.max_iterations):
        A, g = _normal_equations(problem)
        if np.max(np.abs(g)) < options.gradient_tolerance:
            report.termination = "gradient"
            break
        accepted = False
        while not accepted:
            try:
                dx, D = _solve_schur(A, g, lam, problem.n_reduced)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                lam *= nu
                nu *= 2
                if lam > options.max_lambda:
                    raise NumericalFailure("normal equations not positive definite at maximum damping")
                continue
            cand = problem.retract(dx)
            new_cost = cand.cost()
            # model decrease of the reweighted quadratic: -2 g.dx - dx.A.dx
            pred = -(2.0 * g @ dx + dx @ (A @ dx))
            if np.isfinite(new_cost) and new_cost < cost:
                rho = (cost - new_cost) / pred if pred > 0 else 1.0
                lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
                rel = (cost - new_cost) / cost if cost > 0 else 0.0
                problem, cost = cand, new_cost
                report.cost_history.append(cost)
                accepted = True
            else:
                lam *= nu
                nu *= 2
                if lam > options.max_lambda:
                    report.termination = "no decrease at maximum damping"
                    report.iterations = it
                    report.final_cost = cost
                    return problem, report
        report.iterations = it + 1
        if rel < options.relative_tolerance:
            report.termination = "relative decrease"
            break
    else:
        report.termination = "max iterations"
    report.final_cost = cost
    return problem, report

"""Rigid-body math, pinhole projection, and pose recovery from 2D-3D matches.

Pose recovery is a two-stage solve: an EPnP initializer (4 control points =
centroid + principal axes, beta cases over the null-space dimension) followed
by Levenberg-Marquardt refinement of the reprojection error on a 6-parameter
local chart (small-angle rotation update + translation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class BehindCameraError(ValueError):
    """Point at or behind the camera plane during projection."""


class DegenerateGeometryError(ValueError):
    """Correspondence set too small or rank-deficient for PnP."""


_MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion (w, x, y, z); q and -q encode the same rotation."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        vals = (self.w, self.x, self.y, self.z)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite quaternion components {vals}")

    @staticmethod
    def identity():
        return Quaternion(1.0, 0.0, 0.0, 0.0)

    def norm(self):
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def normalized(self):
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize zero quaternion")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def as_array(self):
        return np.array([self.w, self.x, self.y, self.z])

    def multiply(self, other):
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )


@dataclass(frozen=True)
class Pose:
    """Rigid transform body -> camera: x_cam = R(q) x_body + t."""

    rotation: Quaternion
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", self.rotation.normalized())


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def as_matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class KeypointModel:
    """Ordered 3D landmarks in the body-fixed frame (meters)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if len(pts) < 4:
            raise ValueError(f"keypoint model needs >= 4 points, got {len(pts)}")
        if np.linalg.norm(pts - pts.mean(axis=0), axis=1).max() <= 0:
            raise ValueError("keypoint model has zero spread")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError(f"non-finite pixel point ({self.u}, {self.v})")

    def as_array(self):
        return np.array([self.u, self.v])


def quat_to_rot(q: Quaternion) -> np.ndarray:
    """3x3 rotation matrix of a (not necessarily unit) quaternion."""
    q = q.normalized()
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(R: np.ndarray) -> Quaternion:
    """Quaternion of a rotation matrix (Shepperd's method, w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = (0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
             (R[1, 0] - R[0, 1]) / s)
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
             (R[0, 2] + R[2, 0]) / s)
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
             (R[1, 2] + R[2, 1]) / s)
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
             (R[1, 2] + R[2, 1]) / s, 0.25 * s)
    quat = Quaternion(*q).normalized()
    if quat.w < 0:
        quat = Quaternion(-quat.w, -quat.x, -quat.y, -quat.z)
    return quat


def project(pose: Pose, K: CameraIntrinsics, P) -> PixelPoint:
    """Pinhole projection of a body-frame point."""
    P = np.asarray(P, dtype=np.float64).reshape(3)
    Xc = quat_to_rot(pose.rotation) @ P + pose.translation
    if Xc[2] <= _MIN_DEPTH:
        raise BehindCameraError(f"point depth {Xc[2]:.3g} is at or behind the camera plane")
    u = K.fx * Xc[0] / Xc[2] + K.cx
    v = K.fy * Xc[1] / Xc[2] + K.cy
    return PixelPoint(u, v)


def project_points(pose: Pose, K: CameraIntrinsics, points) -> np.ndarray:
    """Vectorized projection of an (N,3) array; returns (N,2) pixels."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    Xc = pts @ quat_to_rot(pose.rotation).T + pose.translation
    if np.any(Xc[:, 2] <= _MIN_DEPTH):
        raise BehindCameraError("one or more points at or behind the camera plane")
    uv = Xc[:, :2] / Xc[:, 2:3]
    return uv * np.array([K.fx, K.fy]) + np.array([K.cx, K.cy])


def reprojection_residuals(pose: Pose, K: CameraIntrinsics, model: KeypointModel,
                           observed) -> np.ndarray:
    """Flat 2N residual vector observed_i - project(pose, K, P_i), pixels."""
    obs = _observations_array(observed)
    if len(obs) != len(model):
        raise ValueError(f"observation count {len(obs)} != model size {len(model)}")
    return (obs - project_points(pose, K, model.points)).ravel()


def _observations_array(observed) -> np.ndarray:
    if isinstance(observed, np.ndarray):
        return np.asarray(observed, dtype=np.float64).reshape(-1, 2)
    return np.array([[p.u, p.v] for p in observed], dtype=np.float64)


# -- EPnP initializer ----------------------------------------------------------


def _control_points(pts):
    """Centroid + principal-axis control points; raises on flat point sets."""
    c0 = pts.mean(axis=0)
    centered = pts - c0
    cov = centered.T @ centered / len(pts)
    eigval, eigvec = np.linalg.eigh(cov)
    if eigval[0] < 1e-12 * max(eigval[-1], 1.0):
        raise DegenerateGeometryError("keypoint model is (near-)planar; EPnP control "
                                      "points are rank-deficient")
    ctrl = [c0]
    for k in range(3):
        ctrl.append(c0 + math.sqrt(eigval[k]) * eigvec[:, k])
    return np.array(ctrl)


def _barycentric(pts, ctrl):
    basis = (ctrl[1:] - ctrl[0]).T  # 3x3
    coef = np.linalg.solve(basis, (pts - ctrl[0]).T).T  # (N,3)
    return np.hstack([1.0 - coef.sum(axis=1, keepdims=True), coef])  # (N,4)


def _rigid_fit(body_pts, cam_pts):
    """Procrustes fit R, t with x_cam = R x_body + t."""
    mb, mc = body_pts.mean(axis=0), cam_pts.mean(axis=0)
    H = (body_pts - mb).T @ (cam_pts - mc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, mc - R @ mb


def _ctrl_cam_from_betas(betas, V):
    return sum(b * v for b, v in zip(betas, V)).reshape(4, 3)


def _pairwise_dists(ctrl):
    idx = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    return np.array([np.linalg.norm(ctrl[i] - ctrl[j]) for i, j in idx])


def _betas_gauss_newton(betas, V, dist_w, iters=10):
    """Refine betas so control-point distances match the body-frame ones."""
    idx = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    Vr = [v.reshape(4, 3) for v in V]
    b = np.array(betas, dtype=np.float64)
    for _ in range(iters):
        ctrl = sum(bk * vk for bk, vk in zip(b, Vr))
        r = np.empty(6)
        J = np.empty((6, len(b)))
        for row, (i, j) in enumerate(idx):
            d = ctrl[i] - ctrl[j]
            r[row] = d @ d - dist_w[row] ** 2
            for k, vk in enumerate(Vr):
                J[row, k] = 2.0 * d @ (vk[i] - vk[j])
        try:
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        b = b + step
    return b


def _pose_rms(pose, K, pts, obs):
    try:
        res = obs - project_points(pose, K, pts)
    except BehindCameraError:
        return math.inf
    return math.sqrt(np.mean(res**2))


def solve_pnp(K: CameraIntrinsics, model: KeypointModel, observed) -> Pose:
    """Pose from N >= 4 2D-3D correspondences: EPnP init + LM polish.

    Raises DegenerateGeometryError for under-determined or rank-deficient
    configurations.
    """
    obs = _observations_array(observed)
    if len(obs) < 4:
        raise DegenerateGeometryError(f"PnP needs >= 4 correspondences, got {len(obs)}")
    if len(obs) != len(model):
        raise ValueError(f"observation count {len(obs)} != model size {len(model)}")
    pts = model.points

    ctrl_w = _control_points(pts)
    alphas = _barycentric(pts, ctrl_w)  # (N,4)
    n = len(pts)

    M = np.zeros((2 * n, 12))
    for i in range(n):
        u, v = obs[i]
        for j in range(4):
            a = alphas[i, j]
            M[2 * i, 3 * j:3 * j + 3] = [a * K.fx, 0.0, a * (K.cx - u)]
            M[2 * i + 1, 3 * j:3 * j + 3] = [0.0, a * K.fy, a * (K.cy - v)]

    MtM = M.T @ M
    eigval, eigvec = np.linalg.eigh(MtM)
    V = [eigvec[:, k] for k in range(4)]  # ascending eigenvalue order

    dist_w = _pairwise_dists(ctrl_w)
    idx = [(i, j) for i in range(4) for j in range(i + 1, 4)]

    def case_betas(n_basis):
        # Linear solve for beta products over the 6 distance constraints.
        Vr = [v.reshape(4, 3) for v in V[:n_basis]]
        prods = [(a, b) for a in range(n_basis) for b in range(a, n_basis)]
        L = np.zeros((6, len(prods)))
        for row, (i, j) in enumerate(idx):
            dv = [vr[i] - vr[j] for vr in Vr]
            for col, (a, b) in enumerate(prods):
                L[row, col] = (1.0 if a == b else 2.0) * dv[a] @ dv[b]
        rho = dist_w**2
        sol = np.linalg.lstsq(L, rho, rcond=None)[0]
        betas = np.zeros(n_basis)
        b00 = sol[prods.index((0, 0))]
        betas[0] = math.sqrt(abs(b00))
        for k in range(1, n_basis):
            b0k = sol[prods.index((0, k))]
            betas[k] = b0k / betas[0] if betas[0] > 1e-12 else 0.0
        return betas

    best_pose, best_rms = None, math.inf
    for n_basis in (1, 2, 3):
        try:
            betas = case_betas(n_basis)
        except (ValueError, np.linalg.LinAlgError):
            continue
        betas = _betas_gauss_newton(betas, V[:n_basis], dist_w)
        ctrl_c = _ctrl_cam_from_betas(betas, V[:n_basis])
        cam_pts = alphas @ ctrl_c
        if np.mean(cam_pts[:, 2]) < 0:  # sign ambiguity of the null vectors
            cam_pts = -cam_pts
        R, t = _rigid_fit(pts, cam_pts)
        pose = Pose(rot_to_quat(R), t)
        rms = _pose_rms(pose, K, pts, obs)
        if rms < best_rms:
            best_pose, best_rms = pose, rms

    if best_pose is None or not math.isfinite(best_rms):
        raise DegenerateGeometryError("EPnP found no pose with all points in front of camera")

    refined = refine_pose(best_pose, K, model, obs)
    return refined.pose if refined.final_cost <= best_rms**2 * 2 * n else best_pose


# -- Levenberg-Marquardt refinement ---------------------------------------------


@dataclass(frozen=True)
class RefineConfig:
    max_iters: int = 50
    damping0: float = 1e-3
    tol: float = 1e-12


@dataclass(frozen=True)
class RefineResult:
    pose: Pose
    converged: bool
    final_cost: float
    n_iters: int


def _small_angle_quat(omega):
    angle = np.linalg.norm(omega)
    if angle < 1e-12:
        return Quaternion(1.0, *(0.5 * omega))
    axis = omega / angle
    s = math.sin(angle / 2.0)
    return Quaternion(math.cos(angle / 2.0), *(s * axis))


def _apply_step(pose, delta):
    dq = _small_angle_quat(delta[:3])
    q = dq.multiply(pose.rotation).normalized()
    return Pose(q, pose.translation + delta[3:])


def _residuals_and_jacobian(pose, K, pts, obs):
    R = quat_to_rot(pose.rotation)
    Xc = pts @ R.T + pose.translation
    if np.any(Xc[:, 2] <= _MIN_DEPTH):
        return None, None
    X, Y, Z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    proj = np.stack([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy], axis=1)
    res = (obs - proj).ravel()

    n = len(pts)
    # d(proj)/d(Xc), times d(Xc)/d[omega; t] with left perturbation
    # Xc(delta) = (I + [omega]x) R P + t + dt  =>  dXc/domega = -[R P]x, dXc/dt = I.
    J = np.zeros((2 * n, 6))
    du = np.zeros((n, 3))
    dv = np.zeros((n, 3))
    du[:, 0] = K.fx / Z
    du[:, 2] = -K.fx * X / Z**2
    dv[:, 1] = K.fy / Z
    dv[:, 2] = -K.fy * Y / Z**2
    RP = Xc - pose.translation
    for i in range(n):
        skew = np.array(
            [[0.0, -RP[i, 2], RP[i, 1]],
             [RP[i, 2], 0.0, -RP[i, 0]],
             [-RP[i, 1], RP[i, 0], 0.0]]
        )
        dXc = np.hstack([-skew, np.eye(3)])  # 3x6
        J[2 * i] = -du[i] @ dXc  # residual = obs - proj
        J[2 * i + 1] = -dv[i] @ dXc
    return res, J


def refine_pose(pose0: Pose, K: CameraIntrinsics, model: KeypointModel, observed,
                config: RefineConfig = None) -> RefineResult:
    """LM minimization of the reprojection sum-of-squares from ``pose0``.

    Accepted steps are monotonically non-increasing in the objective; damping
    is multiplied by 10 on rejection and divided by 10 on acceptance. Never
    returns a pose worse than ``pose0``.
    """
    cfg = config or RefineConfig()
    obs = _observations_array(observed)
    if len(obs) != len(model):
        raise ValueError(f"observation count {len(obs)} != model size {len(model)}")
    pts = model.points

    pose = pose0
    res, J = _residuals_and_jacobian(pose, K, pts, obs)
    if res is None:
        raise BehindCameraError("initial pose places points behind the camera")
    cost = float(res @ res)
    lam = cfg.damping0
    converged = False
    iters = 0
    for iters in range(1, cfg.max_iters + 1):
        JtJ = J.T @ J
        g = J.T @ res
        try:
            delta = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ) + 1e-12), -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        candidate = _apply_step(pose, delta)
        c_res, c_J = _residuals_and_jacobian(candidate, K, pts, obs)
        if c_res is not None and float(c_res @ c_res) <= cost:
            new_cost = float(c_res @ c_res)
            improved = cost - new_cost
            pose, res, J, cost = candidate, c_res, c_J, new_cost
            lam = max(lam / 10.0, 1e-12)
            if improved < cfg.tol * max(cost, 1.0):
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    return RefineResult(pose=pose, converged=converged, final_cost=cost, n_iters=iters)


# -- error conventions -----------------------------------------------------------


def rotation_angle_deg(q1: Quaternion, q2: Quaternion) -> float:
    """Geodesic angle 2 arccos(|<q1, q2>|) in degrees, sign-invariant."""
    dot = abs(float(q1.normalized().as_array() @ q2.normalized().as_array()))
    return math.degrees(2.0 * math.acos(min(1.0, max(-1.0, dot))))

"""Kinematic vehicle model, range-bearing sensor, and localization objective.

An Ackermann-steered car measures its rear-left wheel speed and steering
angle; the state is the planar position of a forward-mounted laser plus
the heading.  The model propagates the laser position directly, so the
laser offset (a ahead of the rear axle, b to the side) appears inside the
kinematic right-hand side.  Process noise combines control noise mapped
through the input Jacobian dR/du with additive model noise.

Most functions are vectorized over a leading batch axis so that particle
filters can propagate and weight whole ensembles in a few array
operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class SteeringSingularity(Exception):
    """Wheel-to-axle speed translation divides by L - tan(alpha) H <= 0."""


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.arctan2(np.sin(a), np.cos(a))
    return np.where(out == -np.pi, np.pi, out) if out.ndim else float(out if out != -np.pi else np.pi)


@dataclass(frozen=True)
class VehicleParams:
    L: float = 2.83          # wheel base, m
    H: float = 0.76          # half axle width to the encoder wheel, m
    b: float = 0.5           # lateral laser offset, m
    a: float = 3.78          # rear axle to laser, m
    delta: float = 0.025     # time step, s
    q_diag: tuple = (0.1, 0.1, 0.1 * np.pi / 180.0)   # model noise diffusion
    p_diag: tuple = (0.5, 0.5)                        # control noise diffusion
    sigma_r: float = 0.05                             # range noise std, m
    sigma_b: float = 0.05 * np.pi / 180.0             # bearing noise std, rad

    @property
    def QQt(self) -> np.ndarray:
        return np.diag(np.asarray(self.q_diag) ** 2)

    @property
    def PPt(self) -> np.ndarray:
        return np.diag(np.asarray(self.p_diag) ** 2)

    @property
    def Sigma2(self) -> np.ndarray:
        return np.diag([self.sigma_r ** 2, self.sigma_b ** 2])


def axle_speed(v_l: float, alpha: float, params: VehicleParams) -> float:
    """Translate the rear-left wheel speed to the axle center speed."""
    denom = params.L - np.tan(alpha) * params.H
    if np.any(denom <= 0.0):
        raise SteeringSingularity(f"L - tan(alpha) H = {denom} <= 0")
    return params.L * v_l / denom


def motion_rhs_axle(pose, v_c, alpha, params: VehicleParams):
    """Kinematic right-hand side R(x, u) with axle speed v_c as input.

    The laser position derivatives follow from differentiating
    x = x_c + a cos(beta) - b sin(beta), y = y_c + a sin(beta) + b cos(beta)
    along the axle motion.
    """
    pose = np.asarray(pose, dtype=float)
    beta = pose[..., 2]
    ta = np.tan(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    dx = v_c * (cb - ta * (params.a * sb + params.b * cb) / params.L)
    dy = v_c * (sb + ta * (params.a * cb - params.b * sb) / params.L)
    db = v_c * ta / params.L * np.ones_like(beta)
    return np.stack([dx, dy, db], axis=-1)


def motion_rhs(pose, u, params: VehicleParams):
    """R(x, u) with the logged control u = (v_l, alpha)."""
    v_l, alpha = float(u[0]), float(u[1])
    return motion_rhs_axle(pose, axle_speed(v_l, alpha, params), alpha, params)


def motion_input_jacobian(pose, v_c, alpha, params: VehicleParams):
    """dR/du in (v_c, alpha) coordinates; shape (..., 3, 2)."""
    pose = np.asarray(pose, dtype=float)
    beta = pose[..., 2]
    ta = np.tan(alpha)
    sec2 = 1.0 + ta * ta
    cb, sb = np.cos(beta), np.sin(beta)
    g1 = (params.a * sb + params.b * cb) / params.L
    g2 = (params.a * cb - params.b * sb) / params.L
    one = np.ones_like(beta)
    col_v = np.stack([cb - ta * g1, sb + ta * g2, ta / params.L * one], axis=-1)
    col_a = v_c * sec2 * np.stack([-g1, g2, one / params.L], axis=-1)
    return np.stack([col_v, col_a], axis=-1)


def motion_pose_jacobian(pose, v_c, alpha, params: VehicleParams):
    """dR/dx; only the heading column is nonzero. Shape (..., 3, 3)."""
    rhs = motion_rhs_axle(pose, v_c, alpha, params)
    out = np.zeros(rhs.shape[:-1] + (3, 3))
    out[..., 0, 2] = -rhs[..., 1]
    out[..., 1, 2] = rhs[..., 0]
    return out


def process_noise_cov(pose, u, params: VehicleParams):
    """One-step noise covariance delta (dR/du P P' dR/du' + Q Q')."""
    v_l, alpha = float(u[0]), float(u[1])
    v_c = axle_speed(v_l, alpha, params)
    J = motion_input_jacobian(pose, v_c, alpha, params)
    JP = J @ params.PPt
    cov = params.delta * (JP @ np.swapaxes(J, -1, -2) + params.QQt)
    return cov + 1e-12 * np.eye(3)


def propagate(pose, u, params: VehicleParams,
              rng: Optional[np.random.Generator] = None, noise=None):
    """Stochastic forward Euler step; heading rewrapped.

    With noise=None and rng given, draws from N(0, Sigma_1); an explicit
    noise vector makes the step deterministic.
    """
    pose = np.asarray(pose, dtype=float)
    mean = pose + motion_rhs(pose, u, params) * params.delta
    if noise is None:
        if rng is None:
            noise = 0.0
        else:
            cov = process_noise_cov(pose, u, params)
            L = np.linalg.cholesky(cov)
            eps = rng.standard_normal(pose.shape)
            noise = (L @ eps[..., None])[..., 0]
    out = mean + noise
    out[..., 2] = wrap_angle(out[..., 2])
    return out


def measure(pose, landmark, params: VehicleParams,
            rng: Optional[np.random.Generator] = None):
    """Range and bearing from the laser to a landmark.

    bearing = atan2(m2 - y, m1 - x) - beta + pi/2, wrapped to (-pi, pi];
    a forward target reads pi/2, like the physical laser sweep.
    """
    pose = np.asarray(pose, dtype=float)
    landmark = np.asarray(landmark, dtype=float)
    dx = landmark[..., 0] - pose[..., 0]
    dy = landmark[..., 1] - pose[..., 1]
    r = np.hypot(dx, dy)
    if np.any(r < 1e-9):
        raise ValueError("landmark coincides with the laser position")
    bearing = wrap_angle(np.arctan2(dy, dx) - pose[..., 2] + 0.5 * np.pi)
    z = np.stack([r, bearing], axis=-1)
    if rng is not None:
        z = z + rng.standard_normal(z.shape) * np.array([params.sigma_r, params.sigma_b])
        z[..., 1] = wrap_angle(z[..., 1])
    return z


def measurement_jacobian_pose(pose, landmark):
    """dh/dpose, shape (..., 2, 3)."""
    pose = np.asarray(pose, dtype=float)
    landmark = np.asarray(landmark, dtype=float)
    dx = pose[..., 0] - landmark[..., 0]
    dy = pose[..., 1] - landmark[..., 1]
    r2 = dx * dx + dy * dy
    r = np.sqrt(r2)
    zero = np.zeros_like(dx)
    row_r = np.stack([dx / r, dy / r, zero], axis=-1)
    row_b = np.stack([-dy / r2, dx / r2, -np.ones_like(dx)], axis=-1)
    return np.stack([row_r, row_b], axis=-2)


def measurement_jacobian_feature(pose, landmark):
    """dh/dlandmark, shape (..., 2, 2)."""
    pose = np.asarray(pose, dtype=float)
    landmark = np.asarray(landmark, dtype=float)
    dx = pose[..., 0] - landmark[..., 0]
    dy = pose[..., 1] - landmark[..., 1]
    r2 = dx * dx + dy * dy
    r = np.sqrt(r2)
    row_r = np.stack([-dx / r, -dy / r], axis=-1)
    row_b = np.stack([dy / r2, -dx / r2], axis=-1)
    return np.stack([row_r, row_b], axis=-2)


def _measurement_curvature(dx, dy, lam_r, lam_b):
    """Weighted second derivatives of (range, bearing) in the plane.

    Returns sum_k lam_k d^2 h_k / d(dx, dy)^2 as shape (..., 2, 2), where
    (dx, dy) = pose - landmark; curvature w.r.t. the landmark is identical
    and the cross block is its negative.
    """
    r2 = dx * dx + dy * dy
    r = np.sqrt(r2)
    r3, r4 = r2 * r, r2 * r2
    h_r = np.stack([
        np.stack([dy * dy / r3, -dx * dy / r3], axis=-1),
        np.stack([-dx * dy / r3, dx * dx / r3], axis=-1),
    ], axis=-2)
    h_b = np.stack([
        np.stack([2 * dx * dy / r4, (dy * dy - dx * dx) / r4], axis=-1),
        np.stack([(dy * dy - dx * dx) / r4, -2 * dx * dy / r4], axis=-1),
    ], axis=-2)
    lam_r = np.asarray(lam_r)[..., None, None]
    lam_b = np.asarray(lam_b)[..., None, None]
    return lam_r * h_r + lam_b * h_b


def mcl_objective_terms(poses, f_pred, Sigma1_inv, measurements, params):
    """Value, gradient and Hessian of the localization objective.

    F(x) = (x - f)' Sigma1^-1 (x - f)/2 + sum_i (h(x) - z_i)' Sigma2^-1
    (h(x) - z_i)/2 with wrapped heading and bearing residuals, so that
    exp(-F) is the product of the motion and measurement densities up to
    their normalization constants.  Hessians are exact (Gauss-Newton plus
    residual-weighted curvature).  All arguments broadcast over a leading
    batch axis; measurements is a list of (landmark_xy, z) pairs.
    """
    poses = np.asarray(poses, dtype=float)
    e = poses - f_pred
    e3 = wrap_angle(e[..., 2])
    e = np.concatenate([e[..., :2], np.asarray(e3)[..., None]], axis=-1)
    Se = (Sigma1_inv @ e[..., None])[..., 0]
    value = 0.5 * np.sum(e * Se, axis=-1)
    grad = Se.copy()
    hess = np.broadcast_to(Sigma1_inv, poses.shape[:-1] + (3, 3)).copy()
    inv_r2 = 1.0 / params.sigma_r ** 2
    inv_b2 = 1.0 / params.sigma_b ** 2
    for landmark, z in measurements:
        pred = measure(poses, np.asarray(landmark, dtype=float), params)
        e_r = pred[..., 0] - z[0]
        e_b = wrap_angle(pred[..., 1] - z[1])
        J = measurement_jacobian_pose(poses, landmark)
        value = value + 0.5 * (e_r ** 2 * inv_r2 + e_b ** 2 * inv_b2)
        w = np.stack([e_r * inv_r2, e_b * inv_b2], axis=-1)
        grad = grad + np.einsum("...ki,...k->...i", J, w)
        hess = hess + (inv_r2 * J[..., 0, :, None] * J[..., 0, None, :]
                       + inv_b2 * J[..., 1, :, None] * J[..., 1, None, :])
        dx = poses[..., 0] - landmark[0]
        dy = poses[..., 1] - landmark[1]
        curv = _measurement_curvature(dx, dy, e_r * inv_r2, e_b * inv_b2)
        hess[..., :2, :2] += curv
    return value, grad, hess


def mcl_objective_derivatives(poses, f_pred, Sigma1_inv, measurements, params):
    """Gradient and Hessian of the localization objective (see terms)."""
    _, grad, hess = mcl_objective_terms(poses, f_pred, Sigma1_inv,
                                        measurements, params)
    return grad, hess


def init_feature(pose, z, params: VehicleParams):
    """Invert the range-bearing map: feature mean and first covariance.

    The mean is the exact inverse of the noiseless measurement; the
    covariance maps the sensor noise through the inverse Jacobian.
    """
    pose = np.asarray(pose, dtype=float)
    z = np.asarray(z, dtype=float)
    r, bearing = z[..., 0], z[..., 1]
    psi = bearing + pose[..., 2] - 0.5 * np.pi
    c, s = np.cos(psi), np.sin(psi)
    mean = np.stack([pose[..., 0] + r * c, pose[..., 1] + r * s], axis=-1)
    J = np.stack([np.stack([c, -r * s], axis=-1),
                  np.stack([s, r * c], axis=-1)], axis=-2)
    cov = J @ params.Sigma2 @ np.swapaxes(J, -1, -2)
    return mean, cov


class VehicleWorld:
    """Filter-facing bundle of the vehicle model and (for MCL) its map.

    The particle filters are written against this small surface so that a
    linear surrogate world can stand in for the vehicle in posterior
    equivalence tests.  All pose arguments carry a leading batch axis.
    """

    pose_dim = 3
    feat_dim = 2
    zdim = 2

    def __init__(self, params: VehicleParams, landmarks=None):
        self.params = params
        self.landmarks = dict(landmarks) if landmarks else {}
        self.meas_cov = params.Sigma2
        _, self.logdet_meas_cov = np.linalg.slogdet(self.meas_cov)

    def landmark(self, landmark_id):
        return self.landmarks[landmark_id]

    def predict(self, poses, u):
        poses = np.asarray(poses, dtype=float)
        out = poses + motion_rhs(poses, u, self.params) * self.params.delta
        out[..., 2] = wrap_angle(out[..., 2])
        return out

    def noise_cov(self, poses, u):
        return process_noise_cov(poses, u, self.params)

    def sample_motion(self, poses, u, rng):
        return propagate(poses, u, self.params, rng=rng)

    def wrap_pose(self, poses):
        poses = np.asarray(poses, dtype=float).copy()
        poses[..., 2] = wrap_angle(poses[..., 2])
        return poses

    def h(self, poses, feats):
        return measure(poses, feats, self.params)

    def jac_feat(self, poses, feats):
        return measurement_jacobian_feature(poses, feats)

    def wrap_z_residual(self, e):
        e = np.asarray(e, dtype=float).copy()
        e[..., 1] = wrap_angle(e[..., 1])
        return e

    def init_feature(self, poses, z):
        return init_feature(poses, z, self.params)

    def objective_terms(self, poses, f_pred, Sigma1_inv, measurements):
        """Localization objective over the pose; measurements are (xy, z)."""
        return mcl_objective_terms(poses, f_pred, Sigma1_inv, measurements,
                                   self.params)

    def joint_objective_terms(self, poses, feats, f_pred, Sigma1_inv, z,
                              prior_mean, prior_prec):
        """SLAM objective over the joint (pose, feature) variables.

        F = motion prior + measurement likelihood + Gaussian feature prior;
        value (M,), gradient (M, 5), exact Hessian (M, 5, 5).
        """
        poses = np.asarray(poses, dtype=float)
        feats = np.asarray(feats, dtype=float)
        p = self.params
        e = poses - f_pred
        e = np.concatenate([e[..., :2], np.asarray(wrap_angle(e[..., 2]))[..., None]],
                           axis=-1)
        Se = (Sigma1_inv @ e[..., None])[..., 0]
        value = 0.5 * np.sum(e * Se, axis=-1)

        pred = measure(poses, feats, p)
        e_r = pred[..., 0] - z[0]
        e_b = wrap_angle(pred[..., 1] - z[1])
        inv_r2, inv_b2 = 1.0 / p.sigma_r ** 2, 1.0 / p.sigma_b ** 2
        value = value + 0.5 * (e_r ** 2 * inv_r2 + e_b ** 2 * inv_b2)

        ef = feats - prior_mean
        Pe = (prior_prec @ ef[..., None])[..., 0]
        value = value + 0.5 * np.sum(ef * Pe, axis=-1)

        Jx = measurement_jacobian_pose(poses, feats)
        Jf = measurement_jacobian_feature(poses, feats)
        w = np.stack([e_r * inv_r2, e_b * inv_b2], axis=-1)
        batch = poses.shape[:-1]
        grad = np.zeros(batch + (5,))
        grad[..., :3] = Se + np.einsum("...ki,...k->...i", Jx, w)
        grad[..., 3:] = np.einsum("...ki,...k->...i", Jf, w) + Pe

        hess = np.zeros(batch + (5, 5))
        hess[..., :3, :3] = Sigma1_inv
        hess[..., 3:, 3:] += prior_prec
        for r_idx, inv in ((0, inv_r2), (1, inv_b2)):
            jx = Jx[..., r_idx, :]
            jf = Jf[..., r_idx, :]
            hess[..., :3, :3] += inv * jx[..., :, None] * jx[..., None, :]
            hess[..., :3, 3:] += inv * jx[..., :, None] * jf[..., None, :]
            hess[..., 3:, :3] += inv * jf[..., :, None] * jx[..., None, :]
            hess[..., 3:, 3:] += inv * jf[..., :, None] * jf[..., None, :]
        dx = poses[..., 0] - feats[..., 0]
        dy = poses[..., 1] - feats[..., 1]
        curv = _measurement_curvature(dx, dy, e_r * inv_r2, e_b * inv_b2)
        hess[..., :2, :2] += curv
        hess[..., 3:, 3:] += curv
        hess[..., :2, 3:] -= curv
        hess[..., 3:, :2] -= curv
        return value, grad, hess

"""Two-link robotic arm under an inverse-dynamics path integral controller.

The torque law tau = C(theta, theta') theta' + M(theta) u cancels the
manipulator dynamics M theta'' + C theta' = tau, leaving the double
integrator theta'' = u.  The path-integral problem for that linear system
has an exactly quadratic path objective, so the implicit-sampling psi is
semi-analytic: no samples are ever drawn.  Robustness is probed by giving
the controller false link masses while the plant integrates the true
nonlinear dynamics with process noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from impsamp.path_control import (
    ControlProblem,
    PathDiscretization,
    optimal_control,
)


@dataclass(frozen=True)
class ArmSpec:
    l1: float = 1.0      # m
    lc1: float = 0.5     # m
    lc2: float = 0.5     # m
    m1: float = 1.0      # kg
    m2: float = 1.0      # kg
    I1: float = 2.0      # kg m^2
    I2: float = 2.0      # kg m^2
    controller_m1: Optional[float] = None   # None: controller knows the truth
    controller_m2: Optional[float] = None
    target: tuple = (1.0, 0.5)               # desired angles, rad
    r: float = 1e-5                           # control cost scale
    t_f: float = 2.0
    dt: float = 0.02
    plant_noise: float = 0.02                 # velocity diffusion, rad/s per sqrt(s)
    plant_substeps: int = 10

    def coefficients(self, controller: bool = False):
        m1 = self.controller_m1 if controller and self.controller_m1 is not None else self.m1
        m2 = self.controller_m2 if controller and self.controller_m2 is not None else self.m2
        a1 = m1 * self.lc1 ** 2 + m2 * self.lc1 ** 2 + m2 * self.lc2 ** 2 + self.I1 + self.I2
        a2 = m2 * self.lc2 ** 2 + self.I2
        a3 = self.l1 * m2 * self.lc2
        return a1, a2, a3


def arm_matrices(theta: np.ndarray, theta_dot: np.ndarray, spec: ArmSpec,
                 controller: bool = False):
    """Inertia matrix M(theta) and Coriolis matrix C(theta, theta').

    The M11 entry is a1 + 2 a3 cos(theta2), the standard two-link form;
    it is the one for which dM/dt - 2C is skew-symmetric, i.e. for which
    the unforced arm conserves kinetic energy.
    """
    a1, a2, a3 = spec.coefficients(controller=controller)
    c2 = np.cos(theta[1])
    s2 = np.sin(theta[1])
    M = np.array([[a1 + 2.0 * a3 * c2, a2 + a3 * c2],
                  [a2 + a3 * c2, a2]])
    C = np.array([[-a3 * s2 * theta_dot[1], -a3 * (theta_dot[0] + theta_dot[1]) * s2],
                  [a3 * s2 * theta_dot[0], 0.0]])
    return M, C


def make_problem(spec: ArmSpec) -> ControlProblem:
    """Double-integrator path-integral problem in (theta, theta')."""
    target = np.asarray(spec.target, dtype=float)
    A = np.zeros((4, 4))
    A[0, 2] = A[1, 3] = 1.0
    G = np.zeros((4, 2))
    G[2, 0] = G[3, 1] = 1.0

    def final_cost(x):
        return 0.5 * float((x[:2] - target) @ (x[:2] - target)) + 0.5 * float(x[2:] @ x[2:])

    def final_grad(x):
        return np.concatenate([x[:2] - target, x[2:]])

    return ControlProblem(
        state_dim=4, control_dim=2,
        G=G, Q=np.eye(2), R=spec.r * np.eye(2),
        gamma=spec.r,
        drift_linear=A,
        final_cost=final_cost,
        final_grad=final_grad,
        final_hess=lambda x: np.eye(4),
        final_quadratic=True)


def _plant_accel(theta, theta_dot, tau, spec: ArmSpec):
    M, C = arm_matrices(theta, theta_dot, spec, controller=False)
    return np.linalg.solve(M, tau - C @ theta_dot)


def arm_closed_loop(spec: ArmSpec, theta0=(0.0, 0.0), theta_dot0=(0.0, 0.0),
                    rng: Optional[np.random.Generator] = None):
    """Run the arm to the target under path integral control.

    The outer loop re-plans u every dt from the semi-analytic psi of the
    double-integrator model (with controller-side masses in the torque
    law); the inner loop recomputes the inverse-dynamics torque and
    integrates the true nonlinear plant at dt/plant_substeps, adding
    velocity process noise.  Returns per-step angles, velocities, torques
    and the accelerations u requested by the planner.
    """
    if rng is None:
        rng = np.random.default_rng()
    problem = make_problem(spec)
    disc = PathDiscretization.from_horizon(0.0, spec.t_f, spec.dt)
    n = disc.steps
    theta = np.asarray(theta0, dtype=float).copy()
    theta_dot = np.asarray(theta_dot0, dtype=float).copy()
    thetas = np.zeros((n + 1, 2))
    theta_dots = np.zeros((n + 1, 2))
    torques = np.zeros((n, 2))
    accels = np.zeros((n, 2))
    thetas[0], theta_dots[0] = theta, theta_dot
    dt_sub = spec.dt / spec.plant_substeps
    for k in range(n):
        x = np.concatenate([theta, theta_dot])
        u = optimal_control(problem, x, k * spec.dt, disc.advanced(k))
        for _ in range(spec.plant_substeps):
            M_ctrl, C_ctrl = arm_matrices(theta, theta_dot, spec, controller=True)
            tau = C_ctrl @ theta_dot + M_ctrl @ u
            acc = _plant_accel(theta, theta_dot, tau, spec)
            theta = theta + dt_sub * theta_dot
            theta_dot = (theta_dot + dt_sub * acc
                         + spec.plant_noise * np.sqrt(dt_sub) * rng.standard_normal(2))
        thetas[k + 1], theta_dots[k + 1] = theta, theta_dot
        torques[k] = tau
        accels[k] = u
    return {"t": disc.times(), "theta": thetas, "theta_dot": theta_dots,
            "tau": torques, "u": accels}

"""The double slit problem: steer a diffusing walker through one of two doors.

A potential wall at the critical time t1 is infinite everywhere except on
two intervals (the slits).  Unguided diffusion paths almost surely hit the
wall and contribute nothing to the Feynman-Kac average; implicit sampling
locates the slit minima by constrained quadratic minimization and guides
every sample through.  The problem also has a closed-form solution (a
Gaussian convolution past the wall, a two-stage Gaussian integral over the
slits before it), which serves as the accuracy reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.linalg import solve_triangular

from impsamp.numerics import Interval, cholesky, constrained_quadratic_minimize, log_det_cholesky
from impsamp.path_control import (
    ControlProblem,
    PathDiscretization,
    PsiEstimate,
    SliceConstraint,
    estimate_psi,
    optimal_control,
    path_objective,
)


@dataclass(frozen=True)
class DoubleSlitSpec:
    t_f: float = 2.0
    t1: float = 1.0
    a: float = -6.0
    b: float = -4.0
    c: float = 6.0
    d: float = 8.0
    x0: float = 1.0
    sigma: float = 1.0
    r: float = 0.1
    dt: float = 0.02

    def __post_init__(self):
        assert self.a < self.b < self.c < self.d
        assert 0.0 < self.t1 < self.t_f

    @property
    def gamma(self) -> float:
        # gamma G R^-1 G' = G Q Q' G' requires gamma = r * sigma.
        return self.r * self.sigma

    @property
    def slits(self):
        return (Interval(self.a, self.b), Interval(self.c, self.d))


def double_slit_potential(x: float, t: float, spec: DoubleSlitSpec) -> float:
    """Infinite outside the slits at the grid time nearest t1, else zero."""
    if abs(t - spec.t1) >= 0.5 * spec.dt:
        return 0.0
    if spec.a <= x <= spec.b or spec.c <= x <= spec.d:
        return 0.0
    return np.inf


def make_problem(spec: DoubleSlitSpec) -> ControlProblem:
    """Control problem with the wall expressed as a slice constraint."""
    return ControlProblem(
        state_dim=1, control_dim=1,
        G=np.array([[1.0]]),
        Q=np.array([[np.sqrt(spec.sigma)]]),
        R=np.array([[spec.r]]),
        gamma=spec.gamma,
        final_cost=lambda x: 0.5 * float(x[0] ** 2),
        final_grad=lambda x: np.array([x[0]]),
        final_hess=lambda x: np.array([[1.0]]),
        final_quadratic=True,
        constraints=(SliceConstraint(time=spec.t1, coord=0, intervals=spec.slits),))


def double_slit_analytic(x: float, t: float, spec: DoubleSlitSpec):
    """Closed-form (psi, u) at state x, time t.

    Past the wall the path endpoint is Gaussian and the integral against
    exp(-z^2 / 2 gamma) collapses to
    psi = sqrt(gamma/(s+gamma)) exp(-x^2 / 2(s+gamma)) with s = sigma (tf - t).
    Before the wall the integration is split at t1 and reduced to a 1-D
    integral over the slits, evaluated by adaptive quadrature.  The control
    is u = (gamma/r) d log psi / dx (analytic past the wall, tight central
    differences before it).
    """
    gamma = spec.gamma
    if t >= spec.t1:
        s = spec.sigma * (spec.t_f - t)
        psi = np.sqrt(gamma / (s + gamma)) * np.exp(-x ** 2 / (2.0 * (s + gamma)))
        u = -(gamma / spec.r) * x / (s + gamma)
        return psi, u

    def log_psi(y: float) -> float:
        return np.log(_pre_wall_psi(y, t, spec))

    psi = _pre_wall_psi(x, t, spec)
    h = 1e-6 * (1.0 + abs(x))
    u = (gamma / spec.r) * (log_psi(x + h) - log_psi(x - h)) / (2.0 * h)
    return psi, u


def _pre_wall_psi(x: float, t: float, spec: DoubleSlitSpec) -> float:
    gamma = spec.gamma
    s = spec.sigma * (spec.t_f - spec.t1)
    s_hat = spec.sigma * (spec.t1 - t)
    pref = np.sqrt(gamma / (s + gamma))

    def integrand(y1):
        transition = np.exp(-(y1 - x) ** 2 / (2.0 * s_hat)) / np.sqrt(2.0 * np.pi * s_hat)
        return transition * np.exp(-y1 ** 2 / (2.0 * (s + gamma)))

    total = 0.0
    for iv in spec.slits:
        val, _ = quad(integrand, iv.lo, iv.hi, epsabs=1e-14, epsrel=1e-11)
        total += val
    return pref * total


def unguided_walks(spec: DoubleSlitSpec, n_walks: int, rng: np.random.Generator):
    """Plain forward-Euler diffusion paths from x0; returns (paths, hit_mask).

    A walk hits the wall when its position at the t1 grid slice falls
    outside both slits.
    """
    n = int(round(spec.t_f / spec.dt))
    i1 = int(round(spec.t1 / spec.dt))
    steps = np.sqrt(spec.sigma * spec.dt) * rng.standard_normal((n_walks, n))
    paths = np.concatenate([np.full((n_walks, 1), spec.x0),
                            spec.x0 + np.cumsum(steps, axis=1)], axis=1)
    at_wall = paths[:, i1]
    passes = (((at_wall >= spec.a) & (at_wall <= spec.b))
              | ((at_wall >= spec.c) & (at_wall <= spec.d)))
    return paths, ~passes


def sample_pre_wall(spec: DoubleSlitSpec, x: float, t: float, n_samples: int,
                    rng: np.random.Generator):
    """Guided path ensemble through the wall, plus the psi estimate.

    Both slit minima are found by constrained quadratic minimization and
    sampling proceeds about the lower one with the unconstrained Hessian
    factor.  psi is estimated as exp(-phi) (dt sigma)^{-n/2} / det L times
    the fraction of raw draws whose t1 coordinate clears the wall (the
    Gaussian slit mass).  The returned paths fold that coordinate back into
    the slit across the clamped boundary, with the remaining coordinates
    shifted by their conditional mean, so nearly every returned path passes
    through the door; draws beyond the reachable fold stay outside and are
    flagged as hits.
    """
    if not t < spec.t1:
        raise ValueError("pre-wall sampler requires t < t1")
    problem = make_problem(spec)
    disc = PathDiscretization.from_horizon(t, spec.t_f, spec.dt)
    obj = path_objective(problem, np.array([x]), t, disc)
    flat, con = obj.constraint_slices[0]

    candidates = [(constrained_quadratic_minimize(obj, flat, iv), iv)
                  for iv in con.intervals]
    (best, slit) = min(candidates, key=lambda pair: pair[0].minimum)
    mu, phi = best.minimizer, best.minimum
    H = 0.5 * (best.hessian + best.hessian.T)
    L = cholesky(H)

    xi = rng.standard_normal((n_samples, obj.dim))
    draws = mu + solve_triangular(L, xi.T, lower=True, trans="T").T
    raw_pass = con.allows(draws[:, flat])
    fraction = float(np.mean(raw_pass))

    base = -0.5 * obj.n * np.log(disc.dt * spec.sigma)
    smooth = -phi + base - log_det_cholesky(L)
    log_psi = smooth + (np.log(fraction) if fraction > 0 else -np.inf)
    est = PsiEstimate(log_psi=log_psi, phi=phi, samples_used=n_samples,
                      log_psi_smooth=smooth, mass_fraction=fraction)

    # Fold the slice coordinate into the active slit; shift the other
    # coordinates by the conditional-mean change so paths stay coherent.
    rest = np.arange(obj.dim) != flat
    k_vec = np.linalg.solve(H[np.ix_(rest, rest)], H[rest, flat])
    vals = draws[:, flat]
    outside = ~((vals >= slit.lo) & (vals <= slit.hi))
    folded = 2.0 * mu[flat] - vals
    fold_ok = outside & (folded >= slit.lo) & (folded <= slit.hi)
    new_vals = np.where(fold_ok, folded, vals)
    shift = (vals - new_vals)[:, None] * k_vec[None, :]
    draws[:, rest] += shift
    draws[:, flat] = new_vals
    hits = ~((new_vals >= slit.lo) & (new_vals <= slit.hi))

    paths = np.stack([obj.reconstruct(Y)[:, 0] for Y in draws])
    return est, paths, hits


def run_comparison(spec: DoubleSlitSpec, n_samples: int, seed: int,
                   method: str = "quadratic_map"):
    """One closed-loop run: implicit-sampling control vs the analytic one.

    Both trajectories start at x0 and are driven by the same Brownian
    increments; they differ only through the applied control.  Returns the
    per-step states and controls plus Euclidean error norms.
    """
    rng = np.random.default_rng(seed)
    problem = make_problem(spec)
    disc = PathDiscretization.from_horizon(0.0, spec.t_f, spec.dt)
    n = disc.steps
    x_num, x_ana = spec.x0, spec.x0
    xs_num, xs_ana = np.zeros(n + 1), np.zeros(n + 1)
    us_num, us_ana = np.zeros(n), np.zeros(n)
    xs_num[0] = xs_ana[0] = spec.x0
    sqdt = np.sqrt(spec.sigma * spec.dt)
    for k in range(n):
        t_k = k * spec.dt
        u_num = optimal_control(problem, np.array([x_num]), t_k, disc.advanced(k),
                                n_samples=n_samples, method=method, rng=rng)[0]
        _, u_ana = double_slit_analytic(x_ana, t_k, spec)
        dw = rng.standard_normal()
        x_num = x_num + u_num * spec.dt + sqdt * dw
        x_ana = x_ana + u_ana * spec.dt + sqdt * dw
        xs_num[k + 1], xs_ana[k + 1] = x_num, x_ana
        us_num[k], us_ana[k] = u_num, u_ana
    return {
        "t": disc.times(),
        "x_num": xs_num, "x_ana": xs_ana,
        "u_num": us_num, "u_ana": us_ana,
        "err_x": float(np.linalg.norm(xs_num - xs_ana)),
        "norm_x": float(np.linalg.norm(xs_ana)),
        "err_u": float(np.linalg.norm(us_num - us_ana)),
        "norm_u": float(np.linalg.norm(us_ana)),
    }


def comparison_statistics(spec: DoubleSlitSpec, n_samples: int, seeds,
                          method: str = "quadratic_map"):
    """Mean/std of the per-run error norms, scaled by the mean trajectory norm."""
    runs = [run_comparison(spec, n_samples, seed, method) for seed in seeds]
    mean_norm_x = np.mean([r["norm_x"] for r in runs])
    mean_norm_u = np.mean([r["norm_u"] for r in runs])
    err_x = 100.0 * np.array([r["err_x"] for r in runs]) / mean_norm_x
    err_u = 100.0 * np.array([r["err_u"] for r in runs]) / mean_norm_u
    return {
        "err_x_pct_mean": float(err_x.mean()), "err_x_pct_std": float(err_x.std()),
        "err_u_pct_mean": float(err_u.mean()), "err_u_pct_std": float(err_u.std()),
        "runs": runs,
    }

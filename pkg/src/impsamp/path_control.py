"""Path integral stochastic optimal control via implicit sampling.

The linearized Hamilton-Jacobi-Bellman solution psi(x, t) is represented
as a Feynman-Kac expectation over uncontrolled diffusion paths, the path
integral is discretized on a regular time grid (forward Euler drift at the
left endpoint, trapezoidal running cost), and the resulting path density
exp(-F) is sampled implicitly.  The optimal control is recovered from
finite differences of J = -gamma log psi with common random numbers.

Only the noise-driven state coordinates are free variables of the path
objective; deterministic coordinates are propagated inside F.  For affine
drift the objective carries exact gradients and Hessians assembled by the
chain rule through the affine state maps, and exactly quadratic objectives
(quadratic final cost, no running potential) bypass sampling entirely: the
expectation is evaluated in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from impsamp import sampler
from impsamp.numerics import (
    Interval,
    NoBracket,
    Objective,
    cholesky,
    constrained_quadratic_minimize,
    log_det_cholesky,
)
from impsamp.sampler import DegenerateEnsemble, logmeanexp

PENALTY = 1e12  # stand-in for an infinite potential inside optimization-facing F


class ConditionViolated(Exception):
    """The noise/control-cost compatibility condition fails."""


@dataclass(frozen=True)
class PathDiscretization:
    dt: float
    steps: int
    start_time: float = 0.0

    def __post_init__(self):
        if self.dt <= 0 or self.steps < 1:
            raise ValueError("need dt > 0 and steps >= 1")

    @classmethod
    def from_horizon(cls, t: float, t_final: float, dt: float) -> "PathDiscretization":
        steps = int(round((t_final - t) / dt))
        if steps < 1 or abs(steps * dt - (t_final - t)) > 1e-9 * max(1.0, t_final):
            raise ValueError(f"horizon {t_final - t} is not a multiple of dt={dt}")
        return cls(dt=dt, steps=steps, start_time=t)

    def times(self) -> np.ndarray:
        return self.start_time + self.dt * np.arange(self.steps + 1)

    def advanced(self, k: int) -> "PathDiscretization":
        """Discretization seen from k steps later (shrinking horizon)."""
        return PathDiscretization(dt=self.dt, steps=self.steps - k,
                                  start_time=self.start_time + k * self.dt)


@dataclass(frozen=True)
class SliceConstraint:
    """State coordinate boxed into a union of intervals at one time."""
    time: float
    coord: int
    intervals: tuple

    def allows(self, value) -> np.ndarray:
        value = np.asarray(value)
        ok = np.zeros(value.shape, dtype=bool)
        for iv in self.intervals:
            ok |= (value >= iv.lo) & (value <= iv.hi)
        return ok


@dataclass
class ControlProblem:
    """A finite-horizon stochastic control instance.

    Dynamics dx = f dt + G (u dt + Q dW), running cost u'Ru + V(x, t),
    final cost Phi.  gamma must satisfy gamma G R^{-1} G' = G Q Q' G',
    which is checked at construction.
    """

    state_dim: int
    control_dim: int
    G: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    gamma: float
    final_cost: Callable[[np.ndarray], float]
    drift: Optional[Callable] = None
    drift_linear: Optional[np.ndarray] = None
    potential: Optional[Callable] = None
    potential_grad: Optional[Callable] = None
    potential_hess: Optional[Callable] = None
    final_grad: Optional[Callable] = None
    final_hess: Optional[Callable] = None
    final_quadratic: bool = False
    constraints: tuple = ()

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.Sigma = self.G @ self.Q @ self.Q.T @ self.G.T
        lhs = self.gamma * self.G @ np.linalg.solve(self.R, self.G.T)
        scale = max(np.abs(self.Sigma).max(), 1e-300)
        if np.abs(lhs - self.Sigma).max() > 1e-8 * scale:
            raise ConditionViolated(
                "gamma G R^-1 G' != G Q Q' G':\n"
                f"gamma G R^-1 G' =\n{lhs}\nG Q Q' G' =\n{self.Sigma}")
        gq = self.G @ self.Q
        self.noise_idx = np.flatnonzero(np.any(gq != 0.0, axis=1))
        if self.noise_idx.size == 0:
            raise ValueError("no noise-driven coordinates")
        self.Sigma_nu = self.Sigma[np.ix_(self.noise_idx, self.noise_idx)]
        self.Sigma_nu_inv = np.linalg.inv(self.Sigma_nu)
        _, self.logdet_Sigma_nu = np.linalg.slogdet(self.Sigma_nu)
        if self.drift_linear is not None:
            self.drift_linear = np.asarray(self.drift_linear, dtype=float)

    @property
    def affine_drift(self) -> bool:
        return self.drift is None or self.drift_linear is not None

    def drift_at(self, x: np.ndarray, t: float) -> np.ndarray:
        if self.drift_linear is not None:
            return self.drift_linear @ x
        if self.drift is not None:
            return np.asarray(self.drift(x, t), dtype=float)
        return np.zeros(self.state_dim)

    def potential_at(self, x: np.ndarray, t: float) -> float:
        return float(self.potential(x, t)) if self.potential is not None else 0.0


class PathObjective(Objective):
    """Discretized negative log path density plus exponentiated costs.

    The free variable Y stacks the noise-driven coordinates of the path,
    (y_1, ..., y_n), each of dimension d; deterministic coordinates are
    propagated inside the objective.
    """

    def __init__(self, problem: ControlProblem, x: np.ndarray, t: float,
                 disc: PathDiscretization):
        self.problem = problem
        self.x0 = np.asarray(x, dtype=float).copy()
        self.t = float(t)
        self.disc = disc
        self.nu = problem.noise_idx
        self.d = self.nu.size
        self.n = disc.steps
        m = problem.state_dim
        free_dim = self.n * self.d
        self.taus = disc.times()

        if problem.affine_drift:
            self._build_affine_maps()
        else:
            self.T = None

        # Active slice constraints, mapped to flat indices of Y.
        self.constraint_slices = []
        for con in problem.constraints:
            i_star = int(round((con.time - self.t) / disc.dt))
            if 1 <= i_star <= self.n:
                pos = int(np.flatnonzero(self.nu == con.coord)[0])
                flat = (i_star - 1) * self.d + pos
                self.constraint_slices.append((flat, con))

        self.is_quadratic = (problem.affine_drift and problem.potential is None
                             and problem.final_quadratic)
        if self.is_quadratic:
            Tn = self.T[self.n]
            Hf = np.asarray(problem.final_hess(self.C[self.n]), dtype=float)
            self._H_const = self._H_kin + Tn.T @ Hf @ Tn / problem.gamma
            grad_at_0 = (self._b_kin
                         + Tn.T @ np.asarray(problem.final_grad(self.C[self.n]),
                                             dtype=float) / problem.gamma)
            self._b_const = grad_at_0

        grad = self._gradient if problem.affine_drift and self._has_smooth_derivatives() else None
        hess = self._hessian if grad is not None else None
        super().__init__(free_dim, self._evaluate, grad=grad, hess=hess)

    def _has_smooth_derivatives(self) -> bool:
        p = self.problem
        pot_ok = p.potential is None or (p.potential_grad is not None
                                         and p.potential_hess is not None)
        fin_ok = p.final_grad is not None and p.final_hess is not None
        return pot_ok and fin_ok

    def _build_affine_maps(self):
        p = self.problem
        m, d, n = p.state_dim, self.d, self.n
        dt = self.disc.dt
        A = p.drift_linear if p.drift_linear is not None else np.zeros((m, m))
        A_nu = A[self.nu]
        det_idx = np.setdiff1d(np.arange(m), self.nu)
        step = np.eye(m) + dt * A
        free_dim = n * d

        T = np.zeros((n + 1, m, free_dim))
        C = np.zeros((n + 1, m))
        C[0] = self.x0
        for i in range(1, n + 1):
            T[i] = step @ T[i - 1]
            C[i] = step @ C[i - 1]
            T[i, self.nu, :] = 0.0
            C[i, self.nu] = 0.0
            for k, coord in enumerate(self.nu):
                T[i, coord, (i - 1) * d + k] = 1.0

        # Kinetic quadratic form: sum_i dt/2 * r_i' Sigma_nu^-1 r_i with
        # r_i = (x_i[nu] - x_{i-1}[nu])/dt - (A x_{i-1})[nu].
        H = np.zeros((free_dim, free_dim))
        b = np.zeros(free_dim)
        c = 0.0
        W = p.Sigma_nu_inv * dt
        for i in range(1, n + 1):
            R_i = (T[i, self.nu] - T[i - 1, self.nu]) / dt - A_nu @ T[i - 1]
            e_i = (C[i, self.nu] - C[i - 1, self.nu]) / dt - A_nu @ C[i - 1]
            WR = W @ R_i
            H += R_i.T @ WR
            b += WR.T @ e_i
            c += 0.5 * float(e_i @ W @ e_i)
        self.T, self.C = T, C
        self._H_kin, self._b_kin, self._c_kin = H, b, c
        self._det_idx = det_idx

    # -- state reconstruction -------------------------------------------------

    def reconstruct(self, Y: np.ndarray) -> np.ndarray:
        """Full state path (n+1, m) for stacked noise coordinates Y."""
        Y = np.asarray(Y, dtype=float)
        if self.T is not None:
            return self.C + self.T @ Y
        p = self.problem
        states = np.zeros((self.n + 1, p.state_dim))
        states[0] = self.x0
        det = np.setdiff1d(np.arange(p.state_dim), self.nu)
        for i in range(1, self.n + 1):
            f_prev = p.drift_at(states[i - 1], self.taus[i - 1])
            states[i, det] = states[i - 1, det] + self.disc.dt * f_prev[det]
            states[i, self.nu] = Y[(i - 1) * self.d: i * self.d]
        return states

    def initial_guess(self) -> np.ndarray:
        return np.tile(self.x0[self.nu], self.n)

    # -- objective pieces -----------------------------------------------------

    def _kinetic(self, Y: np.ndarray, states: np.ndarray) -> float:
        if self.T is not None:
            return (0.5 * float(Y @ self._H_kin @ Y) + float(self._b_kin @ Y)
                    + self._c_kin)
        p = self.problem
        total = 0.0
        for i in range(1, self.n + 1):
            f_prev = p.drift_at(states[i - 1], self.taus[i - 1])
            r = ((states[i, self.nu] - states[i - 1, self.nu]) / self.disc.dt
                 - f_prev[self.nu])
            total += 0.5 * self.disc.dt * float(r @ p.Sigma_nu_inv @ r)
        return total

    def _cost_terms(self, states: np.ndarray) -> float:
        p = self.problem
        total = float(p.final_cost(states[self.n])) / p.gamma
        if p.potential is not None:
            coef = np.full(self.n + 1, self.disc.dt / p.gamma)
            coef[0] = coef[-1] = 0.5 * self.disc.dt / p.gamma
            for i in range(self.n + 1):
                v = p.potential_at(states[i], self.taus[i])
                total += coef[i] * min(v, PENALTY)
        return total

    def _evaluate(self, Y: np.ndarray) -> float:
        states = self.reconstruct(Y)
        return self._kinetic(Y, states) + self._cost_terms(states)

    def _gradient(self, Y: np.ndarray) -> np.ndarray:
        p = self.problem
        if self.is_quadratic:
            return self._H_const @ Y + self._b_const
        states = self.reconstruct(Y)
        g = self._H_kin @ Y + self._b_kin
        g += self.T[self.n].T @ np.asarray(p.final_grad(states[self.n]),
                                           dtype=float) / p.gamma
        if p.potential is not None:
            coef = np.full(self.n + 1, self.disc.dt / p.gamma)
            coef[0] = coef[-1] = 0.5 * self.disc.dt / p.gamma
            for i in range(1, self.n + 1):
                gv = np.asarray(p.potential_grad(states[i], self.taus[i]), dtype=float)
                g += coef[i] * (self.T[i].T @ gv)
        return g

    def _hessian(self, Y: np.ndarray) -> np.ndarray:
        p = self.problem
        if self.is_quadratic:
            return self._H_const
        states = self.reconstruct(Y)
        H = self._H_kin.copy()
        Tn = self.T[self.n]
        H += Tn.T @ np.asarray(p.final_hess(states[self.n]), dtype=float) @ Tn / p.gamma
        if p.potential is not None:
            coef = np.full(self.n + 1, self.disc.dt / p.gamma)
            coef[0] = coef[-1] = 0.5 * self.disc.dt / p.gamma
            for i in range(1, self.n + 1):
                Hv = np.asarray(p.potential_hess(states[i], self.taus[i]), dtype=float)
                H += coef[i] * (self.T[i].T @ Hv @ self.T[i])
        return H

    def quadratic_minimize(self):
        """Exact minimizer of a quadratic objective: (mu, phi, L)."""
        L = cholesky(0.5 * (self._H_const + self._H_const.T))
        z = solve_triangular(L, -self._b_const, lower=True)
        mu = solve_triangular(L, z, lower=True, trans="T")
        return mu, self._evaluate(mu), L


def path_objective(problem: ControlProblem, x: np.ndarray, t: float,
                   disc: PathDiscretization) -> PathObjective:
    """The sampling target F for paths started at state x, time t."""
    return PathObjective(problem, x, t, disc)


def path_cost_G(problem: ControlProblem, states: np.ndarray,
                disc: PathDiscretization) -> float:
    """Exponentiated path cost: final cost plus trapezoidal potential.

    Unlike the optimization-facing objective this returns exact +inf for
    paths that touch an infinite potential or violate a slice constraint.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = states.shape[0] - 1
    taus = disc.times()
    total = float(problem.final_cost(states[n])) / problem.gamma
    if problem.potential is not None:
        coef = np.full(n + 1, disc.dt / problem.gamma)
        coef[0] = coef[-1] = 0.5 * disc.dt / problem.gamma
        for i in range(n + 1):
            v = problem.potential_at(states[i], taus[i])
            if np.isinf(v):
                return np.inf
            total += coef[i] * v
    for con in problem.constraints:
        i_star = int(round((con.time - disc.start_time) / disc.dt))
        if 1 <= i_star <= n and not con.allows(states[i_star, con.coord]):
            return np.inf
    return total


@dataclass
class PsiEstimate:
    log_psi: float
    phi: float
    samples_used: int
    log_psi_smooth: float
    n_rejected: int = 0
    mass_fraction: Optional[float] = None
    minimizer: Optional[np.ndarray] = None


def _base_log_constant(problem: ControlProblem, obj: PathObjective) -> float:
    # (dt^d det Sigma_nu)^{-n/2}; the (2pi)^{nd/2} factors cancel exactly
    # against the Gaussian reference integral.
    return -0.5 * obj.n * (obj.d * np.log(obj.disc.dt) + problem.logdet_Sigma_nu)


def estimate_psi(problem: ControlProblem, x: np.ndarray, t: float,
                 disc: PathDiscretization, n_samples: int = 0,
                 method: str = "random_map",
                 rng: Optional[np.random.Generator] = None,
                 xi: Optional[np.ndarray] = None,
                 exact_quadratic: bool = True,
                 warm_start: Optional[np.ndarray] = None) -> PsiEstimate:
    """Estimate psi(x, t) = E[exp(-path cost / gamma)] by implicit sampling.

    The returned log_psi is normalized: it includes the minimum phi, the
    Cholesky determinant and the (dt^d det Sigma)^{-n/2} discretization
    constant, so for exactly Gaussian path densities it reproduces closed
    forms without adjustable constants.  log_psi_smooth omits the sampled
    slit-mass fraction on constrained problems; it is the piece whose
    state-derivative defines the control (the mass term is constant in x
    between constraint-activity changes).

    For exactly quadratic objectives the expectation is deterministic and
    no samples are drawn unless exact_quadratic=False forces the generic
    sampling path.
    """
    obj = path_objective(problem, x, t, disc)
    base = _base_log_constant(problem, obj)

    if obj.constraint_slices:
        if not obj.is_quadratic:
            raise NotImplementedError("slice constraints require a quadratic objective")
        flat, con = obj.constraint_slices[0]
        if len(obj.constraint_slices) > 1:
            raise NotImplementedError("at most one constrained slice is supported")
        candidates = [constrained_quadratic_minimize(obj, flat, iv)
                      for iv in con.intervals]
        best = min(candidates, key=lambda r: r.minimum)
        mu, phi = best.minimizer, best.minimum
        L = cholesky(0.5 * (best.hessian + best.hessian.T))
        smooth = -phi + base - log_det_cholesky(L)
        if n_samples > 0:
            if xi is None:
                xi = rng.standard_normal((n_samples, obj.dim))
            draws = mu + solve_triangular(L, xi.T, lower=True, trans="T").T
            passed = con.allows(draws[:, flat])
            frac = float(np.mean(passed))
            if frac == 0.0:
                raise DegenerateEnsemble("no sampled path clears the constraint")
            return PsiEstimate(log_psi=smooth + np.log(frac), phi=phi,
                               samples_used=n_samples, log_psi_smooth=smooth,
                               mass_fraction=frac, minimizer=mu)
        return PsiEstimate(log_psi=smooth, phi=phi, samples_used=0,
                           log_psi_smooth=smooth, minimizer=mu)

    if obj.is_quadratic and exact_quadratic:
        mu, phi, L = obj.quadratic_minimize()
        log_psi = -phi + base - log_det_cholesky(L)
        return PsiEstimate(log_psi=log_psi, phi=phi, samples_used=0,
                           log_psi_smooth=log_psi, minimizer=mu)

    x_start = warm_start if warm_start is not None else obj.initial_guess()
    mu, phi, L = sampler.prepare(obj, x_start)
    if n_samples == 0 and xi is None:
        # Laplace approximation: the quadratic-model value with no
        # sampling correction.
        log_psi = -phi + base - log_det_cholesky(L)
        return PsiEstimate(log_psi=log_psi, phi=phi, samples_used=0,
                           log_psi_smooth=log_psi, minimizer=mu)
    if xi is not None:
        contributions = np.full(xi.shape[0], -np.inf)
        n_rejected = 0
        for j in range(xi.shape[0]):
            try:
                if method == "random_map":
                    s = sampler.sample_random_map(obj, mu, phi, L, xi[j])
                    contributions[j] = -phi + s.log_jacobian
                else:
                    s = sampler.sample_quadratic_map(obj, mu, phi, L, xi[j])
                    contributions[j] = s.log_weight - log_det_cholesky(L)
            except NoBracket:
                n_rejected += 1
        used = xi.shape[0]
    else:
        ens = sampler.draw_ensemble(obj, mu, phi, L, n_samples, rng, method=method)
        if method == "random_map":
            contributions = -phi + np.array([s.log_jacobian for s in ens.samples])
        else:
            contributions = ens.log_weights - log_det_cholesky(L)
        n_rejected = ens.n_rejected
        used = n_samples
    lme = logmeanexp(contributions)
    if not np.isfinite(lme):
        raise DegenerateEnsemble("all path samples rejected")
    log_psi = base + lme
    return PsiEstimate(log_psi=log_psi, phi=phi, samples_used=used,
                       log_psi_smooth=log_psi, n_rejected=n_rejected,
                       minimizer=mu)


def optimal_control(problem: ControlProblem, x: np.ndarray, t: float,
                    disc: PathDiscretization, n_samples: int = 0,
                    method: str = "random_map",
                    fd_step: float = 1e-3,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """u = -R^{-1} G' (dJ/dx)' with J = -gamma log psi.

    The state gradient is a central difference over 2m stencil points that
    share one block of reference draws (common random numbers), so the
    Monte Carlo noise largely cancels in the difference.  On multi-modal
    objectives every stencil minimization is warm-started from the center
    point's minimizer, which keeps the whole stencil on one branch of psi;
    mixing branches would difference unrelated minima and produce control
    spikes.
    """
    x = np.asarray(x, dtype=float)
    m = problem.state_dim
    h = fd_step * (1.0 + np.abs(x).max())
    xi = None
    if n_samples > 0 and rng is not None:
        free_dim = disc.steps * problem.noise_idx.size
        xi = rng.standard_normal((n_samples, free_dim))
    center = estimate_psi(problem, x, t, disc, 0, method, rng)
    warm = center.minimizer
    dJ = np.zeros(m)
    for i in range(m):
        e = np.zeros(m)
        e[i] = h
        hi = estimate_psi(problem, x + e, t, disc, n_samples, method, rng,
                          xi=xi, warm_start=warm)
        lo = estimate_psi(problem, x - e, t, disc, n_samples, method, rng,
                          xi=xi, warm_start=warm)
        dJ[i] = -problem.gamma * (hi.log_psi_smooth - lo.log_psi_smooth) / (2.0 * h)
    return -np.linalg.solve(problem.R, problem.G.T @ dJ)


def step_dynamics(problem: ControlProblem, x: np.ndarray, t: float, u: np.ndarray,
                  dt: float, rng: Optional[np.random.Generator] = None,
                  noise: Optional[np.ndarray] = None) -> np.ndarray:
    """One forward-Euler step of dx = f dt + G(u dt + Q dW)."""
    dw = noise if noise is not None else rng.standard_normal(problem.Q.shape[1])
    return (x + problem.drift_at(x, t) * dt
            + problem.G @ (u * dt + problem.Q @ dw * np.sqrt(dt)))


def simulate_closed_loop(problem: ControlProblem, x0: np.ndarray,
                         disc: PathDiscretization, n_samples: int = 0,
                         method: str = "random_map", fd_step: float = 1e-3,
                         rng: Optional[np.random.Generator] = None):
    """Re-plan at every grid time and apply the control over one step.

    Returns (states, controls) with states of shape (n+1, m).
    """
    x = np.asarray(x0, dtype=float).copy()
    n = disc.steps
    states = np.zeros((n + 1, problem.state_dim))
    controls = np.zeros((n, problem.control_dim))
    states[0] = x
    for k in range(n):
        t_k = disc.start_time + k * disc.dt
        u = optimal_control(problem, x, t_k, disc.advanced(k), n_samples,
                            method, fd_step, rng)
        x = step_dynamics(problem, x, t_k, u, disc.dt, rng=rng)
        states[k + 1] = x
        controls[k] = u
    return states, controls

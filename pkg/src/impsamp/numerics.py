"""Small dense linear algebra, Newton minimization and scalar root finding.

Everything here operates on plain numpy arrays of modest size (the largest
systems are discretized path objectives with a few hundred variables), so
the implementations favour robustness and exact error reporting over raw
speed.  All functions are pure; they are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class NotPositiveDefinite(Exception):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot_index: int):
        self.pivot_index = pivot_index
        super().__init__(f"matrix is not positive definite (pivot {pivot_index})")


class NoBracket(Exception):
    """Scalar root finding could not bracket a sign change."""


class NewtonNotConverged(Exception):
    """Newton minimization exhausted its iteration budget."""


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    def clamp(self, x: float) -> float:
        return min(max(x, self.lo), self.hi)


@dataclass
class MinimizeResult:
    minimizer: np.ndarray
    minimum: float
    hessian: np.ndarray
    iterations: int
    converged: bool


def finite_diff_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray,
                         h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient, O(h^2) accurate."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return g


def finite_diff_hessian(fn: Callable[[np.ndarray], float], x: np.ndarray,
                        h: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian from function values, symmetrized."""
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    f0 = fn(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        H[i, i] = (fn(x + ei) - 2.0 * f0 + fn(x - ei)) / h**2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h
            H[i, j] = (fn(x + ei + ej) - fn(x + ei - ej)
                       - fn(x - ei + ej) + fn(x - ei - ej)) / (4.0 * h**2)
            H[j, i] = H[i, j]
    return H


class Objective:
    """A scalar function of an m-vector with gradient and Hessian access.

    Analytic derivative callbacks are optional; central finite differences
    are used when they are absent.
    """

    def __init__(self, dim: int, fn: Callable[[np.ndarray], float],
                 grad: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 hess: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 fd_step: float = 1e-6):
        self.dim = dim
        self._fn = fn
        self._grad = grad
        self._hess = hess
        self.fd_step = fd_step

    @property
    def has_gradient(self) -> bool:
        return self._grad is not None

    def evaluate(self, x: np.ndarray) -> float:
        return float(self._fn(np.asarray(x, dtype=float)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._grad is not None:
            return np.asarray(self._grad(x), dtype=float)
        return finite_diff_gradient(self._fn, x, self.fd_step)

    def hessian(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._hess is not None:
            return np.asarray(self._hess(x), dtype=float)
        return finite_diff_hessian(self._fn, x, max(self.fd_step, 1e-5))


def cholesky(H: np.ndarray) -> np.ndarray:
    """Lower-triangular L with H = L L'.

    H must be symmetric to within 1e-10 relative infinity-norm.  Raises
    NotPositiveDefinite naming the failing pivot index otherwise.
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    scale = np.abs(H).max() if H.size else 0.0
    if scale > 0 and np.abs(H - H.T).max() > 1e-10 * max(scale, 1.0):
        raise ValueError("matrix is not symmetric within tolerance")
    L = np.zeros_like(H)
    for j in range(n):
        d = H[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0.0:
            raise NotPositiveDefinite(j)
        L[j, j] = np.sqrt(d)
        if j + 1 < n:
            L[j + 1:, j] = (H[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def log_det_cholesky(L: np.ndarray) -> float:
    return float(np.sum(np.log(np.diag(L))))


def _backtrack(objective, x, f0, g, p, c1=1e-4, max_halvings=40):
    """Armijo backtracking along p; returns (x_new, f_new, alpha) or None."""
    slope = float(g @ p)
    alpha = 1.0
    for _ in range(max_halvings):
        x_new = x + alpha * p
        f_new = objective.evaluate(x_new)
        if np.isfinite(f_new) and f_new <= f0 + c1 * alpha * slope:
            return x_new, f_new, alpha
        alpha *= 0.5
    return None


def newton_minimize(objective: Objective, x0: np.ndarray,
                    grad_tol: float = 1e-8, max_iter: int = 100,
                    step_tol: float = 0.0) -> MinimizeResult:
    """Newton's method with Armijo backtracking (factor 0.5, c = 1e-4).

    A singular or badly scaled Hessian falls back to a steepest-descent
    step for that iteration.  A full Newton step that fails the Armijo test
    but shrinks the gradient norm is still accepted, which lets the
    iteration settle on saddle points it is converging to (Newton solves
    grad F = 0, not specifically a minimum).  Running out of iterations
    returns converged=False; the caller decides what that means.

    With step_tol > 0, convergence is also declared once the Newton step
    stalls below step_tol * (1 + |x|).  Strongly curved objectives (e.g. a
    cost scaled by a tiny gamma) push the float floor of the gradient norm
    above any fixed absolute grad_tol; the stall criterion bounds the
    minimizer error by curvature instead.
    """
    x = np.asarray(x0, dtype=float).copy()
    f = objective.evaluate(x)
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        g = objective.gradient(x)
        gnorm = np.linalg.norm(g)
        if gnorm <= grad_tol:
            converged = True
            iterations -= 1
            break
        H = objective.hessian(x)
        p = None
        try:
            p = np.linalg.solve(H, -g)
            if not np.all(np.isfinite(p)):
                p = None
        except np.linalg.LinAlgError:
            p = None
        if (p is not None and step_tol > 0.0
                and np.linalg.norm(p) <= step_tol * (1.0 + np.linalg.norm(x))):
            converged = True
            iterations -= 1
            break
        moved = False
        if p is not None:
            if g @ p < 0:
                step = _backtrack(objective, x, f, g, p)
                if step is not None:
                    x, f, _ = step
                    moved = True
            if not moved:
                # Non-descent Newton direction: accept the full step if it
                # makes progress on the stationarity condition itself.
                x_try = x + p
                g_try = objective.gradient(x_try)
                if np.all(np.isfinite(g_try)) and np.linalg.norm(g_try) <= 0.9 * gnorm:
                    x = x_try
                    f = objective.evaluate(x)
                    moved = True
        if not moved:
            p_sd = -g / (1.0 + gnorm)
            step = _backtrack(objective, x, f, g, p_sd, max_halvings=60)
            if step is None:
                break
            x, f, _ = step
    else:
        g = objective.gradient(x)
        converged = bool(np.linalg.norm(g) <= grad_tol)
        iterations = max_iter
    return MinimizeResult(minimizer=x, minimum=f, hessian=objective.hessian(x),
                          iterations=iterations, converged=converged)


def constrained_quadratic_minimize(objective: Objective, constrained_index: int,
                                   window: Interval) -> MinimizeResult:
    """Minimize an exactly quadratic objective with one coordinate boxed.

    If the unconstrained minimizer already satisfies the window it is
    returned unchanged.  Otherwise the coordinate is clamped to the nearer
    endpoint and the remaining coordinates are re-minimized, which is exact
    for quadratics.  The returned Hessian is the full unconstrained one.
    """
    x0 = np.zeros(objective.dim)
    free = newton_minimize(objective, x0, grad_tol=1e-10, max_iter=50)
    mu, H = free.minimizer, free.hessian
    i = constrained_index
    if window.contains(mu[i]):
        return free
    c = window.lo if abs(mu[i] - window.lo) <= abs(mu[i] - window.hi) else window.hi
    rest = np.arange(objective.dim) != i
    # Minimize phi + (y-mu)'H(y-mu)/2 over the free block with y_i fixed.
    H_rr = H[np.ix_(rest, rest)]
    H_ri = H[rest, i]
    y = mu.copy()
    y[i] = c
    y[rest] = mu[rest] - np.linalg.solve(H_rr, H_ri) * (c - mu[i])
    return MinimizeResult(minimizer=y, minimum=objective.evaluate(y), hessian=H,
                          iterations=free.iterations, converged=free.converged)


def solve_scalar(g: Callable[[float], float], target: float, bracket: Interval,
                 tol: float = 1e-12, max_iter: int = 200) -> float:
    """Solve g(root) = target by safeguarded bisection with secant steps.

    The initial bracket is expanded geometrically (up to 60 doublings of
    its width, both directions) until the residual changes sign; failure
    raises NoBracket.
    """
    lo, hi = float(bracket.lo), float(bracket.hi)
    f_lo = g(lo) - target
    f_hi = g(hi) - target
    width = hi - lo
    expansions = 0
    while f_lo * f_hi > 0:
        if expansions >= 60:
            raise NoBracket(f"no sign change in [{lo}, {hi}] for target {target}")
        width *= 2.0
        if abs(f_lo) <= abs(f_hi):
            lo -= width
            f_lo = g(lo) - target
        else:
            hi += width
            f_hi = g(hi) - target
        expansions += 1
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    x = lo
    for _ in range(max_iter):
        # Secant proposal, safeguarded to the current bracket.
        denom = f_hi - f_lo
        if denom != 0.0:
            x = hi - f_hi * (hi - lo) / denom
        if not (lo < x < hi):
            x = 0.5 * (lo + hi)
        f_x = g(x) - target
        if abs(f_x) < tol or (hi - lo) < 4.0 * np.finfo(float).eps * (1.0 + abs(x)):
            return x
        if f_lo * f_x < 0:
            hi, f_hi = x, f_x
        else:
            lo, f_lo = x, f_x
    return x

"""Non-convex optimization as a stochastic control problem.

The final cost of the control problem is the function to minimize; the
running control cost is cheap, and the diffusion explores valleys the
deterministic Newton iteration cannot leave.  Applied to the Himmelblau
benchmark function, which Newton (from the standard start) parks on a
stationary point at 178.34 while the controlled diffusion reaches one of
the global minima.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from impsamp.path_control import (
    ControlProblem,
    PathDiscretization,
    simulate_closed_loop,
)


def himmelblau(x1: float, x2: float) -> float:
    return (x1 ** 2 + x2 - 11.0) ** 2 + (x1 + x2 ** 2 - 7.0) ** 2


def himmelblau_grad(x: np.ndarray) -> np.ndarray:
    a = x[0] ** 2 + x[1] - 11.0
    b = x[0] + x[1] ** 2 - 7.0
    return np.array([4.0 * x[0] * a + 2.0 * b,
                     2.0 * a + 4.0 * x[1] * b])


def himmelblau_hess(x: np.ndarray) -> np.ndarray:
    a = x[0] ** 2 + x[1] - 11.0
    b = x[0] + x[1] ** 2 - 7.0
    return np.array([
        [12.0 * x[0] ** 2 + 4.0 * x[1] - 42.0, 4.0 * (x[0] + x[1])],
        [4.0 * (x[0] + x[1]), 12.0 * x[1] ** 2 + 4.0 * x[0] - 26.0],
    ])


@dataclass(frozen=True)
class StochOptSpec:
    R: float = 0.01
    sigma: float = 0.01      # noise variance rate in dx = u dt + sqrt(sigma) dW
    dt: float = 1.0
    t_f: float = 20.0
    x0: tuple = (-1.0, -4.0)
    n_samples: int = 50
    method: str = "quadratic_map"
    objective: Optional[callable] = None       # f(x1, x2); Himmelblau if None
    objective_grad: Optional[callable] = None
    objective_hess: Optional[callable] = None

    @property
    def gamma(self) -> float:
        # gamma G R^-1 G' = G Q Q' G' with G = I, Q = sqrt(sigma) I forces
        # gamma = R sigma.
        return self.R * self.sigma

    def f(self, x1: float, x2: float) -> float:
        return (self.objective or himmelblau)(x1, x2)


def make_problem(spec: StochOptSpec) -> ControlProblem:
    return ControlProblem(
        state_dim=2, control_dim=2,
        G=np.eye(2), Q=np.sqrt(spec.sigma) * np.eye(2),
        R=spec.R * np.eye(2),
        gamma=spec.gamma,
        final_cost=lambda x: spec.f(x[0], x[1]),
        final_grad=spec.objective_grad or himmelblau_grad,
        final_hess=spec.objective_hess or himmelblau_hess,
        final_quadratic=False)


@dataclass
class StochOptResult:
    iterates: np.ndarray       # (n+1, 2) visited points
    f_values: np.ndarray       # objective at each iterate
    controls: np.ndarray       # (n, 2)
    realized_cost: float       # f at the end plus the accumulated control cost


def stochastic_optimize(spec: StochOptSpec,
                        rng: Optional[np.random.Generator] = None) -> StochOptResult:
    if rng is None:
        rng = np.random.default_rng()
    problem = make_problem(spec)
    disc = PathDiscretization.from_horizon(0.0, spec.t_f, spec.dt)
    states, controls = simulate_closed_loop(
        problem, np.asarray(spec.x0, dtype=float), disc,
        n_samples=spec.n_samples, method=spec.method, rng=rng)
    f_values = np.array([spec.f(x[0], x[1]) for x in states])
    control_cost = spec.dt * spec.R * float(np.sum(controls ** 2))
    return StochOptResult(iterates=states, f_values=f_values, controls=controls,
                          realized_cost=f_values[-1] + control_cost)

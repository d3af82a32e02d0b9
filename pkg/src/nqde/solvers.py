"""Fixed-step RK4 and adaptive Dormand-Prince 5(4) integrators over tape tensors.

Both solvers take ``rhs(t, z) -> Tensor`` and build every stage with
:func:`~nqde.autodiff.lincomb`, so a solve run under a tape is fully
differentiable (discretise-then-optimise). Step-size control only reads
``.data`` and is not differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, lincomb

__all__ = [
    "SolverConfig",
    "NFECounter",
    "Solution",
    "SolverDivergence",
    "StiffnessError",
    "rk4_solve",
    "dopri5_solve",
    "solve",
]

Rhs = Callable[[float, Tensor], Tensor]


class SolverDivergence(ArithmeticError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class StiffnessError(ArithmeticError):
    pass


@dataclass
class SolverConfig:
    method: str = "dopri5"
    step: float = 0.05
    rtol: float = 1e-4
    atol: float = 1e-6
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0
    min_step: float = 1e-10
    max_steps: int = 20000
    # stop dopri5 steps at spline knots, where the control derivative loses smoothness
    knot_stops: bool = False

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown solver {self.method!r}")
        if self.method == "rk4" and not self.step > 0:
            raise ValueError("rk4 step must be positive")
        if self.method == "dopri5":
            if not (self.rtol > 0 and self.atol > 0):
                raise ValueError("rtol and atol must be positive")
            if not (0 < self.min_factor < 1 < self.max_factor):
                raise ValueError("need 0 < min_factor < 1 < max_factor")


@dataclass
class NFECounter:
    forward: int = 0
    backward: int = 0

    def reset(self) -> None:
        self.forward = 0
        self.backward = 0


@dataclass
class Solution:
    state: Tensor
    accepted: int = 0
    rejected: int = 0
    times: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)


def _check_finite(z: Tensor, step: int) -> None:
    if not np.all(np.isfinite(z.data)):
        raise SolverDivergence(f"non-finite state after step {step}", step)


def rk4_solve(rhs: Rhs, z0: Tensor, t0: float, t1: float, config: SolverConfig,
              trajectory: bool = False) -> Solution:
    span = t1 - t0
    n = max(1, int(math.ceil(span / config.step - 1e-9)))
    h = span / n
    z = z0
    sol = Solution(z0)
    if trajectory:
        sol.times.append(t0)
        sol.states.append(z0.data.copy())
    for i in range(n):
        t = t0 + i * h
        k1 = rhs(t, z)
        k2 = rhs(t + h / 2, lincomb(z, [(h / 2, k1)]))
        k3 = rhs(t + h / 2, lincomb(z, [(h / 2, k2)]))
        k4 = rhs(t + h, lincomb(z, [(h, k3)]))
        z = lincomb(z, [(h / 6, k1), (h / 3, k2), (h / 3, k3), (h / 6, k4)])
        _check_finite(z, i)
        sol.accepted += 1
        if trajectory:
            sol.times.append(t + h)
            sol.states.append(z.data.copy())
    sol.state = z
    return sol


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = _A[6] + (0.0,)
# fifth-order weights minus the embedded fourth-order ones
_E = (
    35 / 384 - 5179 / 57600,
    0.0,
    500 / 1113 - 7571 / 16695,
    125 / 192 - 393 / 640,
    -2187 / 6784 + 92097 / 339200,
    11 / 84 - 187 / 2100,
    -1 / 40,
)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def _initial_step(rhs: Rhs, t0: float, z0: Tensor, f0: Tensor, span: float,
                  config: SolverConfig) -> float:
    sc = config.atol + config.rtol * np.abs(z0.data)
    d0 = _rms(z0.data / sc)
    d1 = _rms(f0.data / sc)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = rhs(t0 + h0, lincomb(z0, [(h0, f0)]))
    d2 = _rms((f1.data - f0.data) / sc) / h0
    if max(d1, d2) <= 1e-15:
        # constant solution: nothing to resolve
        return span
    h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def dopri5_solve(rhs: Rhs, z0: Tensor, t0: float, t1: float, config: SolverConfig,
                 trajectory: bool = False, breakpoints: Optional[Sequence[float]] = None) -> Solution:
    """Adaptive Dormand-Prince with FSAL and PI step-size control.

    The error norm is the RMS over every component of ``err / (atol + rtol *
    max(|z|, |z_new|))``; for batched states the whole batch shares steps.
    Steps never straddle a time in ``breakpoints`` (e.g. spline knots, where
    the right-hand side loses smoothness).
    """
    span = t1 - t0
    sol = Solution(z0)
    if trajectory:
        sol.times.append(t0)
        sol.states.append(z0.data.copy())
    t, z = t0, z0
    k1 = rhs(t, z)
    h = _initial_step(rhs, t, z, k1, span, config)
    beta = 0.04
    alpha = 0.2 - 0.75 * beta
    prev_err = 1e-4
    last_rejected = False
    stops = sorted(float(b) for b in (() if breakpoints is None else breakpoints) if t0 < b < t1) + [t1]
    nxt = 0
    while t1 - t > 1e-12 * max(1.0, abs(t1)):
        while stops[nxt] - t <= 1e-12 * max(1.0, abs(t1)):
            nxt += 1
        if sol.accepted + sol.rejected >= config.max_steps:
            raise SolverDivergence(f"exceeded {config.max_steps} steps at t={t}", sol.accepted)
        if h < config.min_step * max(1.0, span):
            raise StiffnessError(f"step size {h:.3e} underflowed at t={t:.6g}")
        target = stops[nxt]
        hit = h >= target - t
        if hit:
            h_try = h
            h = target - t
        ks = [k1]
        for i in range(1, 7):
            zi = lincomb(z, [(h * a, k) for a, k in zip(_A[i], ks) if a != 0.0])
            ks.append(rhs(t + _C[i] * h, zi))
        # stage 6 input is the fifth-order solution (FSAL)
        z_new = zi
        err_vec = h * sum(e * k.data for e, k in zip(_E, ks) if e != 0.0)
        sc = config.atol + config.rtol * np.maximum(np.abs(z.data), np.abs(z_new.data))
        err = _rms(err_vec / sc)
        if not np.isfinite(err):
            sol.rejected += 1
            last_rejected = True
            h *= config.min_factor
            continue
        if err <= 1.0:
            t = target if hit else t + h
            z = z_new
            k1 = ks[6]
            sol.accepted += 1
            if trajectory:
                sol.times.append(t)
                sol.states.append(z.data.copy())
            if err == 0.0:
                factor = config.max_factor
            else:
                factor = config.safety * err ** (-alpha) * prev_err ** beta
            factor = min(config.max_factor, max(config.min_factor, factor))
            if last_rejected:
                factor = min(1.0, factor)
            # a step shortened to land on a stop does not shrink the next proposal
            h = max(h * factor, h_try) if hit else h * factor
            prev_err = max(err, 1e-4)
            last_rejected = False
        else:
            sol.rejected += 1
            last_rejected = True
            factor = max(config.min_factor, config.safety * err ** (-alpha))
            h *= factor
    sol.state = z
    return sol


def solve(rhs: Rhs, z0: Tensor, t0: float, t1: float, config: SolverConfig,
          trajectory: bool = False, breakpoints: Optional[Sequence[float]] = None) -> Solution:
    if config.method == "rk4":
        return rk4_solve(rhs, z0, t0, t1, config, trajectory)
    return dopri5_solve(rhs, z0, t0, t1, config, trajectory, breakpoints)

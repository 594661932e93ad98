"""Planar rigid-body model of the variable-pitch MAV.

State is ``[px, py, vx, vy, theta, q]`` with theta kept unwrapped. Integration
is semi-implicit Euler: velocities first, then positions from the new
velocities; angular rate first, then angle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend


class DivergenceError(FloatingPointError):
    """Raised when a state stops being finite."""


def wrap_angle(theta):
    """Wrap to (-pi, pi]. Works on scalars and arrays."""
    w = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def rotation(theta):
    """Body-to-world rotation matrix R(theta)."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class RigidState:
    p: tuple[float, float]
    v: tuple[float, float]
    theta: float
    q: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise DivergenceError(f"non-finite state {self}")

    @property
    def theta_wrapped(self):
        return wrap_angle(self.theta)

    def as_array(self):
        return np.array([self.p[0], self.p[1], self.v[0], self.v[1], self.theta, self.q], dtype=float)

    @classmethod
    def from_array(cls, x):
        x = [float(t) for t in x]
        return cls(p=(x[0], x[1]), v=(x[2], x[3]), theta=x[4], q=x[5])


@dataclass(frozen=True)
class BodyParams:
    mass: float = 0.5
    half_length: float = 0.2
    inertia: float = 0.5 * 0.4**2 / 12.0
    g: float = 9.81
    drag_coeff: float = 0.02
    thrust_to_weight: float = 2.0
    torque_sign: float = 1.0

    def __post_init__(self):
        for name in ("mass", "half_length", "inertia", "g", "thrust_to_weight"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.drag_coeff < 0:
            raise ValueError("drag_coeff must be non-negative")
        if self.torque_sign not in (1.0, -1.0):
            raise ValueError("torque_sign must be +1 or -1")

    @property
    def actuator_limit(self):
        """Per-actuator thrust magnitude limit implied by the thrust-to-weight ratio."""
        return self.thrust_to_weight * self.mass * self.g / 2.0

    @property
    def hover_thrust(self):
        return self.mass * self.g


@dataclass(frozen=True)
class WrenchCommand:
    f: float
    tau: float


@dataclass
class ActuatorLag:
    """First-order lag 1/(Ts + 1) on one actuator's thrust."""

    time_constant: float = 0.05
    thrust: float = 0.0

    def __post_init__(self):
        if not self.time_constant > 0:
            raise ValueError("time_constant must be positive")

    def alpha(self, dt):
        return -math.expm1(-dt / self.time_constant)


def forces_merge(f1, f2, l):
    if not l > 0:
        raise ValueError("half length must be positive")
    return WrenchCommand(f=f1 + f2, tau=(f1 - f2) * l)


def lag_step(lag: ActuatorLag, command, dt):
    """Exact zero-order-hold discretisation of the lag; updates ``lag`` and returns the new thrust."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    lag.thrust = lag.thrust + lag.alpha(dt) * (command - lag.thrust)
    return lag.thrust


def _check_dt(dt):
    if not 0.0 < dt <= 0.01:
        raise ValueError(f"dt must lie in (0, 0.01], got {dt}")


def step(state: RigidState, wrench: WrenchCommand, params: BodyParams, dt, kernels=None):
    """One semi-implicit Euler step of the planar model with quadratic drag."""
    _check_dt(dt)
    X = state.as_array()[None, :].copy()
    if not np.all(np.isfinite(X)):
        raise DivergenceError("non-finite state")
    one = np.ones(1)
    k = kernels or backend.get()
    k.physics_step(X, np.array([wrench.f], float), np.array([wrench.tau], float),
                   one * params.mass, one * params.inertia, one * params.drag_coeff,
                   params.g, params.torque_sign, dt, 1)
    return RigidState.from_array(X[0])


def step_batch(states, f, tau, params: BodyParams, dt, nthreads=None, kernels=None):
    """Vectorised ``step`` over an (N, 6) state array; returns a new array.

    ``params`` may be a single BodyParams or a mapping of per-env arrays with
    keys ``mass``, ``inertia``, ``drag_coeff``.
    """
    _check_dt(dt)
    X = np.array(states, dtype=float, order="C", copy=True)
    if X.ndim != 2 or X.shape[1] != 6:
        raise ValueError(f"states must be (N, 6), got {X.shape}")
    n = X.shape[0]
    f = np.ascontiguousarray(f, dtype=float)
    tau = np.ascontiguousarray(tau, dtype=float)
    if f.shape != (n,) or tau.shape != (n,):
        raise ValueError(f"batch length mismatch: states {n}, f {f.shape}, tau {tau.shape}")
    if not np.all(np.isfinite(X)):
        raise DivergenceError("non-finite state in batch")
    if isinstance(params, BodyParams):
        mass = np.full(n, params.mass)
        inertia = np.full(n, params.inertia)
        kd = np.full(n, params.drag_coeff)
        g, sign = params.g, params.torque_sign
    else:
        mass = np.ascontiguousarray(params["mass"], float)
        inertia = np.ascontiguousarray(params["inertia"], float)
        kd = np.ascontiguousarray(params["drag_coeff"], float)
        g, sign = params.get("g", 9.81), params.get("torque_sign", 1.0)
    k = kernels or backend.get()
    k.physics_step(X, f, tau, mass, inertia, kd, g, sign, dt,
                   nthreads if nthreads is not None else backend.num_threads())
    return X


def mechanical_energy(X, params: BodyParams):
    """Kinetic plus potential energy for each row of an (N, 6) state array."""
    X = np.atleast_2d(X)
    ke = 0.5 * params.mass * (X[:, 2] ** 2 + X[:, 3] ** 2) + 0.5 * params.inertia * X[:, 5] ** 2
    return ke + params.mass * params.g * X[:, 1]

"""The cascade below the policy and the onboard state estimator.

Action de-normalisation, the angular-rate PD loop, control allocation with
torque priority, and a Kalman filter that fuses 1 kHz IMU samples with
100 Hz pose fixes. The filter functions accept a leading batch dimension.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import WrenchCommand, wrap_angle

log = logging.getLogger(__name__)

STATE_DIM = 6
POSE_IDX = (0, 1, 4)


@dataclass(frozen=True)
class ActionMapping:
    f_max: float = 10.0
    q_max: float = 12.0

    def __post_init__(self):
        if not (self.f_max > 0 and self.q_max > 0):
            raise ValueError("action limits must be positive")


@dataclass(frozen=True)
class RatePdGains:
    kp: float = 0.08
    kd: float = 0.002
    tau_limit: float = 1.0

    def __post_init__(self):
        if not self.kp > 0 or self.kd < 0 or not self.tau_limit > 0:
            raise ValueError("need kp > 0, kd >= 0, tau_limit > 0")


def denormalize_action(a, mapping: ActionMapping = ActionMapping()):
    """Map a normalised action in [-1, 1]^2 to (thrust N, rate rad/s); out-of-range input is clamped."""
    a = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)
    return a[..., 0] * mapping.f_max, a[..., 1] * mapping.q_max


def rate_pd(q_des, q_meas, q_dot_est, gains: RatePdGains = RatePdGains()):
    """Torque command; derivative acts on the measured rate to avoid setpoint kick."""
    tau = gains.kp * (np.asarray(q_des) - q_meas) - gains.kd * np.asarray(q_dot_est)
    return np.clip(tau, -gains.tau_limit, gains.tau_limit)


def allocate(wrench: WrenchCommand, l, per_actuator_limit):
    """Split (f, tau) into actuator thrusts.

    Saturation sheds collective thrust first so the differential
    ``f1 - f2 = tau / l`` survives whenever ``|tau / l| <= 2 * limit``.
    """
    if not l > 0:
        raise ValueError("half length must be positive")
    lim = per_actuator_limit
    d = np.clip(wrench.tau / l, -2.0 * lim, 2.0 * lim)
    head = 2.0 * lim - np.abs(d)
    f = np.clip(wrench.f, -head, head)
    return (f + d) / 2.0, (f - d) / 2.0


# ---------------------------------------------------------------- estimation

@dataclass(frozen=True)
class SensorNoise:
    """Standard deviations of the simulated sensors."""

    accel: float = 0.05
    gyro: float = 0.01
    position: float = 0.005
    angle: float = 0.005

    @property
    def pose_cov(self):
        return np.diag([self.position**2, self.position**2, self.angle**2])


@dataclass
class FusedEstimate:
    mean: np.ndarray
    cov: np.ndarray
    repairs: int = field(default=0)

    @classmethod
    def initial(cls, x0, sigma_p=0.01, sigma_v=0.05, sigma_th=0.01, sigma_q=0.05):
        x0 = np.asarray(x0, dtype=float)
        P = np.diag([sigma_p**2, sigma_p**2, sigma_v**2, sigma_v**2, sigma_th**2, sigma_q**2])
        P = np.broadcast_to(P, x0.shape[:-1] + (6, 6)).copy()
        return cls(x0.copy(), P)


def _ensure_pd(P, est: FusedEstimate, floor=1e-12):
    P = 0.5 * (P + np.swapaxes(P, -1, -2))
    w = np.linalg.eigvalsh(P)
    if np.any(w <= 0):
        log.warning("covariance lost positive definiteness; flooring eigenvalues at %g", floor)
        w, V = np.linalg.eigh(P)
        P = (V * np.maximum(w, floor)[..., None, :]) @ np.swapaxes(V, -1, -2)
        est.repairs += 1
    return P


def kalman_predict(est: FusedEstimate, accel, gyro, dt, noise: SensorNoise = SensorNoise(), g=9.81,
                   check=True):
    """Propagate with one IMU sample (body specific force, body rate).

    Mirrors the simulator's semi-implicit Euler: velocity from the rotated,
    gravity-compensated specific force, position from the new velocity, the
    rate replaced by the gyro reading and the angle advanced by it.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = est.mean
    accel = np.asarray(accel, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    th = x[..., 4]
    c, s = np.cos(th), np.sin(th)
    ax, ay = accel[..., 0], accel[..., 1]
    aw = np.stack([c * ax - s * ay, s * ax + c * ay - g], axis=-1)
    da = np.stack([-s * ax - c * ay, c * ax - s * ay], axis=-1)  # dR/dtheta applied to accel

    xn = np.empty_like(x)
    xn[..., 2:4] = x[..., 2:4] + dt * aw
    xn[..., 0:2] = x[..., 0:2] + dt * xn[..., 2:4]
    xn[..., 5] = gyro
    xn[..., 4] = th + dt * gyro

    batch = x.shape[:-1]
    F = np.broadcast_to(np.eye(6), batch + (6, 6)).copy()
    F[..., 2:4, 4] = dt * da
    F[..., 0:2, 2:4] = dt * np.eye(2)
    F[..., 0:2, 4] = dt * dt * da
    F[..., 5, 5] = 0.0
    G = np.zeros(batch + (6, 3))
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    G[..., 2:4, 0:2] = dt * R
    G[..., 0:2, 0:2] = dt * dt * R
    G[..., 5, 2] = 1.0
    G[..., 4, 2] = dt
    W = np.diag([noise.accel**2, noise.accel**2, noise.gyro**2])
    P = F @ est.cov @ np.swapaxes(F, -1, -2) + G @ W @ np.swapaxes(G, -1, -2)
    out = FusedEstimate(xn, P, est.repairs)
    out.cov = _ensure_pd(P, out) if check else 0.5 * (P + np.swapaxes(P, -1, -2))
    return out


def kalman_update(est: FusedEstimate, position, angle, R_meas=None, noise: SensorNoise = SensorNoise()):
    """Pose fix update with the angle innovation wrapped to (-pi, pi]."""
    R_meas = noise.pose_cov if R_meas is None else np.asarray(R_meas, dtype=float)
    if not np.allclose(R_meas, R_meas.T) or np.any(np.linalg.eigvalsh(R_meas) <= 0):
        raise ValueError("measurement covariance must be symmetric positive definite")
    x, P = est.mean, est.cov
    H = np.zeros((3, 6))
    H[0, 0] = H[1, 1] = H[2, 4] = 1.0
    y = np.concatenate([np.asarray(position, float) - x[..., 0:2],
                        np.asarray(wrap_angle(np.asarray(angle, float) - x[..., 4]))[..., None]], axis=-1)
    PHt = P @ H.T
    S = H @ PHt + R_meas
    K = np.swapaxes(np.linalg.solve(S, np.swapaxes(PHt, -1, -2)), -1, -2)
    xn = x + (K @ y[..., None])[..., 0]
    IKH = np.eye(6) - K @ H
    Pn = IKH @ P @ np.swapaxes(IKH, -1, -2) + K @ R_meas @ np.swapaxes(K, -1, -2)
    out = FusedEstimate(xn, Pn, est.repairs)
    out.cov = _ensure_pd(Pn, out)
    return out


def estimation_error(x_true, est: FusedEstimate):
    e = np.asarray(x_true, float) - est.mean
    e[..., 4] = wrap_angle(e[..., 4])
    return e


def nees(x_true, est: FusedEstimate):
    e = estimation_error(x_true, est)
    return np.einsum("...i,...i->...", e, np.linalg.solve(est.cov, e[..., None])[..., 0])


def simulate_imu(x_prev, x_next, dt, noise: SensorNoise, rng, g=9.81):
    """IMU sample for a physics tick from ``x_prev`` to ``x_next``.

    The specific force is recovered from the velocity increment and rotated
    into the body frame at the pre-step attitude; the gyro reads the
    post-step rate.
    """
    x_prev = np.asarray(x_prev, float)
    x_next = np.asarray(x_next, float)
    aw = (x_next[..., 2:4] - x_prev[..., 2:4]) / dt
    aw[..., 1] += g
    th = x_prev[..., 4]
    c, s = np.cos(th), np.sin(th)
    accel = np.stack([c * aw[..., 0] + s * aw[..., 1], -s * aw[..., 0] + c * aw[..., 1]], axis=-1)
    accel = accel + noise.accel * rng.standard_normal(accel.shape)
    gyro = x_next[..., 5] + noise.gyro * rng.standard_normal(np.shape(x_next[..., 5]))
    return accel, gyro


def simulate_pose(x, noise: SensorNoise, rng):
    x = np.asarray(x, float)
    pos = x[..., 0:2] + noise.position * rng.standard_normal(x[..., 0:2].shape)
    ang = wrap_angle(x[..., 4] + noise.angle * rng.standard_normal(np.shape(x[..., 4])))
    return pos, ang

"""Variable-pitch actuator: propeller and motor models, the adaptive pitch/RPM
controller, the current-based pitch estimator and least-squares fitting of
all of their coefficients from bench data.

Internal units are SI with angular speed in rad/s; RPM only appears at the
bench-CSV boundary and in :class:`RpmPolicy`.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

RPM_TO_RADS = 2.0 * math.pi / 60.0

BENCH_COLUMNS = ("omega_rpm", "alpha_rad", "thrust_n", "current_a")
DRAG_COLUMNS = ("thrust_n", "accel_mps2", "velocity_mps")
DISTURBANCE_COLUMNS = ("alpha_rad", "omega_rpm")


class FitError(ValueError):
    """Bench data cannot determine the requested coefficients."""


def rpm_to_rads(rpm):
    return rpm * RPM_TO_RADS


def rads_to_rpm(omega):
    return omega / RPM_TO_RADS


@dataclass(frozen=True)
class PropellerModel:
    k_T: float = 0.02
    k_D1: float = 1.0e-6
    k_D2: float = 2.0e-6
    k_D3: float = 2.0e-4
    pitch_limits: tuple[float, float] = (-0.6, 0.6)
    prop_inertia: float = 5.0e-5

    def __post_init__(self):
        lo, hi = self.pitch_limits
        if not self.k_T > 0:
            raise ValueError("k_T must be positive")
        if self.k_D1 < 0 or self.k_D2 < 0:
            raise ValueError("k_D1 and k_D2 must be non-negative")
        if not lo < 0 < hi:
            raise ValueError("pitch limits must bracket zero")
        if not self.prop_inertia > 0:
            raise ValueError("prop_inertia must be positive")


@dataclass(frozen=True)
class MotorModel:
    kV: float = 50.0
    kQ: float = 50.0
    R_m: float = 0.08
    i0: float = 0.5
    V_max: float = 16.8

    def __post_init__(self):
        for name in ("kV", "kQ", "R_m", "i0", "V_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ThrustEstimatorCoeffs:
    g0: float
    g1: float
    g2: float

    @classmethod
    def from_models(cls, prop: PropellerModel, motor: MotorModel, omega):
        """Closed-form coefficients of the constant-speed pitch estimator at ``omega``."""
        g2 = prop.k_D3 / (2.0 * prop.k_D2 * omega)
        g0 = 1.0 / (motor.kQ * prop.k_D2 * omega**2)
        g1 = g2**2 - prop.k_D1 / prop.k_D2
        return cls(g0, g1, g2)


@dataclass(frozen=True)
class RpmPolicy:
    target_rpm: float = 4500.0
    min_rpm: float = 4000.0
    vibration_rpm: float = 5000.0

    def __post_init__(self):
        if not self.min_rpm < self.target_rpm < self.vibration_rpm:
            raise ValueError("need min_rpm < target_rpm < vibration_rpm")

    @property
    def target_omega(self):
        return rpm_to_rads(self.target_rpm)


def _check_pitch(alpha, prop: PropellerModel):
    lo, hi = prop.pitch_limits
    a = np.asarray(alpha)
    if np.any(a < lo) or np.any(a > hi):
        raise ValueError(f"pitch {alpha} outside limits {prop.pitch_limits}")


def propeller_thrust(omega, alpha, prop: PropellerModel):
    _check_pitch(alpha, prop)
    return prop.k_T * omega * alpha


def propeller_drag(omega, alpha, prop: PropellerModel):
    _check_pitch(alpha, prop)
    return _drag(omega, alpha, prop)


def _drag(omega, alpha, prop):
    w2 = omega * omega
    return prop.k_D1 * w2 + prop.k_D2 * w2 * alpha * alpha + prop.k_D3 * omega * alpha


def motor_current(omega, V, motor: MotorModel):
    return (V - omega / motor.kV) / motor.R_m


def motor_step(omega, alpha, V, motor: MotorModel, prop: PropellerModel, dt):
    """Explicit Euler step of the motor-propeller speed equation.

    Returns ``(omega_next, current)``; speed is clamped at zero.
    """
    if V < 0 or V > motor.V_max:
        raise ValueError(f"voltage {V} outside [0, {motor.V_max}]")
    i = motor_current(omega, V, motor)
    omega_dot = ((i - motor.i0) / motor.kQ - _drag(omega, alpha, prop)) / prop.prop_inertia
    return max(omega + dt * omega_dot, 0.0), i


def steady_current(omega, alpha, motor: MotorModel, prop: PropellerModel):
    """Current that holds ``omega`` at pitch ``alpha`` with zero acceleration."""
    return motor.i0 + motor.kQ * _drag(omega, alpha, prop)


def steady_voltage(omega, alpha, motor: MotorModel, prop: PropellerModel):
    return omega / motor.kV + steady_current(omega, alpha, motor, prop) * motor.R_m


def estimate_pitch_from_current(i, coeffs: ThrustEstimatorCoeffs, i0):
    lin = coeffs.g0 * (np.asarray(i, dtype=float) - i0)
    radicand = lin + coeffs.g1
    # the two terms cancel exactly at alpha = -g2; allow the rounding residue there
    slack = 1e-12 * (np.abs(lin) + abs(coeffs.g1))
    if np.any(radicand < -slack):
        raise ValueError("operating point outside the fitted envelope (negative radicand)")
    out = np.sqrt(np.maximum(radicand, 0.0)) - coeffs.g2
    return float(out) if out.ndim == 0 else out


def pitch_from_current_full(i, omega, omega_dot, motor: MotorModel, prop: PropellerModel):
    """Pitch from the full speed equation including the acceleration term.

    Reference for the constant-speed estimator: with ``omega_dot = 0`` it
    reduces to :func:`estimate_pitch_from_current` with coefficients from
    :meth:`ThrustEstimatorCoeffs.from_models`.
    """
    half = prop.k_D3 / (2.0 * prop.k_D2 * omega)
    num = prop.prop_inertia * omega_dot - (i - motor.i0) / motor.kQ + prop.k_D1 * omega**2
    rad = num / (-prop.k_D2 * omega**2) + half**2
    scale = (abs(prop.prop_inertia * omega_dot) + abs((i - motor.i0) / motor.kQ)
             + prop.k_D1 * omega**2) / (prop.k_D2 * omega**2)
    if rad < -1e-12 * (scale + half**2):
        raise ValueError("current below the zero-pitch load (negative radicand)")
    return math.sqrt(max(rad, 0.0)) - half


def pitch_disturbance(omega_nominal, alpha, poly):
    """Motor speed after the pitch-dependent disturbance, ``omega * (1 + sum c_k alpha^k)``."""
    s = 0.0
    for c in reversed(list(poly)):
        s = s * alpha + c
    return omega_nominal * (1.0 + s)


@dataclass
class AdaptiveThrustController:
    """Pitch feedforward from the thrust map plus RPM hold by voltage feedforward and PI feedback."""

    prop: PropellerModel = field(default_factory=PropellerModel)
    motor: MotorModel = field(default_factory=MotorModel)
    policy: RpmPolicy = field(default_factory=RpmPolicy)
    estimator: ThrustEstimatorCoeffs | None = None
    kp: float = 0.05
    ki: float = 2.0
    integral: float = 0.0
    estimated_thrust: float = float("nan")

    def __post_init__(self):
        if self.estimator is None:
            self.estimator = ThrustEstimatorCoeffs.from_models(self.prop, self.motor, self.policy.target_omega)

    def reset(self):
        self.integral = 0.0

    def step(self, T_cmd, omega_meas, i_meas, dt):
        """Return ``(alpha_cmd, V_cmd)`` for one control tick."""
        w_t = self.policy.target_omega
        lo, hi = self.prop.pitch_limits
        alpha = min(max(T_cmd / (self.prop.k_T * w_t), lo), hi)
        v_ff = steady_voltage(w_t, alpha, self.motor, self.prop)
        err = w_t - omega_meas
        v_raw = v_ff + self.kp * err + self.ki * (self.integral + err * dt)
        v_cmd = min(max(v_raw, 0.0), self.motor.V_max)
        # conditional integration keeps the integrator from winding up at the rails
        if v_raw == v_cmd or (v_raw > v_cmd) != (err > 0):
            self.integral += err * dt
        radicand = self.estimator.g0 * (i_meas - self.motor.i0) + self.estimator.g1
        if radicand >= 0 and omega_meas > 0:
            self.estimated_thrust = self.prop.k_T * omega_meas * (math.sqrt(radicand) - self.estimator.g2)
        return alpha, v_cmd


def adaptive_thrust_control(T_cmd, omega_meas, i_meas, policy: RpmPolicy, prop: PropellerModel,
                            motor: MotorModel, controller: AdaptiveThrustController | None = None, dt=1e-3):
    """Functional entry point; pass a persistent ``controller`` to keep the PI state."""
    if controller is None:
        controller = AdaptiveThrustController(prop=prop, motor=motor, policy=policy)
    return controller.step(T_cmd, omega_meas, i_meas, dt)


@dataclass
class PolynomialThrottleMap:
    """Open-loop baseline: pitch from the thrust map, voltage from a polynomial in thrust."""

    coeffs: np.ndarray
    prop: PropellerModel
    omega_target: float
    V_max: float

    @classmethod
    def fit(cls, prop: PropellerModel, motor: MotorModel, omega_target, degree=3, n=41):
        lo, hi = prop.pitch_limits
        alphas = np.linspace(lo, hi, n)
        thrust = prop.k_T * omega_target * alphas
        volts = np.array([steady_voltage(omega_target, a, motor, prop) for a in alphas])
        return cls(np.polynomial.polynomial.polyfit(thrust, volts, degree), prop, omega_target, motor.V_max)

    def __call__(self, T_cmd):
        lo, hi = self.prop.pitch_limits
        alpha = min(max(T_cmd / (self.prop.k_T * self.omega_target), lo), hi)
        v = float(np.polynomial.polynomial.polyval(T_cmd, self.coeffs))
        return alpha, min(max(v, 0.0), self.V_max)


def simulate_actuator(T_profile, dt, prop: PropellerModel, motor: MotorModel, command, omega0,
                      substeps=10, servo_time_constant=0.0):
    """Run ``command(T_cmd, omega, i) -> (alpha, V)`` in closed loop on the motor model.

    ``T_profile`` holds one thrust command per control tick of length ``dt``;
    the motor is integrated with ``substeps`` Euler steps per tick and the
    blade pitch follows the command through a first-order servo lag when
    ``servo_time_constant > 0``. Returns arrays of speed, delivered thrust and
    current, one per tick.
    """
    omega = omega0
    i = 0.0
    h = dt / substeps
    servo = -math.expm1(-h / servo_time_constant) if servo_time_constant > 0 else 1.0
    pitch = None
    out_w, out_T, out_i = [], [], []
    for T_cmd in T_profile:
        alpha, V = command(T_cmd, omega, i)
        if pitch is None:
            pitch = alpha
        for _ in range(substeps):
            pitch += servo * (alpha - pitch)
            omega, i = motor_step(omega, pitch, V, motor, prop, h)
        out_w.append(omega)
        out_T.append(prop.k_T * omega * pitch)
        out_i.append(i)
    return np.array(out_w), np.array(out_T), np.array(out_i)


# ---------------------------------------------------------------- fitting

@dataclass(frozen=True)
class ThrustFit:
    k_T: float
    k_D1: float
    k_D2: float
    k_D3: float
    i0: float
    estimator: ThrustEstimatorCoeffs
    thrust_rms: float
    current_rms: float
    pitch_rms: float
    iterations: int


def _lstsq(A, y, what):
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise FitError(f"{what}: design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def _sorted_samples(samples, ncol):
    """Canonical row order so fits do not depend on how samples were listed."""
    S = np.asarray(samples, dtype=float)
    if S.ndim != 2 or S.shape[1] != ncol:
        raise FitError(f"expected rows of {ncol} values")
    return S[np.lexsort(S.T[::-1])]


def fit_estimator(current, alpha, i0, max_iter=50, tol=1e-12):
    """Gauss-Newton fit of the constant-speed estimator ``alpha = sqrt(g0 (i - i0) + g1) - g2``.

    Residuals are taken in current, where the bench noise lives, through the
    forward map ``i - i0 = ((alpha + g2)^2 - g1) / g0``; that map holds on both
    pitch signs, so negative-pitch rows help pin down ``g2``. Iterates until
    the relative step is below ``tol``; more than ``max_iter`` iterations
    raises :class:`FitError`.
    """
    ip = np.asarray(current, float) - i0
    a = np.asarray(alpha, float)
    # the forward map is a quadratic in alpha, which gives an exact seed on clean data
    c0, c1, c2 = np.polynomial.polynomial.polyfit(a, ip, 2)
    if not c2 > 0:
        raise FitError("current does not grow with pitch; cannot seed the estimator fit")
    x = np.array([1.0 / c2, (c1 / (2.0 * c2)) ** 2 - c0 / c2, c1 / (2.0 * c2)])

    def residual(x):
        return ((a + x[2]) ** 2 - x[1]) / x[0] - ip

    res = residual(x)
    cost = res @ res
    for it in range(1, max_iter + 1):
        pred = res + ip
        J = np.column_stack([-pred / x[0], -np.ones_like(a) / x[0], 2.0 * (a + x[2]) / x[0]])
        dx, *_ = np.linalg.lstsq(J, -res, rcond=None)
        step = 1.0
        while True:
            res_new = residual(x + step * dx)
            if res_new @ res_new <= cost or step < 1e-6:
                break
            step *= 0.5
        x = x + step * dx
        res, cost = res_new, res_new @ res_new
        if np.max(np.abs(step * dx) / np.maximum(np.abs(x), 1e-300)) < tol or cost == 0.0:
            return ThrustEstimatorCoeffs(*(float(t) for t in x)), it
    raise FitError(f"Gauss-Newton did not converge in {max_iter} iterations")


def fit_thrust_coeffs(samples, kQ, omega_target, omega_tol=0.01, max_iter=50):
    """Fit thrust, drag and estimator coefficients from bench rows ``(omega, alpha, T, i)``.

    ``omega`` in rad/s. Thrust and drag coefficients come from linear least
    squares over all rows (drag through the steady-state current balance with
    known ``kQ``); the estimator is fitted by Gauss-Newton on the rows within
    ``omega_tol`` of ``omega_target``.
    """
    S = _sorted_samples(samples, 4)
    if len(S) < 10:
        raise FitError(f"need at least 10 samples, got {len(S)}")
    w, a, T, i = S.T
    x = (w * a)[:, None]
    k_T = float(_lstsq(x, T, "thrust")[0])
    A = np.column_stack([np.ones_like(w), w**2, w**2 * a**2, w * a])
    i0, c1, c2, c3 = _lstsq(A, i, "drag")
    sel = np.abs(w - omega_target) <= omega_tol * omega_target
    if sel.sum() < 4 or np.ptp(a[sel]) == 0:
        raise FitError("not enough samples near the target speed to fit the estimator")
    est, iters = fit_estimator(i[sel], a[sel], i0, max_iter=max_iter)
    pos = sel & (a >= 0)
    pitch_hat = np.sqrt(np.maximum(est.g0 * (i[pos] - i0) + est.g1, 0)) - est.g2
    return ThrustFit(
        k_T=k_T, k_D1=c1 / kQ, k_D2=c2 / kQ, k_D3=c3 / kQ, i0=float(i0), estimator=est,
        thrust_rms=float(np.sqrt(np.mean((k_T * w * a - T) ** 2))),
        current_rms=float(np.sqrt(np.mean((A @ np.array([i0, c1, c2, c3]) - i) ** 2))),
        pitch_rms=float(np.sqrt(np.mean((pitch_hat - a[pos]) ** 2))) if pos.any() else float("nan"),
        iterations=iters,
    )


def fit_drag_coeff(thrust, accel, velocity, mass, g=9.81):
    """Quadratic drag coefficient from vertical-flight samples.

    Rows are (commanded thrust, measured vertical acceleration, vertical
    velocity) with the body upright, so ``thrust - m g - m a = k_d |v| v``.
    """
    S = _sorted_samples(np.column_stack([thrust, accel, velocity]), 3)
    if len(S) < 5:
        raise FitError(f"need at least 5 samples, got {len(S)}")
    f, acc, v = S.T
    basis = np.abs(v) * v
    if not np.any(basis != 0):
        raise FitError("all velocities are zero; drag is unobservable")
    resid = f - mass * g - mass * acc
    return float(basis @ resid / (basis @ basis))


def fit_pitch_disturbance(alpha, omega, omega_nominal, degree=2):
    """Polynomial ``c_0..c_degree`` of the fractional speed deviation against pitch."""
    S = _sorted_samples(np.column_stack([alpha, omega]), 2)
    if len(S) <= degree:
        raise FitError(f"need more than {degree} samples")
    a, w = S.T
    V = np.vander(a, degree + 1, increasing=True)
    return _lstsq(V, w / omega_nominal - 1.0, "disturbance")


def synthetic_bench(prop: PropellerModel, motor: MotorModel, rpms=(4000, 4250, 4500, 4750, 5000),
                    alphas=None, noise=0.0, rng=None):
    """Steady-state bench rows ``(omega rad/s, alpha, T, i)`` with optional relative noise on T and i."""
    if alphas is None:
        alphas = np.linspace(prop.pitch_limits[0], prop.pitch_limits[1], 25)
    rows = []
    for rpm in rpms:
        w = rpm_to_rads(rpm)
        for a in alphas:
            rows.append((w, a, prop.k_T * w * a, steady_current(w, a, motor, prop)))
    S = np.array(rows)
    if noise:
        rng = rng if rng is not None else np.random.default_rng()
        S[:, 2] *= 1.0 + noise * rng.standard_normal(len(S))
        S[:, 3] *= 1.0 + noise * rng.standard_normal(len(S))
    return S


# ---------------------------------------------------------------- CSV

def _read_csv(path, columns):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != columns:
            raise FitError(f"{path}: header must be {','.join(columns)}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise FitError(f"{path}:{lineno}: expected {len(columns)} fields")
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise FitError(f"{path}:{lineno}: {exc}") from None
    return np.array(rows, dtype=float).reshape(-1, len(columns))


def _write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(x)) for x in r])


def read_bench_csv(path):
    """Rows as ``(omega rad/s, alpha, T, i)``; the file stores RPM."""
    S = _read_csv(path, BENCH_COLUMNS)
    S[:, 0] = rpm_to_rads(S[:, 0])
    return S


def write_bench_csv(path, samples):
    S = np.array(samples, dtype=float)
    S[:, 0] = rads_to_rpm(S[:, 0])
    _write_csv(path, BENCH_COLUMNS, S)


def read_drag_csv(path):
    return _read_csv(path, DRAG_COLUMNS)


def write_drag_csv(path, rows):
    _write_csv(path, DRAG_COLUMNS, rows)


def read_disturbance_csv(path):
    S = _read_csv(path, DISTURBANCE_COLUMNS)
    S[:, 1] = rpm_to_rads(S[:, 1])
    return S


def write_disturbance_csv(path, rows):
    S = np.array(rows, dtype=float)
    S[:, 1] = rads_to_rpm(S[:, 1])
    _write_csv(path, DISTURBANCE_COLUMNS, S)

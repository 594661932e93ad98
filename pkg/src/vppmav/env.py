"""Batched RL environment for planar VPP maneuvers.

One :class:`VppEnv` steps N independent vehicles at the 100 Hz policy rate;
each policy step runs ``decimation`` physics ticks of rate PD, allocation,
actuator lag and rigid-body integration through the selected kernel
backend. Observation construction, the five-term reward, domain
randomisation and the difficulty curriculum live here too.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import backend
from ._kernels_py import N_PARAMS
from .control import (ActionMapping, FusedEstimate, RatePdGains, SensorNoise, denormalize_action,
                      kalman_predict, kalman_update, simulate_imu, simulate_pose)
from .dynamics import BodyParams, DivergenceError, wrap_angle

log = logging.getLogger(__name__)

# observation variants of the ablation: (sin/cos angle encoding, position integral)
SETUPS = {
    "VA": (False, False),
    "TA": (True, False),
    "PI": (False, True),
    "All": (True, True),
}

TASKS = ("hover", "flip_half", "flip_full", "wall_backtrack")


def obs_dim(setup):
    trig, integ = SETUPS[setup]
    return 4 + (2 if trig else 1) + 1 + (2 if integ else 0)


def obs_channels(setup):
    trig, integ = SETUPS[setup]
    names = ["dpx", "dpy", "vx", "vy"]
    names += ["sin_dth", "cos_dth"] if trig else ["dth"]
    names += ["q"]
    names += ["gpx", "gpy"] if integ else []
    return names


@dataclass(frozen=True)
class RewardWeights:
    w_p: float = 0.8
    w_o: float = 0.8
    w_v: float = 0.2
    w_omega: float = 0.2
    w_i: float = 0.2

    def __post_init__(self):
        if min(self.w_p, self.w_o, self.w_v, self.w_omega, self.w_i) < 0:
            raise ValueError("reward weights must be non-negative")

    @property
    def total(self):
        return self.w_p + self.w_o + self.w_v + self.w_omega + self.w_i


FLIP_WEIGHTS = RewardWeights(0.8, 0.8, 0.2, 0.2, 0.2)
WALL_WEIGHTS = RewardWeights(0.5, 1.0, 0.1, 0.1, 0.1)


@dataclass(frozen=True)
class TaskSpec:
    """A maneuver: fixed target position and a piecewise-linear unwrapped angle profile.

    ``angle_profile`` holds ``(time_s, theta)`` knots; two knots at the same
    time make a step. Success is judged only once the last knot is reached.
    """

    name: str
    target_position: tuple[float, float] = (1.2, 1.25)
    angle_profile: tuple[tuple[float, float], ...] = ((0.0, 0.0),)
    episode_length: int = 500
    weights: RewardWeights = FLIP_WEIGHTS
    crash_bounds: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 2.4), (0.05, 2.4))
    thrust_to_weight: float | None = None
    terminate_on_success: bool = True

    def __post_init__(self):
        if self.episode_length <= 0:
            raise ValueError("episode_length must be positive")
        (x0, x1), (y0, y1) = self.crash_bounds
        if not (x0 < x1 and y0 < y1):
            raise ValueError("crash bounds are degenerate")
        times = [t for t, _ in self.angle_profile]
        if not times or any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("angle profile times must be non-decreasing")

    @property
    def final_phase_start(self):
        return self.angle_profile[-1][0]

    @property
    def final_angle(self):
        return self.angle_profile[-1][1]

    def target_angle(self, t):
        """Unwrapped target angle at time(s) ``t``."""
        times = np.array([k[0] for k in self.angle_profile])
        vals = np.array([k[1] for k in self.angle_profile])
        t = np.asarray(t, dtype=float)
        i = np.searchsorted(times, t, side="right") - 1
        i = np.clip(i, 0, len(times) - 1)
        j = np.minimum(i + 1, len(times) - 1)
        span = times[j] - times[i]
        frac = np.where((j > i) & (span > 0), (t - times[i]) / np.where(span > 0, span, 1.0), 0.0)
        out = vals[i] + np.clip(frac, 0.0, 1.0) * (vals[j] - vals[i])
        return float(out) if out.ndim == 0 else out


def make_task(name, **overrides):
    if name == "hover":
        spec = TaskSpec("hover", terminate_on_success=False)
    elif name == "flip_half":
        spec = TaskSpec("flip_half", angle_profile=((0.0, 0.0), (1.5, 0.0), (1.5, math.pi)))
    elif name == "flip_full":
        spec = TaskSpec("flip_full", angle_profile=((0.0, 0.0), (1.0, 0.0), (1.7, 2.0 * math.pi)))
    elif name == "wall_backtrack":
        spec = TaskSpec("wall_backtrack",
                        angle_profile=((0.0, 0.0), (1.0, 0.0), (1.0, math.pi / 2), (1.4, math.pi / 2), (1.4, 0.0)),
                        weights=WALL_WEIGHTS, thrust_to_weight=2.5)
    else:
        raise ValueError(f"unknown task {name!r}; choose from {TASKS}")
    return replace(spec, **overrides) if overrides else spec


@dataclass(frozen=True)
class RandomizationSpec:
    """Amplitudes at difficulty 1; everything scales linearly with difficulty.

    ``jitter`` maps a parameter name to a relative half-range; ``obs_noise``
    gives per-channel standard deviations.
    """

    jitter: dict = field(default_factory=lambda: {
        "mass": 0.2, "inertia": 0.2, "thrust_gain": 0.1, "drag_coeff": 0.5, "lag_time_constant": 0.3,
    })
    obs_noise: dict = field(default_factory=lambda: {
        "position": 0.005, "velocity": 0.03, "angle": 0.02, "rate": 0.1, "integral": 0.02,
    })
    init_position: float = 0.3
    init_angle: float = 0.3
    init_velocity: float = 0.5
    init_rate: float = 0.5

    def __post_init__(self):
        if any(s < 0 for s in self.obs_noise.values()) or any(j < 0 for j in self.jitter.values()):
            raise ValueError("noise and jitter amplitudes must be non-negative")


def curriculum_difficulty(epoch_fraction):
    """0 for the first 10%, linear to 1 at the midpoint, then 1."""
    f = float(epoch_fraction)
    if f < 0.1:
        return 0.0
    if f < 0.5:
        return (f - 0.1) / 0.4
    return 1.0


@dataclass
class IntegralState:
    gamma: float = 0.9
    accumulator: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


def update_integral(integ: IntegralState, dp):
    """Decayed position-error integral: ``acc <- gamma * acc + dp``."""
    return IntegralState(integ.gamma, integ.gamma * np.asarray(integ.accumulator) + np.asarray(dp, float))


# ---------------------------------------------------------------- array-level core

def relative_errors(X, p_t, theta_t):
    dp = np.asarray(p_t, float) - X[..., 0:2]
    dth = wrap_angle(np.asarray(theta_t, float) - X[..., 4])
    return dp, dth


def observation_array(X, p_t, theta_t, integ, setup="All"):
    """Observation rows for states ``X`` (N, 6)."""
    trig, use_int = SETUPS[setup]
    dp, dth = relative_errors(X, p_t, theta_t)
    cols = [dp, X[..., 2:4]]
    if trig:
        cols.append(np.stack([np.sin(dth), np.cos(dth)], axis=-1))
    else:
        cols.append(np.asarray(dth)[..., None])
    cols.append(X[..., 5:6])
    if use_int:
        cols.append(np.asarray(integ, float))
    return np.concatenate(cols, axis=-1)


def reward_array(X, p_t, theta_t, integ, w: RewardWeights):
    """Five-term reward; returns ``(R, terms)`` with each term in [0, 1]."""
    dp, dth = relative_errors(X, p_t, theta_t)
    r_p = 1.0 / (1.0 + 10.0 * np.sum(dp * dp, axis=-1))
    r_o = (1.0 + np.cos(dth)) / 2.0
    r_v = r_p / (1.0 + np.sum(X[..., 2:4] ** 2, axis=-1))
    r_w = r_p / (1.0 + X[..., 5] ** 2)
    integ = np.asarray(integ, float)
    r_i = 1.0 / (1.0 + np.sum(integ * integ, axis=-1))
    R = w.w_p * r_p + r_p * (w.w_o * r_o + w.w_v * r_v + w.w_omega * r_w) + w.w_i * r_i
    return R, {"r_p": r_p, "r_o": r_o, "r_v": r_v, "r_omega": r_w, "r_i": r_i}


def build_observation(state, task: TaskSpec, integ: IntegralState, t=0.0, setup="All"):
    """Observation of a single :class:`RigidState` at time ``t``."""
    X = state.as_array()
    return observation_array(X, task.target_position, task.target_angle(t), integ.accumulator, setup)


def reward(state, task: TaskSpec, integ: IntegralState, t=0.0):
    R, terms = reward_array(state.as_array(), task.target_position, task.target_angle(t),
                            integ.accumulator, task.weights)
    return float(R), {k: float(v) for k, v in terms.items()}


def apply_randomization(spec: RandomizationSpec, difficulty, rng, n, nominal: dict):
    """Per-episode parameter draws and per-channel observation-noise sigmas.

    ``nominal`` maps jittered parameter names to nominal values. Draws are
    uniform in ``nominal * (1 +- difficulty * jitter)``; a draw that would go
    non-positive is clipped to 5% of nominal and logged. ``rng`` needs a
    numpy-style ``uniform(low, high, shape)``; one row is drawn per env.
    """
    d = float(np.clip(difficulty, 0.0, 1.0))
    names = sorted(nominal)
    params = {}
    if n and names:
        U = rng.uniform(-1.0, 1.0, (n, len(names)))
        for j, name in enumerate(names):
            scale = 1.0 + d * spec.jitter.get(name, 0.0) * U[:, j]
            if np.any(scale <= 0.05):
                log.warning("jitter on %s clipped to keep it positive", name)
                scale = np.maximum(scale, 0.05)
            params[name] = nominal[name] * scale
    sigma = {k: d * v for k, v in spec.obs_noise.items()}
    return params, sigma


class RngStreams:
    """Independent generator per environment, keyed by seed and global env index.

    Mimics the slice of the numpy ``Generator`` API the env uses; every draw
    takes one row per selected env, so results do not depend on how a batch
    is partitioned.
    """

    def __init__(self, seed, n, first=0, gens=None):
        self.gens = gens if gens is not None else [
            np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(first + i,))) for i in range(n)]

    def select(self, idx):
        return RngStreams(None, 0, gens=[self.gens[i] for i in idx])

    def _rows(self, draw, shape):
        shape = tuple(np.atleast_1d(shape))
        if shape[0] != len(self.gens):
            raise ValueError(f"leading dimension {shape[0]} != {len(self.gens)} streams")
        if not self.gens:
            return np.zeros(shape)
        return np.stack([draw(g, shape[1:]) for g in self.gens])

    def standard_normal(self, shape):
        return self._rows(lambda g, s: g.standard_normal(s), shape)

    def uniform(self, low, high, shape):
        return self._rows(lambda g, s: g.uniform(low, high, s), shape)


def noise_vector(sigma: dict, setup):
    """Per-channel sigma vector matching :func:`observation_array` for ``setup``."""
    trig, use_int = SETUPS[setup]
    v = [sigma["position"]] * 2 + [sigma["velocity"]] * 2
    v += [sigma["angle"]] * (2 if trig else 1)
    v += [sigma["rate"]]
    v += [sigma["integral"]] * (2 if use_int else 0)
    return np.array(v)


# ---------------------------------------------------------------- batched env

@dataclass(frozen=True)
class EnvConfig:
    task: str = "hover"
    setup: str = "All"
    num_envs: int = 256
    physics_dt: float = 1e-3
    decimation: int = 10
    lag_time_constant: float = 0.05
    integral_gamma: float = 0.9
    success_pos_tol: float = 0.05
    success_ang_tol: float = 0.1
    success_hold_s: float = 0.5
    relax_below: float = 0.4
    critic_window: int = 5
    thrust_per_rad: float = 0.02 * 4500.0 * math.pi / 30.0
    disturbance_poly: tuple[float, ...] = (0.0, 0.0, -0.1)
    body: BodyParams = field(default_factory=BodyParams)
    mapping: ActionMapping = field(default_factory=ActionMapping)
    rate_gains: RatePdGains = field(default_factory=RatePdGains)
    randomization: RandomizationSpec = field(default_factory=RandomizationSpec)
    sensor_noise: SensorNoise = field(default_factory=SensorNoise)
    deployment_mode: bool = False
    randomize_params: bool = True
    task_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise ValueError(f"unknown setup {self.setup!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def control_dt(self):
        return self.physics_dt * self.decimation


class VppEnv:
    """N planar VPP vehicles stepped in lockstep.

    ``step`` takes normalised actions (N, 2) and returns
    ``(obs, reward, done, info)``; finished envs are reset in place and the
    returned ``obs`` is the first observation of the new episode. The
    noise-free critic window is in ``info["critic_obs"]`` and, for envs whose
    episode was cut short without a crash, the window at the cut is in
    ``info["final_critic_obs"]``.
    """

    def __init__(self, config: EnvConfig = EnvConfig(), seed=0, kernels=None, nthreads=None, first_env=0):
        self.cfg = config
        self.task = make_task(config.task, **config.task_overrides)
        body = config.body
        if self.task.thrust_to_weight is not None:
            body = replace(body, thrust_to_weight=self.task.thrust_to_weight)
        self.body = body
        self.n = config.num_envs
        self.kernels = kernels or backend.get()
        self.nthreads = nthreads if nthreads is not None else backend.num_threads()
        self.rng = RngStreams(seed, config.num_envs, first_env)
        self.difficulty = 0.0
        self.obs_dim = obs_dim(config.setup)
        self.hold_steps = int(round(config.success_hold_s / config.control_dt))
        self.poly = np.ascontiguousarray(config.disturbance_poly, dtype=float)
        n = self.n
        self.X = np.zeros((n, 6))
        self.F = np.zeros((n, 2))
        self.q_prev = np.zeros(n)
        self.P = np.zeros((n, N_PARAMS))
        self.integ = np.zeros((n, 2))
        self.integ_obs = np.zeros((n, 2))
        self.steps = np.zeros(n, dtype=np.int64)
        self.hold = np.zeros(n, dtype=np.int64)
        self.succeeded = np.zeros(n, dtype=bool)
        self.ep_return = np.zeros(n)
        self.f_out = np.zeros((n, 2))
        self.last_cmd = np.zeros((n, 2))
        self.sigma = noise_vector(apply_randomization(config.randomization, 0.0, None, 0, {})[1], config.setup)
        self.hist = np.zeros((n, config.critic_window, self.obs_dim))
        self.estimate = None
        self.obs = None

    # -- parameters and resets

    def nominal_params(self):
        b = self.body
        return {"mass": b.mass, "inertia": b.inertia, "drag_coeff": b.drag_coeff,
                "thrust_gain": 1.0, "lag_time_constant": self.cfg.lag_time_constant}

    def set_difficulty(self, d):
        """Set the curriculum level; noise applies from the next step, parameter draws from the next reset."""
        self.difficulty = float(np.clip(d, 0.0, 1.0))
        sigma = apply_randomization(self.cfg.randomization, self.difficulty, None, 0, {})[1]
        self.sigma = noise_vector(sigma, self.cfg.setup)

    def _reset_envs(self, idx):
        k = len(idx)
        if k == 0:
            return
        cfg, spec, b = self.cfg, self.cfg.randomization, self.body
        d = self.difficulty
        draw_d = d if cfg.randomize_params else 0.0
        rng = self.rng.select(idx)
        params, _ = apply_randomization(spec, draw_d, rng, k, self.nominal_params())
        P = self.P
        P[idx, 0] = params["mass"]
        P[idx, 1] = params["inertia"]
        P[idx, 2] = params["drag_coeff"]
        P[idx, 3] = b.half_length
        P[idx, 4] = b.actuator_limit
        P[idx, 5] = -np.expm1(-cfg.physics_dt / params["lag_time_constant"])
        P[idx, 6] = params["thrust_gain"]
        P[idx, 7] = cfg.thrust_per_rad
        u = rng.uniform(-1.0, 1.0, (k, 6))
        X = np.empty((k, 6))
        X[:, 0:2] = np.asarray(self.task.target_position) + d * spec.init_position * u[:, 0:2]
        X[:, 2:4] = d * spec.init_velocity * u[:, 2:4]
        X[:, 4] = self.task.target_angle(0.0) + d * spec.init_angle * u[:, 4]
        X[:, 5] = d * spec.init_rate * u[:, 5]
        self.X[idx] = X
        self.F[idx] = (b.mass * b.g / 2.0)
        self.q_prev[idx] = X[:, 5]
        self.integ[idx] = 0.0
        self.integ_obs[idx] = 0.0
        self.steps[idx] = 0
        self.hold[idx] = 0
        self.succeeded[idx] = False
        self.ep_return[idx] = 0.0
        self.f_out[idx] = self.F[idx]
        if cfg.deployment_mode:
            init = FusedEstimate.initial(self.X)
            if self.estimate is None:
                self.estimate = init
            else:
                self.estimate.mean[idx] = self.X[idx]
                self.estimate.cov[idx] = init.cov[idx]

    def reset(self):
        self.estimate = None
        self._reset_envs(np.arange(self.n))
        clean = self._clean_obs()
        self.hist[:] = clean[:, None, :]
        self.obs = self._noisy_obs(clean)
        return self.obs.copy()

    # -- observation helpers

    def _targets(self, steps=None):
        t = (self.steps if steps is None else steps) * self.cfg.control_dt
        return np.asarray(self.task.target_position), self.task.target_angle(t)

    def _clean_obs(self):
        p_t, th_t = self._targets()
        return observation_array(self.X, p_t, th_t, self.integ, self.cfg.setup)

    def _noisy_obs(self, clean):
        if self.cfg.deployment_mode:
            p_t, th_t = self._targets()
            return observation_array(self.estimate.mean, p_t, th_t, self.integ_obs, self.cfg.setup)
        noise = self.rng.standard_normal(clean.shape) * self.sigma
        return clean + noise

    @property
    def critic_obs(self):
        return self.hist.copy()

    # -- stepping

    def _advance_physics(self, f_cmd, q_des):
        cfg, b = self.cfg, self.body
        gains = cfg.rate_gains
        k = self.kernels
        if not cfg.deployment_mode:
            k.pipeline_substeps(self.X, self.F, self.q_prev, f_cmd, q_des, self.P, self.poly,
                                gains.kp, gains.kd, gains.tau_limit, b.g, b.torque_sign,
                                cfg.physics_dt, cfg.decimation, self.f_out, self.nthreads)
            return
        noise = cfg.sensor_noise
        for _ in range(cfg.decimation):
            x_prev = self.X.copy()
            k.pipeline_substeps(self.X, self.F, self.q_prev, f_cmd, q_des, self.P, self.poly,
                                gains.kp, gains.kd, gains.tau_limit, b.g, b.torque_sign,
                                cfg.physics_dt, 1, self.f_out, self.nthreads)
            accel, gyro = simulate_imu(x_prev, self.X, cfg.physics_dt, noise, self.rng, b.g)
            self.estimate = kalman_predict(self.estimate, accel, gyro, cfg.physics_dt, noise, b.g, check=False)
        pos, ang = simulate_pose(self.X, noise, self.rng)
        self.estimate = kalman_update(self.estimate, pos, ang, noise=noise)

    def step(self, actions):
        actions = np.asarray(actions, dtype=float)
        if actions.shape != (self.n, 2):
            raise ValueError(f"actions must be ({self.n}, 2), got {actions.shape}")
        cfg, task = self.cfg, self.task
        f_cmd, q_des = denormalize_action(actions, cfg.mapping)
        f_cmd = np.ascontiguousarray(f_cmd)
        q_des = np.ascontiguousarray(q_des)
        self.last_cmd[:, 0] = f_cmd
        self.last_cmd[:, 1] = q_des
        self._advance_physics(f_cmd, q_des)
        self.steps += 1

        p_t, th_t = self._targets()
        dp, dth = relative_errors(self.X, p_t, th_t)
        g = cfg.integral_gamma
        self.integ = g * self.integ + dp
        if cfg.deployment_mode:
            dp_est, _ = relative_errors(self.estimate.mean, p_t, th_t)
            self.integ_obs = g * self.integ_obs + dp_est
        rew, terms = reward_array(self.X, p_t, th_t, self.integ, task.weights)

        finite = np.all(np.isfinite(self.X), axis=1)
        (x0, x1), (y0, y1) = task.crash_bounds
        px, py = self.X[:, 0], self.X[:, 1]
        crashed = ~finite | (px < x0) | (px > x1) | (py < y0) | (py > y1)
        rew = np.where(finite, rew, 0.0)

        pos_err = np.sqrt(np.sum(dp * dp, axis=1))
        ang_err = np.abs(dth)
        pos_ok = pos_err < cfg.success_pos_tol
        ang_ok = ang_err < cfg.success_ang_tol
        ok = (pos_ok | ang_ok) if self.difficulty < cfg.relax_below else (pos_ok & ang_ok)
        in_final = self.steps * cfg.control_dt >= task.final_phase_start
        self.hold = np.where(ok & in_final & ~crashed, self.hold + 1, 0)
        newly = self.hold >= self.hold_steps
        self.succeeded |= newly
        timeout = self.steps >= task.episode_length
        success_done = newly & task.terminate_on_success
        terminated = crashed
        truncated = (timeout | success_done) & ~terminated
        done = terminated | truncated
        self.ep_return += rew

        clean = self._clean_obs()
        self.hist[:, :-1] = self.hist[:, 1:]
        self.hist[:, -1] = clean
        info = {
            "terms": terms,
            "crashed": crashed,
            "success": self.succeeded.copy(),
            "terminated": terminated,
            "truncated": truncated,
            "pos_err": pos_err,
            "ang_err": ang_err,
            "steps": self.steps.copy(),
        }
        idx = np.nonzero(done)[0]
        if len(idx):
            info["final_critic_obs"] = self.hist[idx].copy()
            info["final_state"] = self.X[idx].copy()
            info["final_idx"] = idx
            info["episode_returns"] = self.ep_return[idx].copy()
            info["episode_lengths"] = self.steps[idx].copy()
            if not np.all(finite[idx] | crashed[idx]):
                raise DivergenceError("non-finite state outside a crash")
            self._reset_envs(idx)
            fresh = self._clean_obs()
            clean[idx] = fresh[idx]
            self.hist[idx] = fresh[idx][:, None, :]
        obs = self._noisy_obs(clean)
        self.obs = obs
        info["critic_obs"] = self.hist.copy()
        return obs.copy(), rew, done, info


def analytic_hover_action(X, task: TaskSpec, body: BodyParams, mapping: ActionMapping = ActionMapping(),
                          t=0.0, kp_pos=4.0, kd_pos=3.0, k_att=8.0):
    """Closed-form PD hover controller in normalised action units.

    At the target with zero motion it commands exactly ``f = m g`` and zero
    rate; elsewhere it tilts toward the target and scales thrust by the
    attitude so the vertical component tracks the altitude demand.
    """
    X = np.atleast_2d(X)
    p_t = np.asarray(task.target_position)
    dp = p_t - X[:, 0:2]
    ax = kp_pos * dp[:, 0] - kd_pos * X[:, 2]
    ay = kp_pos * dp[:, 1] - kd_pos * X[:, 3]
    th_des = np.clip(-ax / body.g, -0.5, 0.5) + task.target_angle(t)
    c = np.cos(X[:, 4])
    f = body.mass * (body.g + ay) / np.where(np.abs(c) > 0.3, c, np.sign(c) * 0.3 + (c == 0) * 0.3)
    q = k_att * wrap_angle(th_des - X[:, 4])
    return np.stack([f / mapping.f_max, q / mapping.q_max], axis=1).clip(-1.0, 1.0)

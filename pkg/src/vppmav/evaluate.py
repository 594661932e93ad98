"""Evaluation and trajectory export on the batched environment."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .env import EnvConfig, VppEnv, analytic_hover_action

EVAL_COLUMNS = ("episode", "setup", "final_pos_err_m", "final_ang_err_rad", "crashed", "steps")
TRAJ_COLUMNS = ("t_s", "px", "py", "vx", "vy", "theta", "q", "f_cmd", "qdes_cmd", "f1", "f2", "reward")
EST_COLUMNS = ("est_px", "est_py", "est_vx", "est_vy", "est_theta", "est_q")


def success_definition(cfg: EnvConfig):
    return (f"success: |dp| < {cfg.success_pos_tol} m and |dtheta| < {cfg.success_ang_tol} rad held "
            f"{cfg.success_hold_s} s after the final angle knot; crash: leaving the flight box or a "
            f"non-finite state (fail rate counts crashes)")


def policy_fn(policy, deterministic=True):
    """Wrap a :class:`PolicyNet` as ``obs -> action`` using the squashed mean."""
    dtype = policy.log_std.dtype

    def act(obs, env):
        with torch.no_grad():
            a, _, _ = policy.act(torch.as_tensor(obs, dtype=dtype), deterministic=deterministic)
        return a.double().numpy()
    return act


def hover_fn(obs, env):
    t = env.steps * env.cfg.control_dt
    return analytic_hover_action(env.X, env.task, env.body, env.cfg.mapping, t)


@dataclass
class EvalResult:
    rows: list
    pos_err: float
    inv_pos_err: float
    fail_rate: float
    success_rate: float
    mean_reward: float
    final_pos_err: float


def upright_end_step(env: VppEnv):
    """Last control step before the attitude profile first departs from its start value."""
    prof = env.task.angle_profile
    for t, th in prof[1:]:
        if th != prof[0][1]:
            return max(1, int(round(t / env.cfg.control_dt)))
    return env.task.episode_length


def evaluate(act, env_cfg: EnvConfig, n_episodes=100, seed=0, difficulty=1.0, kernels=None):
    """Run ``n_episodes`` in parallel to full length (crashes end an episode early).

    ``pos_err`` is the position error at the end of the upright phase and
    ``inv_pos_err`` the error at the end of the episode, both averaged over
    non-crashed episodes.
    """
    cfg = replace(env_cfg, num_envs=n_episodes,
                  task_overrides=dict(env_cfg.task_overrides, terminate_on_success=False))
    env = VppEnv(cfg, seed=seed, kernels=kernels)
    env.set_difficulty(difficulty)
    obs = env.reset()
    n, T = n_episodes, env.task.episode_length
    k_up = upright_end_step(env)
    alive = np.ones(n, dtype=bool)
    ret = np.zeros(n)
    steps = np.zeros(n, dtype=np.int64)
    up_err = np.full(n, np.nan)
    pos_err = np.full(n, np.nan)
    ang_err = np.full(n, np.nan)
    crashed = np.zeros(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    for k in range(1, T + 1):
        obs, r, done, info = env.step(act(obs, env))
        ret += np.where(alive, r, 0.0)
        steps += alive
        upd = alive.copy()
        pos_err[upd] = info["pos_err"][upd]
        ang_err[upd] = info["ang_err"][upd]
        success[upd] |= info["success"][upd]
        if k == k_up:
            up_err[upd] = info["pos_err"][upd]
        hit = alive & info["crashed"]
        crashed |= hit
        alive &= ~done
    rows = [{"episode": i, "setup": cfg.setup, "final_pos_err_m": pos_err[i], "final_ang_err_rad": ang_err[i],
             "crashed": int(crashed[i]), "steps": int(steps[i]), "return": ret[i], "success": bool(success[i]),
             "upright_pos_err_m": up_err[i]} for i in range(n)]
    ok = ~crashed
    mean = (lambda x: float(np.mean(x)) if len(x) else float("nan"))
    return EvalResult(rows, mean(up_err[ok]), mean(pos_err[ok]), float(crashed.mean()),
                      float(success.mean()), float(ret.mean()), mean(pos_err[ok]))


def write_eval_csv(path, result: EvalResult, cfg: EnvConfig):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for r in result.rows:
            w.writerow([r["episode"], r["setup"], repr(float(r["final_pos_err_m"])),
                        repr(float(r["final_ang_err_rad"])), r["crashed"], r["steps"]])


def export_trajectory(act, env_cfg: EnvConfig, seed=0, difficulty=0.0, kernels=None):
    """Roll out one full-length episode; returns rows keyed by the trajectory columns."""
    cfg = replace(env_cfg, num_envs=1,
                  task_overrides=dict(env_cfg.task_overrides, terminate_on_success=False))
    env = VppEnv(cfg, seed=seed, kernels=kernels)
    env.set_difficulty(difficulty)
    obs = env.reset()
    dt = cfg.control_dt
    rows = []

    def snap(t, r, X=None):
        X = env.X[0] if X is None else X
        row = dict(zip(TRAJ_COLUMNS, [t, *X, env.last_cmd[0, 0], env.last_cmd[0, 1],
                                      env.f_out[0, 0], env.f_out[0, 1], r]))
        if cfg.deployment_mode:
            row.update(zip(EST_COLUMNS, env.estimate.mean[0]))
        return row

    rows.append(snap(0.0, 0.0))
    for k in range(1, env.task.episode_length + 1):
        obs, r, done, info = env.step(act(obs, env))
        if done[0]:
            # the env has already reset itself; record the state the episode ended in
            rows.append(snap(k * dt, float(r[0]), info["final_state"][0]))
            break
        rows.append(snap(k * dt, float(r[0])))
    return rows


def write_trajectory_csv(path, rows, deployment_mode=False):
    cols = TRAJ_COLUMNS + (EST_COLUMNS if deployment_mode else ())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(r[c])) for c in cols])

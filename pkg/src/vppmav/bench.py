"""Throughput of the compiled kernels against the numpy fallback.

An env-step is one physics tick (``physics_dt`` of simulated time) of one
environment. Physics-only timing calls the rigid-body kernel directly;
full-pipeline timing goes through :meth:`VppEnv.step`, so it also pays for
the rate loop, allocation, lag, observations, rewards and resets.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import backend
from .dynamics import BodyParams
from .env import EnvConfig, VppEnv


@dataclass
class BenchRow:
    mode: str
    backend: str
    num_envs: int
    threads: int
    steps: int
    seconds: float

    @property
    def rate(self):
        return self.num_envs * self.steps / self.seconds


def _hover_batch(n, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.uniform(0.5, 1.9, n), rng.uniform(0.5, 1.9, n), rng.normal(0, 0.2, (n, 2)),
                         rng.normal(0, 0.3, n), rng.normal(0, 0.5, n)])
    return np.ascontiguousarray(X)


def physics_run(kernels, n, steps, nthreads=1, seed=0):
    """Step ``n`` bodies ``steps`` times at hover thrust; returns (final states, seconds)."""
    b = BodyParams()
    X = _hover_batch(n, seed)
    f = np.full(n, b.hover_thrust)
    tau = np.zeros(n)
    m, inertia, kd = np.full(n, b.mass), np.full(n, b.inertia), np.full(n, b.drag_coeff)
    t0 = time.perf_counter()
    for _ in range(steps):
        kernels.physics_step(X, f, tau, m, inertia, kd, b.g, b.torque_sign, 1e-3, nthreads)
    return X, time.perf_counter() - t0


def pipeline_run(kernels, n, control_steps, nthreads=1, seed=0, cfg=None):
    """Step a :class:`VppEnv` with fixed pseudo-random actions; returns (state trace digest, seconds)."""
    cfg = replace(cfg or EnvConfig(), num_envs=n)
    env = VppEnv(cfg, seed=seed, kernels=kernels, nthreads=nthreads)
    env.set_difficulty(1.0)
    env.reset()
    rng = np.random.default_rng(seed)
    actions = rng.uniform(-0.3, 0.3, (control_steps, n, 2)) + np.array([0.5, 0.0])
    total = np.zeros(6)
    t0 = time.perf_counter()
    for k in range(control_steps):
        env.step(actions[k])
        total += env.X.sum(axis=0)
    return total, time.perf_counter() - t0, cfg.decimation


def run(batch_sizes=(1, 64, 1024), threads=(1, None), physics_steps=1000, control_steps=50, backends=None):
    """Time every combination; ``None`` in ``threads`` means the machine default."""
    backends = backends or backend.available()
    rows = []
    for name in backends:
        k = backend.get(name)
        for n in batch_sizes:
            for th in threads:
                th = th or backend.num_threads()
                if name == "python" and th > 1:
                    continue  # the fallback is single-threaded
                # scale small batches up so each timing is long enough to mean something
                reps = min(64, max(1, 1024 // n))
                _, sec = physics_run(k, n, physics_steps * reps, th)
                rows.append(BenchRow("physics", name, n, th, physics_steps * reps, sec))
                _, sec, dec = pipeline_run(k, n, control_steps * reps, th)
                rows.append(BenchRow("pipeline", name, n, th, control_steps * reps * dec, sec))
    return rows


def threads_identical(n=1024, steps=200, thread_counts=(1, 2, 4)):
    """Spot-check that the compiled path gives bit-identical trajectories at every worker count."""
    if "compiled" not in backend.available():
        return True
    k = backend.get("compiled")
    ref_phys, _ = physics_run(k, n, steps, thread_counts[0])
    ref_pipe, _, _ = pipeline_run(k, n, steps // 10, thread_counts[0])
    for th in thread_counts[1:]:
        if not np.array_equal(physics_run(k, n, steps, th)[0], ref_phys):
            return False
        if not np.array_equal(pipeline_run(k, n, steps // 10, th)[0], ref_pipe):
            return False
    return True


def per_env_cost_ratio(rows, mode="physics"):
    """Per-env cost at batch 1 over per-env cost at the largest batch, per backend and thread count."""
    out = {}
    for r in rows:
        if r.mode != mode:
            continue
        out.setdefault((r.backend, r.threads), {})[r.num_envs] = r.rate
    ratios = {}
    for key, rates in out.items():
        if 1 in rates and len(rates) > 1:
            ratios[key] = rates[max(rates)] / rates[1]
    return ratios


def format_rows(rows):
    lines = [f"{'mode':<9} {'backend':<9} {'envs':>6} {'threads':>7} {'env-steps/s':>14}"]
    for r in rows:
        lines.append(f"{r.mode:<9} {r.backend:<9} {r.num_envs:>6} {r.threads:>7} {r.rate:>14.4g}")
    return "\n".join(lines)


def main():
    rows = run()
    print(format_rows(rows))
    for (name, th), ratio in per_env_cost_ratio(rows).items():
        print(f"batch 1 -> max batch per-env speedup ({name}, {th} threads): {ratio:.1f}x")
    print("bit-identical across worker counts:", threads_identical())


if __name__ == "__main__":
    main()

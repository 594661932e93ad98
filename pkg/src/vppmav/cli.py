"""``vppmav`` command line: train, eval, fit, bench, export.

Exit codes: 0 success, 2 config or input error, 3 runtime divergence.
Every command writes the resolved config (``config.yaml``) beside its
outputs; rerunning with that file and the same seed reproduces them.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, config
from .actuator import (FitError, fit_drag_coeff, fit_pitch_disturbance, fit_thrust_coeffs, read_bench_csv,
                       read_disturbance_csv, read_drag_csv, rpm_to_rads)
from .dynamics import DivergenceError
from .evaluate import (evaluate, export_trajectory, hover_fn, policy_fn, success_definition, write_eval_csv,
                       write_trajectory_csv)
from .learner import load_checkpoint, train

log = logging.getLogger("vppmav")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3
ANALYTIC = "analytic"


class InputError(Exception):
    pass


def model_digest(cfg):
    """Hash of everything a trained policy depends on (not epochs, output or eval settings)."""
    run = cfg["run"]
    sub = {k: cfg[k] for k in ("dynamics", "control", "env", "learner")}
    sub["run"] = {"task": run["task"], "setup": run["setup"]}
    return config.digest(sub)


def _overrides(args):
    run = {}
    for flag, key in (("task", "task"), ("setup", "setup"), ("seed", "seed"), ("envs", "num_envs"),
                      ("epochs", "epochs"), ("episodes", "eval_episodes")):
        v = getattr(args, flag, None)
        if v is not None:
            run[key] = v
    if getattr(args, "deployment_mode", False):
        run["deployment_mode"] = True
    return {"run": run} if run else None


def resolve(args, base=None, fallback_run=None):
    """Defaults, then ``base`` (a snapshot beside a checkpoint), then ``--config``, then flags.

    ``fallback_run`` fills run keys that nothing else set (used for the
    task/setup recorded in a checkpoint).
    """
    cfg = config.load(base) if base is not None else config.default_dict()
    if args.config:
        cfg = config._merge(cfg, config.read_file(args.config))
    elif fallback_run:
        cfg = config._merge(cfg, {"run": fallback_run})
    ov = _overrides(args)
    if ov:
        cfg = config._merge(cfg, ov)
    config.validate(cfg)
    return cfg


def _out_dir(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_train(args):
    cfg = resolve(args)
    out = _out_dir(args, f"runs/{cfg['run']['task']}_{cfg['run']['setup']}_s{cfg['run']['seed']}")
    config.dump(cfg, out / "config.yaml")
    env_cfg, ppo = config.env_config(cfg), config.ppo_config(cfg)
    meta = {"task": cfg["run"]["task"], "setup": cfg["run"]["setup"], "config_hash": model_digest(cfg)}

    def progress(row, stats):
        if row["epoch"] % 10 == 0 or row["epoch"] == ppo.epochs - 1:
            print(f"epoch {row['epoch']:5d}  reward {row['mean_reward']:9.2f}  len {row['mean_ep_len']:6.1f}  "
                  f"difficulty {row['difficulty']:.2f}  kl {row['kl']:.4f}", flush=True)

    res = train(env_cfg, ppo, seed=cfg["run"]["seed"], out_dir=out, meta=meta, progress=progress)
    print(f"wrote {out / 'policy.npz'} and {out / 'curves.csv'} ({res.wall_time:.0f} s)")
    return EXIT_OK


def _load_policy(args):
    """Returns (act, cfg, hash_ok)."""
    if args.checkpoint == ANALYTIC:
        return hover_fn, resolve(args), True
    path = Path(args.checkpoint)
    try:
        policy, meta = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"cannot load checkpoint {path}: {e}") from e
    snapshot = path.parent / "config.yaml"
    if snapshot.exists() and not args.config:
        cfg = resolve(args, base=snapshot)
    else:
        cfg = resolve(args, fallback_run={k: meta[k] for k in ("task", "setup") if k in meta})
    ok = meta.get("config_hash") == model_digest(cfg)
    if not ok:
        log.warning("checkpoint config hash does not match the resolved config; results are flagged")
    expected = config.env_config(cfg)
    if policy.layers[0].in_features != _obs_dim(expected):
        raise InputError(f"checkpoint expects {policy.layers[0].in_features} observations, "
                         f"setup {cfg['run']['setup']} gives {_obs_dim(expected)}")
    return policy_fn(policy), cfg, ok


def _obs_dim(env_cfg):
    from .env import obs_dim
    return obs_dim(env_cfg.setup)


def cmd_eval(args):
    act, cfg, ok = _load_policy(args)
    out = _out_dir(args, "eval")
    config.dump(cfg, out / "config.yaml")
    env_cfg = config.env_config(cfg)
    if args.nominal:
        env_cfg = replace(env_cfg, randomize_params=False)
    n = int(cfg["run"]["eval_episodes"])
    res = evaluate(act, env_cfg, n_episodes=n, seed=cfg["run"]["seed"], difficulty=1.0)
    write_eval_csv(out / "eval.csv", res, env_cfg)
    summary = {"task": cfg["run"]["task"], "setup": cfg["run"]["setup"], "episodes": n,
               "pos_err_m": res.pos_err, "inv_pos_err_m": res.inv_pos_err, "fail_rate": res.fail_rate,
               "success_rate": res.success_rate, "mean_reward": res.mean_reward,
               "nominal_params": bool(args.nominal), "config_hash_match": ok}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print("# " + success_definition(env_cfg))
    print("# pos. err: error at the end of the upright phase; inv. pos. err: error at episode end; "
          "both averaged over non-crashed episodes")
    if not ok:
        print("# WARNING: checkpoint/config hash mismatch")
    print(f"{'setup':<6} {'pos_err_m':>10} {'inv_pos_err_m':>14} {'fail_rate':>10} {'success':>8} {'reward':>10}")
    print(f"{cfg['run']['setup']:<6} {res.pos_err:>10.4f} {res.inv_pos_err:>14.4f} {res.fail_rate:>10.2%} "
          f"{res.success_rate:>8.2%} {res.mean_reward:>10.2f}")
    return EXIT_OK


def cmd_export(args):
    act, cfg, _ = _load_policy(args)
    out = _out_dir(args, "export")
    config.dump(cfg, out / "config.yaml")
    env_cfg = config.env_config(cfg)
    rows = export_trajectory(act, env_cfg, seed=cfg["run"]["seed"], difficulty=args.difficulty)
    path = out / "trajectory.csv"
    write_trajectory_csv(path, rows, env_cfg.deployment_mode)
    print(f"wrote {path} ({len(rows)} rows)")
    return EXIT_OK


def cmd_fit(args):
    cfg = resolve(args)
    out = _out_dir(args, "fit")
    a = cfg["actuator"]
    try:
        if args.what == "thrust":
            fit = fit_thrust_coeffs(read_bench_csv(args.csv), a["motor"]["kQ"], rpm_to_rads(a["target_rpm"]))
            coeffs = {"k_T": fit.k_T, "k_D1": fit.k_D1, "k_D2": fit.k_D2, "k_D3": fit.k_D3, "i0": fit.i0,
                      "g0": fit.estimator.g0, "g1": fit.estimator.g1, "g2": fit.estimator.g2}
            coeffs = {k: float(v) for k, v in coeffs.items()}
            a["propeller"].update({k: coeffs[k] for k in ("k_T", "k_D1", "k_D2", "k_D3")})
            a["motor"]["i0"] = coeffs["i0"]
            rms = {"thrust_n": fit.thrust_rms, "current_a": fit.current_rms, "pitch_rad": fit.pitch_rms}
        elif args.what == "drag":
            S = read_drag_csv(args.csv)
            body = cfg["dynamics"]["body"]
            kd = fit_drag_coeff(S[:, 0], S[:, 1], S[:, 2], body["mass"], body["g"])
            body["drag_coeff"] = kd = float(kd)
            pred = (S[:, 0] - body["mass"] * body["g"] - kd * np.abs(S[:, 2]) * S[:, 2]) / body["mass"]
            coeffs = {"drag_coeff": kd}
            rms = {"accel_mps2": float(np.sqrt(np.mean((pred - S[:, 1]) ** 2)))}
        else:
            S = read_disturbance_csv(args.csv)
            w0 = rpm_to_rads(a["target_rpm"])
            poly = fit_pitch_disturbance(S[:, 0], S[:, 1], w0, args.degree)
            cfg["env"]["disturbance_poly"] = [float(c) for c in poly]
            pred = w0 * (1 + np.polynomial.polynomial.polyval(S[:, 0], poly))
            coeffs = {"disturbance_poly": [float(c) for c in poly]}
            rms = {"omega_rads": float(np.sqrt(np.mean((pred - S[:, 1]) ** 2)))}
    except FitError as e:
        raise InputError(str(e)) from e
    config.validate(cfg)
    config.dump(cfg, out / "config.yaml")
    (out / f"fit_{args.what}.json").write_text(json.dumps({"coefficients": coeffs, "residual_rms": rms},
                                                          indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for k, v in coeffs.items():
        print(f"{k} = {v!r}")
    for k, v in rms.items():
        print(f"residual rms {k}: {v:.3e}")
    print(f"wrote {out / 'config.yaml'}")
    return EXIT_OK


def cmd_bench(args):
    n = args.envs or 1024
    sizes = sorted({1, max(1, n // 16), n})
    rows = bench.run(batch_sizes=sizes, physics_steps=args.steps, control_steps=max(1, args.steps // 10))
    print(bench.format_rows(rows))
    for (name, th), ratio in bench.per_env_cost_ratio(rows).items():
        print(f"per-env speedup batch 1 -> {n} ({name}, {th} threads): {ratio:.1f}x")
    print("bit-identical across worker counts:", bench.threads_identical(n=min(n, 1024)))
    if args.out:
        out = _out_dir(args, "bench")
        with open(out / "bench.csv", "w", encoding="utf-8") as fh:
            fh.write("mode,backend,num_envs,threads,env_steps_per_s\n")
            for r in rows:
                fh.write(f"{r.mode},{r.backend},{r.num_envs},{r.threads},{r.rate!r}\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="vppmav", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run_flags=True):
        sp.add_argument("--config", help="YAML config; unspecified keys take the packaged defaults")
        sp.add_argument("--out", help="output directory")
        if run_flags:
            sp.add_argument("--task")
            sp.add_argument("--setup")
            sp.add_argument("--seed", type=int)
            sp.add_argument("--envs", type=int)
            sp.add_argument("--deployment-mode", action="store_true",
                            help="observations from the simulated sensors and Kalman filter")

    sp = sub.add_parser("train", help="train a policy with PPO")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on randomized initial states")
    sp.add_argument("checkpoint", help=f"policy.npz, or '{ANALYTIC}' for the closed-form hover controller")
    common(sp)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--nominal", action="store_true", help="evaluate at nominal physical parameters")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export", help="roll out one episode to a trajectory CSV")
    sp.add_argument("checkpoint")
    common(sp)
    sp.add_argument("--difficulty", type=float, default=0.0)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("fit", help="fit actuator or body coefficients from bench data")
    sp.add_argument("csv")
    sp.add_argument("--what", choices=("thrust", "drag", "disturbance"), default="thrust")
    sp.add_argument("--degree", type=int, default=2, help="disturbance polynomial degree")
    common(sp, run_flags=False)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("bench", help="simulation throughput, compiled vs numpy")
    sp.add_argument("--envs", type=int)
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (config.ConfigError, InputError, FitError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

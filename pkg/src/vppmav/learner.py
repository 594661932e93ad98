"""PPO for the asymmetric actor-critic.

The actor is a small MLP whose weight layers are spectrally normalised
after every optimizer step, which bounds its Lipschitz constant by the
product of the per-layer caps. The critic sees a privileged, noise-free
window of the last few observations through an LSTM followed by a wide MLP.
Gradients come from torch autograd.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dynamics import DivergenceError
from .env import EnvConfig, VppEnv, curriculum_difficulty

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "mean_reward", "mean_ep_len", "lr", "difficulty", "clip_fraction", "kl")
CHECKPOINT_FORMAT = "vppmav-actor/1"
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    epochs_per_update: int = 4
    minibatch_size: int = 1024
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    horizon: int = 64
    num_envs: int = 256
    epochs: int = 100
    lr_start: float = 3e-4
    lr_end: float = 9e-5
    lr_hold: float = 0.1
    lr_decay_end: float = 0.7
    max_grad_norm: float = 1.0
    reward_scale: float = 0.05
    lipschitz: float = 8.0
    power_iters: int = 3
    actor_hidden: tuple[int, ...] = (96, 64)
    critic_lstm: int = 64
    critic_hidden: int = 512
    init_log_std: float = -1.5
    checkpoint_every: int = 0
    hover_init: bool = True

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if not (0.0 < self.discount <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("discount and gae_lambda must lie in (0, 1]")
        if self.epochs_per_update < 1 or self.minibatch_size < 1 or self.horizon < 1 or self.epochs < 1:
            raise ValueError("epoch, minibatch and horizon counts must be positive")
        if not self.lipschitz > 0:
            raise ValueError("lipschitz bound must be positive")


def lr_schedule(frac, start=3e-4, end=9e-5, hold=0.1, decay_end=0.7):
    """Constant, then linear decay, then constant, on the fraction of training done."""
    f = float(frac)
    if f < hold:
        return start
    if f < decay_end:
        return start + (end - start) * (f - hold) / (decay_end - hold)
    return end


# ---------------------------------------------------------------- spectral norm

def power_iteration(W, u=None, n_iter=30, rng=None):
    """Largest singular value of ``W`` and the left singular vector estimate."""
    W = torch.as_tensor(W)
    if u is None:
        g = torch.Generator().manual_seed(0) if rng is None else rng
        u = torch.randn(W.shape[0], generator=g, dtype=W.dtype)
    u = u / u.norm().clamp_min(1e-12)
    v = W.T @ u
    for _ in range(n_iter):
        v = W.T @ u
        v = v / v.norm().clamp_min(1e-12)
        u = W @ v
        u = u / u.norm().clamp_min(1e-12)
    sigma = torch.dot(u, W @ v)
    return float(sigma), u


def spectral_normalize(W, cap, u=None, n_iter=30):
    """Rescale ``W`` by ``cap / sigma`` when its estimated top singular value exceeds ``cap``.

    Returns ``(W_out, sigma_before, u)``; ``u`` is the persistent vector to
    feed back next time.
    """
    if not cap > 0:
        raise ValueError("cap must be positive")
    W = torch.as_tensor(W)
    sigma, u = power_iteration(W, u, n_iter)
    if sigma > cap:
        W = W * (cap / sigma)
    return W, sigma, u


# ---------------------------------------------------------------- networks

class PolicyNet(nn.Module):
    """MLP actor with a tanh-squashed Gaussian head and state-independent log-std."""

    def __init__(self, obs_dim=9, hidden=(96, 64), act_dim=2, lipschitz=8.0, init_log_std=-0.5, power_iters=3,
                 init_mean=None):
        super().__init__()
        sizes = (obs_dim, *hidden, act_dim)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        self.acts = [nn.functional.relu, torch.tanh][: len(hidden)] + [torch.tanh] * max(0, len(hidden) - 2)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(init_log_std)))
        self.lipschitz = float(lipschitz)
        self.power_iters = power_iters
        for i, layer in enumerate(self.layers):
            self.register_buffer(f"sv_{i}", torch.randn(layer.out_features, generator=torch.Generator().manual_seed(i)))
        with torch.no_grad():
            self.layers[-1].weight.mul_(0.01)
            self.layers[-1].bias.zero_()
            if init_mean is not None:
                m = torch.as_tensor(np.asarray(init_mean, dtype=np.float64)).clamp(-0.99, 0.99)
                self.layers[-1].bias.copy_(torch.atanh(m))
        self.normalize(n_iter=30)

    @property
    def layer_cap(self):
        return self.lipschitz ** (1.0 / len(self.layers))

    def pre_mean(self, obs):
        h = obs
        for layer, act in zip(self.layers[:-1], self.acts):
            h = act(layer(h))
        return self.layers[-1](h)

    def forward(self, obs):
        """Squashed action mean and log-std."""
        return torch.tanh(self.pre_mean(obs)), self.log_std.expand(obs.shape[:-1] + self.log_std.shape)

    @torch.no_grad()
    def normalize(self, n_iter=None):
        """Apply the per-layer spectral cap in place; returns the pre-scaling sigmas."""
        sig = []
        for i, layer in enumerate(self.layers):
            W, s, u = spectral_normalize(layer.weight, self.layer_cap, getattr(self, f"sv_{i}"),
                                         n_iter or self.power_iters)
            layer.weight.copy_(W)
            getattr(self, f"sv_{i}").copy_(u)
            sig.append(s)
        return sig

    def distribution(self, obs):
        mu = self.pre_mean(obs)
        return mu, self.log_std.expand_as(mu)

    def log_prob(self, obs, z):
        """Log density of the pre-squash sample ``z`` (the tanh Jacobian cancels in PPO ratios)."""
        mu, log_std = self.distribution(obs)
        return (-0.5 * ((z - mu) / log_std.exp()) ** 2 - log_std - 0.5 * LOG_2PI).sum(-1)

    def entropy(self):
        return (self.log_std + 0.5 * (1.0 + LOG_2PI)).sum()

    @torch.no_grad()
    def act(self, obs, generator=None, deterministic=False):
        """Sample; returns ``(action in [-1,1], pre-squash z, log_prob)`` as tensors."""
        mu, log_std = self.distribution(obs)
        if deterministic:
            z = mu
        else:
            z = mu + log_std.exp() * torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return torch.tanh(z), z, self.log_prob(obs, z)


def actor_forward(net: PolicyNet, obs):
    """Action mean and log-std for one observation or a batch; rejects non-finite input."""
    obs_t = torch.as_tensor(np.asarray(obs), dtype=net.log_std.dtype)
    if not torch.all(torch.isfinite(obs_t)):
        raise ValueError("observation must be finite")
    with torch.no_grad():
        mean, log_std = net(obs_t)
    return mean.numpy(), log_std.detach().numpy()


class CriticNet(nn.Module):
    """LSTM over a fixed observation window followed by a two-layer ELU MLP."""

    def __init__(self, obs_dim=9, window=5, lstm=64, hidden=512):
        super().__init__()
        self.window = window
        self.lstm = nn.LSTM(obs_dim, lstm, batch_first=True)
        self.mlp = nn.Sequential(nn.Linear(lstm, hidden), nn.ELU(), nn.Linear(hidden, hidden), nn.ELU(),
                                 nn.Linear(hidden, 1))

    def forward(self, hist):
        if hist.shape[-2] != self.window:
            raise ValueError(f"critic needs a {self.window}-step window, got {hist.shape[-2]}")
        lead = hist.shape[:-2]
        out, _ = self.lstm(hist.reshape(-1, *hist.shape[-2:]))
        return self.mlp(out[:, -1]).reshape(lead)


# ---------------------------------------------------------------- advantages

def gae_advantages(rewards, values, dones, discount=0.99, lam=0.95):
    """Generalised advantage estimation over a (T, ...) rollout.

    ``values`` has one more step than ``rewards``: its last row bootstraps
    the tail. ``dones[t]`` cuts the recursion after step t. Returns
    ``(advantages, returns)``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    T = rewards.shape[0]
    if values.shape != (T + 1,) + rewards.shape[1:] or dones.shape != rewards.shape:
        raise ValueError(f"shape mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        keep = 1.0 - dones[t]
        delta = rewards[t] + discount * values[t + 1] * keep - values[t]
        last = delta + discount * lam * keep * last
        adv[t] = last
    return adv, adv + values[:-1]


# ---------------------------------------------------------------- update

def ppo_losses(policy: PolicyNet, critic: CriticNet, mb, cfg: PpoConfig):
    """Clipped surrogate, value and entropy losses for one minibatch dict of tensors."""
    logp = policy.log_prob(mb["obs"], mb["z"])
    ratio = torch.exp(logp - mb["logp"])
    adv = mb["adv"]
    surr = torch.min(ratio * adv, torch.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv)
    pi_loss = -surr.mean()
    v = critic(mb["hist"])
    v_loss = 0.5 * ((v - mb["ret"]) ** 2).mean()
    ent = policy.entropy()
    total = pi_loss + cfg.value_coef * v_loss - cfg.entropy_coef * ent
    with torch.no_grad():
        log_ratio = logp - mb["logp"]
        kl = ((ratio - 1.0) - log_ratio).mean()
        clip_frac = ((ratio - 1.0).abs() > cfg.clip).float().mean()
    return total, {"pi_loss": pi_loss.item(), "v_loss": v_loss.item(), "entropy": ent.item(),
                   "kl": float(kl), "clip_fraction": float(clip_frac)}


def ppo_update(batch, policy: PolicyNet, critic: CriticNet, optimizer, cfg: PpoConfig, generator=None):
    """Several epochs of minibatch PPO over ``batch`` (dict of flat tensors); mutates the nets."""
    n = batch["obs"].shape[0]
    adv = batch["adv"]
    batch = dict(batch, adv=(adv - adv.mean()) / (adv.std() + 1e-8))
    stats = []
    for _ in range(cfg.epochs_per_update):
        perm = torch.randperm(n, generator=generator)
        for k, start in enumerate(range(0, n, cfg.minibatch_size)):
            idx = perm[start:start + cfg.minibatch_size]
            mb = {key: val[idx] for key, val in batch.items()}
            loss, st = ppo_losses(policy, critic, mb, cfg)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite PPO loss in minibatch {k} (rows {start}..{start + len(idx)})")
            optimizer.zero_grad()
            loss.backward()
            # clip per network so the critic's larger gradients don't shrink the actor step
            nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
            nn.utils.clip_grad_norm_(critic.parameters(), cfg.max_grad_norm)
            optimizer.step()
            policy.normalize()
            stats.append(st)
    return {key: float(np.mean([s[key] for s in stats])) for key in stats[0]}


# ---------------------------------------------------------------- checkpoints

def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, policy: PolicyNet, meta: dict):
    """Write the actor as an ``.npz`` archive.

    Entries: ``meta`` (UTF-8 JSON bytes as uint8), ``W{i}``/``b{i}`` float32
    weights and biases per layer, ``u{i}`` float32 power-iteration vectors,
    ``log_std`` float32. ``meta`` records format tag, layer shapes, the
    Lipschitz bound, activations, seed and config hash.
    """
    arrays = {}
    shapes = []
    for i, layer in enumerate(policy.layers):
        arrays[f"W{i}"] = layer.weight.detach().cpu().numpy().astype(np.float32)
        arrays[f"b{i}"] = layer.bias.detach().cpu().numpy().astype(np.float32)
        arrays[f"u{i}"] = getattr(policy, f"sv_{i}").cpu().numpy().astype(np.float32)
        shapes.append(list(arrays[f"W{i}"].shape))
    arrays["log_std"] = policy.log_std.detach().cpu().numpy().astype(np.float32)
    full = dict(meta, format=CHECKPOINT_FORMAT, layer_shapes=shapes, lipschitz=policy.lipschitz,
                activations=["relu", "tanh"][: len(shapes) - 1] + ["tanh"])
    arrays["meta"] = np.frombuffer(json.dumps(full, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return full


def load_checkpoint(path):
    """Rebuild a float32 :class:`PolicyNet`; returns ``(policy, meta)``."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        shapes = meta["layer_shapes"]
        hidden = tuple(s[0] for s in shapes[:-1])
        policy = PolicyNet(shapes[0][1], hidden, shapes[-1][0], lipschitz=meta["lipschitz"])
        with torch.no_grad():
            for i, layer in enumerate(policy.layers):
                layer.weight.copy_(torch.from_numpy(z[f"W{i}"]))
                layer.bias.copy_(torch.from_numpy(z[f"b{i}"]))
                getattr(policy, f"sv_{i}").copy_(torch.from_numpy(z[f"u{i}"]))
            policy.log_std.copy_(torch.from_numpy(z["log_std"]))
    return policy, meta


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    policy: PolicyNet
    critic: CriticNet
    curves: list = field(default_factory=list)
    wall_time: float = 0.0


def seed_everything(seed):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def build_nets(env_cfg: EnvConfig, ppo: PpoConfig, obs_dim):
    init_mean = None
    if ppo.hover_init:
        # start from the squashed action that holds the nominal body at hover
        init_mean = (env_cfg.body.hover_thrust / env_cfg.mapping.f_max, 0.0)
    policy = PolicyNet(obs_dim, ppo.actor_hidden, 2, ppo.lipschitz, ppo.init_log_std, ppo.power_iters,
                       init_mean)
    critic = CriticNet(obs_dim, env_cfg.critic_window, ppo.critic_lstm, ppo.critic_hidden)
    return policy, critic


def _values(critic, hist, chunk=8192):
    out = []
    with torch.no_grad():
        flat = hist.reshape(-1, *hist.shape[-2:])
        for s in range(0, flat.shape[0], chunk):
            out.append(critic(flat[s:s + chunk]))
    return torch.cat(out).reshape(hist.shape[:-2])


def collect_rollout(env: VppEnv, policy: PolicyNet, critic: CriticNet, ppo: PpoConfig, generator):
    """Run ``horizon`` policy steps; returns the flat training batch and episode stats."""
    T, n = ppo.horizon, env.n
    obs_buf = torch.zeros(T, n, env.obs_dim)
    hist_buf = torch.zeros(T, n, *env.hist.shape[1:])
    z_buf = torch.zeros(T, n, 2)
    logp_buf = torch.zeros(T, n)
    rew = np.zeros((T, n))
    dones = np.zeros((T, n), dtype=bool)
    boot_hist = {}
    ep_returns, ep_lengths = [], []
    obs = env.obs
    for t in range(T):
        obs_t = torch.as_tensor(obs, dtype=torch.float32)
        obs_buf[t] = obs_t
        hist_buf[t] = torch.as_tensor(env.hist, dtype=torch.float32)
        a, z, lp = policy.act(obs_t, generator)
        z_buf[t], logp_buf[t] = z, lp
        obs, r, d, info = env.step(a.double().numpy())
        rew[t] = r * ppo.reward_scale
        dones[t] = d
        if "final_idx" in info:
            idx = info["final_idx"]
            trunc = info["truncated"][idx]
            if np.any(trunc):
                boot_hist[t] = (idx[trunc], info["final_critic_obs"][trunc])
            ep_returns.extend(info["episode_returns"].tolist())
            ep_lengths.extend(info["episode_lengths"].tolist())
    values = _values(critic, torch.cat([hist_buf, torch.as_tensor(env.hist, dtype=torch.float32)[None]])).numpy()
    # cut-short episodes bootstrap from the window they ended on
    for t, (idx, h) in boot_hist.items():
        v = _values(critic, torch.as_tensor(h, dtype=torch.float32)).numpy()
        rew[t, idx] += ppo.discount * v
    adv, ret = gae_advantages(rew, values, dones, ppo.discount, ppo.gae_lambda)
    batch = {
        "obs": obs_buf.reshape(T * n, -1),
        "hist": hist_buf.reshape(T * n, *hist_buf.shape[2:]),
        "z": z_buf.reshape(T * n, 2),
        "logp": logp_buf.reshape(T * n),
        "adv": torch.as_tensor(adv.reshape(-1), dtype=torch.float32),
        "ret": torch.as_tensor(ret.reshape(-1), dtype=torch.float32),
    }
    return batch, ep_returns, ep_lengths, float(rew.mean() / ppo.reward_scale)


def write_curves(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in rows:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in CURVE_COLUMNS[1:]])


def train(env_cfg: EnvConfig, ppo: PpoConfig, seed=0, out_dir=None, meta=None, kernels=None, progress=None):
    """Train from scratch; writes ``curves.csv`` and ``policy.npz`` into ``out_dir`` when given.

    ``mean_reward`` in the curves is the mean undiscounted return of the
    episodes that finished during the epoch (the previous value is carried
    while none have finished).
    """
    seed_everything(seed)
    env_cfg = replace(env_cfg, num_envs=ppo.num_envs)
    env = VppEnv(env_cfg, seed=seed, kernels=kernels)
    policy, critic = build_nets(env_cfg, ppo, env.obs_dim)
    gen = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(list(policy.parameters()) + list(critic.parameters()), lr=ppo.lr_start)
    env.reset()
    rows = []
    last_ret, last_len = float("nan"), float("nan")
    t0 = time.perf_counter()
    meta = dict(meta or {}, seed=seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(ppo.epochs):
        frac = epoch / ppo.epochs
        difficulty = curriculum_difficulty(frac)
        lr = lr_schedule(frac, ppo.lr_start, ppo.lr_end, ppo.lr_hold, ppo.lr_decay_end)
        env.set_difficulty(difficulty)
        for g in optimizer.param_groups:
            g["lr"] = lr
        batch, rets, lens, _ = collect_rollout(env, policy, critic, ppo, gen)
        stats = ppo_update(batch, policy, critic, optimizer, ppo, gen)
        if rets:
            last_ret, last_len = float(np.mean(rets)), float(np.mean(lens))
        row = {"epoch": epoch, "mean_reward": last_ret, "mean_ep_len": last_len, "lr": lr,
               "difficulty": difficulty, "clip_fraction": stats["clip_fraction"], "kl": stats["kl"]}
        rows.append(row)
        if progress:
            progress(row, stats)
        if out_dir is not None and ppo.checkpoint_every and (epoch + 1) % ppo.checkpoint_every == 0:
            save_checkpoint(out_dir / f"policy_{epoch + 1:05d}.npz", policy, dict(meta, epoch=epoch + 1))
    if out_dir is not None:
        write_curves(out_dir / "curves.csv", rows)
        save_checkpoint(out_dir / "policy.npz", policy, dict(meta, epoch=ppo.epochs))
    return TrainResult(policy, critic, rows, time.perf_counter() - t0)


def sampled_lipschitz(policy: PolicyNet, obs, n_pairs=10_000, rng=None, scale=0.1):
    """Largest ``|f(s1) - f(s2)| / |s1 - s2|`` of the squashed mean over random pairs.

    Pairs are drawn around rows of ``obs``: half as a point and a small
    perturbation of it, half as two independent rows.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    obs = np.asarray(obs, dtype=np.float64)
    i = rng.integers(0, len(obs), n_pairs)
    j = rng.integers(0, len(obs), n_pairs)
    s1 = obs[i]
    s2 = obs[j].copy()
    half = n_pairs // 2
    s2[:half] = s1[:half] + scale * rng.standard_normal(s1[:half].shape)
    dtype = policy.log_std.dtype
    with torch.no_grad():
        f1 = policy(torch.as_tensor(s1, dtype=dtype))[0].double().numpy()
        f2 = policy(torch.as_tensor(s2, dtype=dtype))[0].double().numpy()
    num = np.linalg.norm(f1 - f2, axis=1)
    den = np.linalg.norm(s1 - s2, axis=1)
    ok = den > 1e-9
    return float(np.max(num[ok] / den[ok]))

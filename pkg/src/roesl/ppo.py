"""PPO with GAE for the gait environment (online learner)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import OfflineDataset
from .gaitenv import ACT_DIM, OBS_DIM, EnvFactory
from .nn import (Adam, GaussianPolicy, MlpParams, gaussian_log_prob, init_mlp, init_policy,
                 mlp_backward, mlp_forward)
from .rewardlang import RewardContext, RewardSpec, eval_reward_batch


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class PpoConfig:
    num_envs: int = 64
    minibatch_size: int = 1024
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    learning_rate: float = 0.001
    clip_eps: float = 0.2
    epochs: int = 10
    total_steps: int = 200_000
    rollout_length: int = 32
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = -0.5
    reward_scaling: bool = True
    dtype: str = "float32"  # network parameter precision

    def validate(self, prefix: str = "ppo") -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError(f"{prefix}.gamma must be in (0,1]")
        if not 0 < self.gae_lambda <= 1:
            raise ValueError(f"{prefix}.gae_lambda must be in (0,1]")
        if not self.clip_eps > 0:
            raise ValueError(f"{prefix}.clip_eps must be > 0")
        if self.learning_rate < 0 or self.entropy_coef < 0:
            raise ValueError(f"{prefix}.learning_rate and {prefix}.entropy_coef must be >= 0")
        for name in ("num_envs", "minibatch_size", "epochs", "rollout_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{prefix}.{name} must be positive")
        if self.total_steps < 0 or self.total_steps % self.num_envs:
            raise ValueError(f"{prefix}.total_steps must be a non-negative multiple of num_envs")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError(f"{prefix}.hidden must list positive layer widths")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"{prefix}.dtype must be 'float32' or 'float64'")


def gae_advantages(rewards, values, dones, last_value, gamma: float, lam: float):
    """GAE over time axis 0. ``dones[t]`` marks s_{t+1} as terminal.

    Returns (advantages, value_targets).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError(f"length mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_value, dtype=float)
    running = np.zeros_like(next_value)
    for t in range(len(rewards) - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def surrogate_ratio_grad(ratio, adv, clip_eps: float):
    """d/d ratio of min(ratio*A, clip(ratio)*A), elementwise."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    return np.where(unclipped <= clipped, adv, 0.0)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


def init_value(hidden, rng, dtype=np.float64) -> MlpParams:
    return init_mlp((OBS_DIM, *hidden, 1), rng, out_scale=1.0, dtype=dtype)


@dataclass
class RolloutBatch:
    obs: np.ndarray  # (B, obs)
    raw_actions: np.ndarray  # (B, act), pre-clamp samples
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def ppo_update(policy: GaussianPolicy, value_fn: MlpParams, batch: RolloutBatch, config: PpoConfig,
               rng: np.random.Generator, pi_opt: Adam, v_opt: Adam) -> dict:
    """Clipped-surrogate epochs over ``batch``; updates parameters in place."""
    n = len(batch.obs)
    adv_all = normalize_advantages(batch.advantages)
    stats = {"policy_loss": [], "value_loss": [], "kl": [], "entropy": [], "clip_frac": []}
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = perm[start:start + config.minibatch_size]
            m = len(idx)
            obs, raw, old_lp, adv = batch.obs[idx], batch.raw_actions[idx], batch.log_probs[idx], adv_all[idx]

            mu, acts = mlp_forward(policy.mean, obs, cache=True)
            new_lp = gaussian_log_prob(mu, policy.log_std, raw)
            ratio = np.exp(new_lp - old_lp)
            surr = np.minimum(ratio * adv, np.clip(ratio, 1 - config.clip_eps, 1 + config.clip_eps) * adv)
            pi_loss = -surr.mean() - config.entropy_coef * policy.entropy()

            vpred, vacts = mlp_forward(value_fn, obs, cache=True)
            verr = vpred[:, 0] - batch.returns[idx]
            v_loss = float(np.mean(verr**2))
            if not (math.isfinite(pi_loss) and math.isfinite(v_loss)):
                raise TrainingDivergence("non-finite PPO loss",
                                         {"policy_loss": float(pi_loss), "value_loss": v_loss})

            dlp = -surrogate_ratio_grad(ratio, adv, config.clip_eps) * ratio / m
            inv_var = np.exp(-2.0 * policy.log_std)
            diff = raw - mu
            gw, gb, _ = mlp_backward(policy.mean, acts, dlp[:, None] * diff * inv_var, input_grad=False)
            g_logstd = (dlp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) - config.entropy_coef
            grads = []
            for w, b in zip(gw, gb):
                grads += [w, b]
            pi_opt.step(grads + [g_logstd])
            policy.clamp()

            vw, vb, _ = mlp_backward(value_fn, vacts, (2.0 / m) * verr[:, None], input_grad=False)
            vgrads = []
            for w, b in zip(vw, vb):
                vgrads += [w, b]
            v_opt.step(vgrads)

            stats["policy_loss"].append(float(pi_loss))
            stats["value_loss"].append(v_loss)
            stats["kl"].append(float(np.mean(old_lp - new_lp)))
            stats["entropy"].append(policy.entropy())
            stats["clip_frac"].append(float(np.mean(np.abs(ratio - 1) > config.clip_eps)))
    return {k: float(np.mean(v)) if v else 0.0 for k, v in stats.items()}


class _ReturnScaler:
    """Scales rewards by the running std of discounted returns."""

    def __init__(self, num_envs: int, gamma: float):
        self.ret = np.zeros(num_envs)
        self.gamma = gamma
        self.count = 1e-4
        self.mean = 0.0
        self.var = 1.0

    def __call__(self, rewards: np.ndarray, dones: bool) -> np.ndarray:
        self.ret = self.ret * self.gamma + rewards
        b_mean, b_var, b_n = float(self.ret.mean()), float(self.ret.var()), len(self.ret)
        delta = b_mean - self.mean
        tot = self.count + b_n
        self.mean += delta * b_n / tot
        self.var = (self.var * self.count + b_var * b_n + delta**2 * self.count * b_n / tot) / tot
        self.count = tot
        if dones:
            self.ret[:] = 0.0
        return rewards / math.sqrt(self.var + 1e-8)


@dataclass
class PpoResult:
    policy: GaussianPolicy
    value_fn: MlpParams
    transitions: OfflineDataset
    history: list[dict] = field(default_factory=list)
    env_steps: int = 0


def train_ppo(factory: EnvFactory, spec: RewardSpec, config: PpoConfig, seed: int,
              candidate: str = "", iteration: int = 0, init: Optional[GaussianPolicy] = None,
              collect: bool = True) -> PpoResult:
    """Train a policy on ``spec`` with PPO, logging every labeled transition."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    policy = init.astype(dtype) if init is not None else init_policy(OBS_DIM, ACT_DIM, config.hidden, rng,
                                                                      config.init_log_std, dtype)
    value_fn = init_value(config.hidden, rng, dtype)
    if init is not None and tuple(init.mean.sizes[1:-1]) != tuple(config.hidden):
        raise ValueError(f"initial policy hidden sizes {init.mean.sizes[1:-1]} do not match config {config.hidden}")
    pi_opt = Adam(policy.arrays(), config.learning_rate)
    v_opt = Adam(value_fn.arrays(), config.learning_rate)
    scaler = _ReturnScaler(config.num_envs, config.gamma) if config.reward_scaling else None

    env = factory(config.num_envs)
    obs = env.reset(rng.integers(0, 2**31 - 1, size=config.num_envs))
    logs: list[tuple] = []
    history: list[dict] = []
    steps = 0
    total_vec_steps = config.total_steps // config.num_envs
    while steps < total_vec_steps:
        horizon = min(config.rollout_length, total_vec_steps - steps)
        buf_obs, buf_raw, buf_lp, buf_val, buf_rew, buf_done = [], [], [], [], [], []
        for _ in range(horizon):
            raw, lp = policy.sample(obs, rng)
            action = np.clip(raw, -1.0, 1.0)
            value = mlp_forward(value_fn, obs)[:, 0]
            next_obs, prev, done = env.step(action)
            reward = eval_reward_batch(spec, RewardContext.from_arrays(next_obs, action, prev))
            if collect:
                logs.append((obs, action, prev, reward, next_obs, np.full(config.num_envs, done)))
            buf_obs.append(obs)
            buf_raw.append(raw)
            buf_lp.append(lp)
            buf_val.append(value)
            buf_rew.append(scaler(reward, done) if scaler else reward)
            buf_done.append(np.full(config.num_envs, float(done)))
            obs = env.reset(rng.integers(0, 2**31 - 1, size=config.num_envs)) if done else next_obs
            steps += 1
        last_value = mlp_forward(value_fn, obs)[:, 0]
        adv, ret = gae_advantages(np.array(buf_rew), np.array(buf_val), np.array(buf_done), last_value,
                                  config.gamma, config.gae_lambda)
        batch = RolloutBatch(np.concatenate(buf_obs).astype(dtype), np.concatenate(buf_raw), np.concatenate(buf_lp),
                             adv.reshape(-1), ret.reshape(-1))
        stats = ppo_update(policy, value_fn, batch, config, rng, pi_opt, v_opt)
        stats["env_steps"] = steps * config.num_envs
        stats["mean_reward"] = float(np.mean([r.mean() for *_, r, _, _ in logs[-horizon:]])) if collect else 0.0
        history.append(stats)

    if collect and logs:
        cols = list(zip(*logs))
        transitions = OfflineDataset.from_arrays(
            np.concatenate(cols[0]), np.concatenate(cols[1]), np.concatenate(cols[2]),
            np.concatenate(cols[3]), np.concatenate(cols[4]), np.concatenate(cols[5]),
            candidate, iteration)
    else:
        transitions = OfflineDataset()
    return PpoResult(policy, value_fn, transitions, history, steps * config.num_envs)

"""Implicit Q-learning on a fixed transition dataset (offline learner).

V is fit to the target critic by expectile regression, Q by a one-step TD
target through V, and the policy by advantage-weighted regression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import OfflineDataset
from .gaitenv import ACT_DIM, OBS_DIM
from .nn import Adam, GaussianPolicy, MlpParams, pack_arrays, gaussian_log_prob, init_mlp, init_policy, mlp_backward, mlp_forward
from .ppo import TrainingDivergence


@dataclass(frozen=True)
class IqlConfig:
    temperature: float = 3.0
    target_update: float = 0.005
    expectile: float = 0.7
    gamma: float = 0.99
    learning_rate: float = 3e-4
    gradient_steps: int = 3000
    batch_size: int = 256
    hidden: tuple[int, ...] = (64, 64)
    weight_clip: float = 100.0
    normalize_rewards: bool = True
    init_log_std: float = -0.5
    dtype: str = "float32"  # network parameter precision

    def validate(self, prefix: str = "iql") -> None:
        if not 0 < self.expectile < 1:
            raise ValueError(f"{prefix}.expectile must be in (0,1)")
        if not self.temperature > 0:
            raise ValueError(f"{prefix}.temperature must be > 0")
        if not 0 < self.target_update <= 1:
            raise ValueError(f"{prefix}.target_update must be in (0,1]")
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"{prefix}.gamma must be in [0,1]")
        if self.learning_rate < 0:
            raise ValueError(f"{prefix}.learning_rate must be >= 0")
        if self.gradient_steps < 0 or self.batch_size < 1:
            raise ValueError(f"{prefix}.gradient_steps must be >= 0 and {prefix}.batch_size >= 1")
        if not self.weight_clip > 0:
            raise ValueError(f"{prefix}.weight_clip must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"{prefix}.dtype must be 'float32' or 'float64'")


def expectile_weight(u, tau: float):
    return np.where(np.asarray(u) < 0, 1.0 - tau, tau)


def expectile_loss(u, tau: float):
    """|tau - 1[u < 0]| * u^2, elementwise."""
    if not 0 < tau < 1:
        raise ValueError(f"expectile must be in (0,1), got {tau}")
    u = np.asarray(u, dtype=float)
    return expectile_weight(u, tau) * u * u


def expectile_fit(x, y, tau: float, max_iter: int = 100, tol: float = 1e-12) -> np.ndarray:
    """Linear expectile regression ``y ~ x @ w`` by iteratively reweighted least squares.

    ``x`` is (n, d); include a column of ones for an intercept. At tau = 0.5
    every weight is equal and the result is the ordinary least-squares fit.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) != len(y) or len(y) == 0:
        raise ValueError("expectile_fit needs matching, non-empty x and y")
    if not 0 < tau < 1:
        raise ValueError(f"expectile must be in (0,1), got {tau}")
    w = np.linalg.lstsq(x, y, rcond=None)[0]
    for _ in range(max_iter):
        sw = np.sqrt(expectile_weight(y - x @ w, tau))
        w_new = np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)[0]
        done = np.max(np.abs(w_new - w)) <= tol
        w = w_new
        if done:
            break
    return w


def awr_weights(adv, temperature: float, clip: float = 100.0):
    """exp(temperature * A) clipped at ``clip``; ``temperature`` is an inverse temperature."""
    return np.minimum(np.exp(temperature * np.asarray(adv, dtype=float)), clip)


@dataclass
class IqlState:
    q: MlpParams
    q_target: MlpParams
    v: MlpParams
    policy: GaussianPolicy
    opt: Adam  # one Adam over Q, V and the policy, in that order
    _polyak: Optional[list] = None

    def trained_arrays(self) -> list[np.ndarray]:
        return self.q.arrays() + self.v.arrays() + self.policy.arrays()

    def polyak_pairs(self) -> list:
        """(target, source) arrays for the soft update; one flat pair when both are packed."""
        if self._polyak is None:
            tgt, src = self.q_target.storage(), self.q.storage()
            if tgt is not None and src is not None:
                self._polyak = [(tgt, src)]
            else:
                self._polyak = list(zip(self.q_target.arrays(), self.q.arrays()))
        return self._polyak

    @classmethod
    def create(cls, config: IqlConfig, rng: np.random.Generator) -> "IqlState":
        dtype = np.dtype(config.dtype)
        q = init_mlp((OBS_DIM + ACT_DIM, *config.hidden, 1), rng, dtype=dtype)
        v = init_mlp((OBS_DIM, *config.hidden, 1), rng, dtype=dtype)
        policy = init_policy(OBS_DIM, ACT_DIM, config.hidden, rng, config.init_log_std, dtype)
        # Adam is elementwise and the three networks share its settings, so a
        # single packed buffer gives the same result as three optimizers
        arrs = pack_arrays(q.arrays() + v.arrays() + policy.arrays())
        nq, nv = 2 * len(q.weights), 2 * len(v.weights)
        q = MlpParams(q.sizes, arrs[0:nq:2], arrs[1:nq:2], q.output_activation)
        v = MlpParams(v.sizes, arrs[nq:nq + nv:2], arrs[nq + 1:nq + nv:2], v.output_activation)
        mean = policy.mean
        policy = GaussianPolicy(MlpParams(mean.sizes, arrs[nq + nv:-1:2], arrs[nq + nv + 1:-1:2],
                                          mean.output_activation), arrs[-1])
        return cls(q, q.copy(), v, policy, Adam(arrs, config.learning_rate))


def _pairs(gw, gb):
    out = []
    for w, b in zip(gw, gb):
        out += [w, b]
    return out


def iql_update(state: IqlState, batch, config: IqlConfig) -> dict:
    """One gradient step on V, Q and the policy, then a Polyak target update."""
    obs, act, rew, next_obs, done = batch
    n = len(rew)
    if n == 0:
        raise ValueError("empty batch")
    sa = np.concatenate([obs, act], axis=1)

    q_t = mlp_forward(state.q_target, sa)[:, 0]
    # V(s) and V(s') in one pass; only the first half is differentiated
    v_both, v_acts = mlp_forward(state.v, np.concatenate([obs, next_obs]), cache=True)
    v, next_v = v_both[:n, 0], v_both[n:, 0]
    v_acts = [a[:n] for a in v_acts]
    u = q_t - v
    ew = expectile_weight(u, config.expectile)
    eu = ew * u
    v_loss = float(eu @ u) / n

    y = rew + config.gamma * (1.0 - done) * next_v
    q, q_acts = mlp_forward(state.q, sa, cache=True)
    q_err = q[:, 0] - y
    q_loss = float(q_err @ q_err) / n

    adv = q_t - v
    w = awr_weights(adv, config.temperature, config.weight_clip)
    mu, pi_acts = mlp_forward(state.policy.mean, obs, cache=True)
    logp = gaussian_log_prob(mu, state.policy.log_std, act)
    pi_loss = -float(w @ logp) / n
    if not all(math.isfinite(x) for x in (v_loss, q_loss, pi_loss)):
        raise TrainingDivergence("non-finite IQL loss", {"v_loss": v_loss, "q_loss": q_loss, "pi_loss": pi_loss})

    # every gradient below uses quantities computed before any parameter moves
    gw, gb, _ = mlp_backward(state.q, q_acts, (2.0 / n) * q_err[:, None], input_grad=False)
    grads = _pairs(gw, gb)
    gw, gb, _ = mlp_backward(state.v, v_acts, (-2.0 / n) * eu[:, None], input_grad=False)
    grads += _pairs(gw, gb)

    inv_var = np.exp(-2.0 * state.policy.log_std)
    diff = act - mu
    coef = -w / n
    gw, gb, _ = mlp_backward(state.policy.mean, pi_acts, coef[:, None] * diff * inv_var, input_grad=False)
    g_logstd = (coef[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0)
    state.opt.step(grads + _pairs(gw, gb) + [g_logstd])
    state.policy.clamp()

    tau = config.target_update
    for tgt, src in state.polyak_pairs():
        tgt *= 1.0 - tau
        tgt += tau * src
    return {"v_loss": v_loss, "q_loss": q_loss, "pi_loss": pi_loss,
            "adv_mean": float(adv.mean()), "weight_mean": float(w.mean())}


def reward_normalizer(rewards: np.ndarray):
    """(shift, scale) that standardizes a reward column."""
    std = float(np.std(rewards))
    return float(np.mean(rewards)), (std if std > 1e-8 else 1.0)


def train_iql(dataset: OfflineDataset, config: IqlConfig, seed: int,
              history: Optional[list] = None, rewards: Optional[np.ndarray] = None) -> GaussianPolicy:
    """Offline training: reads only ``dataset``, never an environment.

    ``rewards`` replaces the dataset's reward column (a relabeling without the copy).
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    state = IqlState.create(config, rng)
    dtype = np.dtype(config.dtype)
    if rewards is None:
        rewards = dataset.reward
    elif len(rewards) != len(dataset):
        raise ValueError(f"{len(rewards)} rewards for {len(dataset)} transitions")
    rewards = np.asarray(rewards, dtype=float)
    if config.normalize_rewards:
        shift, scale = reward_normalizer(rewards)
        rewards = (rewards - shift) / scale
    # one row per transition, so a minibatch is a single gather
    table = np.concatenate([dataset.obs, dataset.action, dataset.next_obs,
                            rewards[:, None], dataset.done[:, None]], axis=1).astype(dtype)
    a0, a1 = OBS_DIM, OBS_DIM + ACT_DIM
    n1 = a1 + OBS_DIM
    for it in range(config.gradient_steps):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        rows = np.take(table, idx, axis=0)
        batch = (rows[:, :a0], rows[:, a0:a1], rows[:, n1], rows[:, a1:n1], rows[:, n1 + 1])
        stats = iql_update(state, batch, config)
        if history is not None and it % 100 == 0:
            history.append({"step": it, **stats})
    return state.policy

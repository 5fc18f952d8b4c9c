"""Deterministic four-leg phase-oscillator gait environment.

Each leg carries a phase in [0, 1). Actions modulate the per-leg phase rate,
a leg is in stance while its phase is below the duty factor, and the base
velocity follows the mean phase rate of the stance legs. Rewards are not
computed here; see :mod:`roesl.rewardlang`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

LEG_NAMES = ("FL", "FR", "RL", "RR")
OBS_DIM = 14
ACT_DIM = 4
SKILLS = ("trot", "pace", "bound", "hop")
LEG_PAIRS = tuple((i, j) for i in range(4) for j in range(i + 1, 4))

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GaitConstants:
    dt: float = 0.02
    omega0: float = 1.5
    beta: float = 0.5
    duty: float = 0.6
    lam: float = 0.1
    v_gain: float = 0.5
    h0: float = 0.3
    h_dip: float = 0.05
    amplitude: float = 0.4
    episode_length: int = 400
    eval_window: int = 300
    k_phase: float = 40.0
    k_vel: float = 4.0
    w_phase: float = 0.7
    w_vel: float = 0.3

    def validate(self, prefix: str = "env") -> None:
        checks = [
            ("dt", self.dt > 0, "must be > 0"),
            ("omega0", self.omega0 > 0, "must be > 0"),
            ("beta", 0 <= self.beta < 1, "must be in [0,1)"),
            ("duty", 0 < self.duty < 1, "must be in (0,1)"),
            ("lam", 0 < self.lam <= 1, "must be in (0,1]"),
            ("h0", self.h0 > self.h_dip >= 0, "must exceed h_dip"),
            ("episode_length", self.episode_length >= 1, "must be >= 1"),
            ("eval_window", 1 <= self.eval_window <= self.episode_length,
             "must be in [1, episode_length]"),
            ("k_phase", self.k_phase > 0, "must be > 0"),
            ("k_vel", self.k_vel > 0, "must be > 0"),
            ("w_phase", 0 <= self.w_phase <= 1 and abs(self.w_phase + self.w_vel - 1) < 1e-12,
             "must be in [0,1] and sum with w_vel to 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ValueError(f"{prefix}.{name} {msg}")

    @property
    def nominal_period(self) -> float:
        """Steps per gait cycle under zero action."""
        return 1.0 / (self.dt * self.omega0)


DEFAULT_CONSTANTS = GaitConstants()


@dataclass(frozen=True)
class SkillTarget:
    name: str
    offsets: tuple[float, float, float, float]
    duty: float
    velocity: float

    def pair_targets(self) -> np.ndarray:
        off = np.asarray(self.offsets)
        return np.array([(off[j] - off[i]) % 1.0 for i, j in LEG_PAIRS])


SKILL_TABLE = {
    "trot": SkillTarget("trot", (0.0, 0.5, 0.5, 0.0), 0.6, 0.4),
    "pace": SkillTarget("pace", (0.0, 0.5, 0.0, 0.5), 0.6, 0.4),
    "bound": SkillTarget("bound", (0.0, 0.0, 0.5, 0.5), 0.6, 0.4),
    "hop": SkillTarget("hop", (0.0, 0.0, 0.0, 0.0), 0.6, 0.4),
}


def get_skill(name: str) -> SkillTarget:
    try:
        return SKILL_TABLE[name]
    except KeyError:
        raise ValueError(f"unknown skill {name!r}; expected one of {', '.join(SKILLS)}") from None


def circ_dist(x, y):
    d = np.abs(np.asarray(x) - np.asarray(y)) % 1.0
    return np.minimum(d, 1.0 - d)


def wrap_signed(x):
    """Map phase differences to [-0.5, 0.5)."""
    return (np.asarray(x) + 0.5) % 1.0 - 0.5


@dataclass
class GaitState:
    phases: np.ndarray
    base_velocity: float
    base_height: float
    prev_action: np.ndarray
    step_index: int = 0


def observe(phases, contacts, velocity, height) -> np.ndarray:
    """Build observations; works on single states and (N, 4) batches."""
    phases = np.asarray(phases, dtype=float)
    ang = 2.0 * np.pi * phases
    velocity = np.asarray(velocity, dtype=float)[..., None]
    height = np.asarray(height, dtype=float)[..., None]
    return np.concatenate(
        [np.sin(ang), np.cos(ang), np.asarray(contacts, dtype=float), velocity, height], axis=-1
    )


def decode_obs(obs: np.ndarray):
    """Inverse of :func:`observe`: (phases, contacts, velocity, height)."""
    obs = np.asarray(obs, dtype=float)
    phases = np.arctan2(obs[..., 0:4], obs[..., 4:8]) / (2.0 * np.pi) % 1.0
    # arctan2 can return exactly -0.0 -> 1.0 after the modulo on some inputs
    phases = np.where(phases >= 1.0, 0.0, phases)
    return phases, obs[..., 8:12], obs[..., 12], obs[..., 13]


def _advance(phases, velocity, action, const: GaitConstants):
    rate = 1.0 + const.beta * action
    phases = (phases + const.dt * const.omega0 * rate) % 1.0
    contacts = phases < const.duty
    n_stance = contacts.sum(axis=-1)
    stance_rate = np.where(n_stance > 0, (rate * contacts).sum(axis=-1) / np.maximum(n_stance, 1), 0.0)
    velocity = (1.0 - const.lam) * velocity + const.lam * const.v_gain * stance_rate
    height = const.h0 - const.h_dip * (n_stance == 0)
    return phases, contacts, velocity, height


def reset(seed: int, const: GaitConstants = DEFAULT_CONSTANTS):
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 1.0, size=4)
    state = GaitState(phases, 0.0, const.h0, np.zeros(4), 0)
    return state, observe(phases, phases < const.duty, 0.0, const.h0)


def step(state: GaitState, action, const: GaitConstants = DEFAULT_CONSTANTS):
    action = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    phases, contacts, velocity, height = _advance(state.phases, state.base_velocity, action, const)
    new = GaitState(phases, float(velocity), float(height), action, state.step_index + 1)
    done = new.step_index >= const.episode_length
    return new, observe(phases, contacts, velocity, height), done


class StepCounter:
    """Counts single-environment transitions across every env sharing it."""

    def __init__(self):
        self.count = 0


class GaitBatch:
    """N independent environments stepped in lockstep."""

    def __init__(self, num_envs: int, const: GaitConstants = DEFAULT_CONSTANTS,
                 counter: Optional[StepCounter] = None):
        if num_envs < 1:
            raise ValueError("num_envs must be >= 1")
        self.num_envs = num_envs
        self.const = const
        self.counter = counter if counter is not None else StepCounter()
        self.phases = np.zeros((num_envs, 4))
        self.velocity = np.zeros(num_envs)
        self.height = np.full(num_envs, const.h0)
        self.prev_action = np.zeros((num_envs, 4))
        self.step_index = 0

    def reset(self, seeds) -> np.ndarray:
        obs = []
        for k, seed in enumerate(seeds):
            state, o = reset(int(seed), self.const)
            self.phases[k] = state.phases
            obs.append(o)
        self.velocity[:] = 0.0
        self.height[:] = self.const.h0
        self.prev_action[:] = 0.0
        self.step_index = 0
        return np.stack(obs)

    def step(self, action):
        """Returns (next_obs, prev_action, done); ``prev_action`` is the pre-step one."""
        action = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        prev = self.prev_action
        self.phases, contacts, self.velocity, self.height = _advance(
            self.phases, self.velocity, action, self.const)
        self.prev_action = action
        self.step_index += 1
        self.counter.count += self.num_envs
        obs = observe(self.phases, contacts, self.velocity, self.height)
        return obs, prev, self.step_index >= self.const.episode_length

    @property
    def contacts(self) -> np.ndarray:
        return self.phases < self.const.duty


class EnvFactory:
    """Creates environments that share one interaction counter."""

    def __init__(self, const: GaitConstants = DEFAULT_CONSTANTS):
        self.const = const
        self.counter = StepCounter()

    def __call__(self, num_envs: int = 1) -> GaitBatch:
        return GaitBatch(num_envs, self.const, self.counter)

    @property
    def steps(self) -> int:
        return self.counter.count


@dataclass
class Trajectory:
    """One rollout. Row t describes the transition taken at step t."""

    obs: np.ndarray
    actions: np.ndarray
    prev_actions: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    seed: int
    rewards: Optional[np.ndarray] = None
    source_candidate: str = ""
    contacts: np.ndarray = field(init=False)
    thigh_angles: np.ndarray = field(init=False)
    amplitude: float = DEFAULT_CONSTANTS.amplitude

    def __post_init__(self):
        phases, contacts, _, _ = decode_obs(self.next_obs)
        self.contacts = contacts > 0.5
        self.thigh_angles = self.amplitude * np.sin(2.0 * np.pi * phases)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def phases(self) -> np.ndarray:
        return decode_obs(self.next_obs)[0]

    @property
    def velocities(self) -> np.ndarray:
        return self.next_obs[:, 12]


def rollout(policy: Policy, seed: int, const: GaitConstants = DEFAULT_CONSTANTS,
            counter: Optional[StepCounter] = None, steps: Optional[int] = None) -> Trajectory:
    """Run one episode; ``policy`` maps a (1, 14) observation batch to actions."""
    env = GaitBatch(1, const, counter)
    obs = env.reset([seed])
    n = const.episode_length if steps is None else steps
    rec = {k: [] for k in ("obs", "actions", "prev_actions", "next_obs", "dones")}
    for _ in range(n):
        action = np.clip(np.asarray(policy(obs), dtype=float).reshape(1, ACT_DIM), -1.0, 1.0)
        next_obs, prev, done = env.step(action)
        rec["obs"].append(obs[0])
        rec["actions"].append(action[0])
        rec["prev_actions"].append(prev[0])
        rec["next_obs"].append(next_obs[0])
        rec["dones"].append(done)
        obs = next_obs
        if done:
            break
    arrays = {k: np.array(v) for k, v in rec.items()}
    return Trajectory(seed=seed, amplitude=const.amplitude, **arrays)


@dataclass(frozen=True)
class FitnessReport:
    f: float
    phase_score: float
    velocity_score: float
    pair_errors: tuple[float, ...]
    mean_velocity: float


def fitness(traj: Trajectory, skill: SkillTarget | str,
            const: GaitConstants = DEFAULT_CONSTANTS) -> FitnessReport:
    """Ground-truth fitness of a rollout against a skill over the evaluation window."""
    if isinstance(skill, str):
        skill = get_skill(skill)
    if len(traj) < const.eval_window:
        raise ValueError(f"trajectory length {len(traj)} shorter than evaluation window {const.eval_window}")
    phases = traj.phases[-const.eval_window:]
    vel = traj.velocities[-const.eval_window:]
    diffs = np.stack([phases[:, j] - phases[:, i] for i, j in LEG_PAIRS], axis=1)
    err = circ_dist(diffs, skill.pair_targets()[None, :])
    phase_score = float(np.mean(np.exp(-const.k_phase * np.mean(err**2, axis=1))))
    v_bar = float(np.mean(vel))
    velocity_score = float(np.exp(-const.k_vel * (v_bar - skill.velocity) ** 2))
    f = const.w_phase * phase_score + const.w_vel * velocity_score
    return FitnessReport(float(f), phase_score, velocity_score,
                         tuple(float(e) for e in err.mean(axis=0)), v_bar)


class ExpertPolicy:
    """Proportional servo on each leg's circular offset error.

    Legs are pulled toward ``psi + offset_i`` where ``psi`` is the circular
    mean of ``phase_i - offset_i``. The mean action stays near zero so the
    gait keeps its nominal period.
    """

    def __init__(self, skill: SkillTarget, gain: float = 4.0):
        self.skill = skill
        self.gain = gain
        self.offsets = np.asarray(skill.offsets)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        phases = decode_obs(obs)[0]
        rel = 2.0 * np.pi * (phases - self.offsets)
        psi = np.arctan2(np.sin(rel).sum(-1), np.cos(rel).sum(-1))[..., None] / (2.0 * np.pi)
        err = wrap_signed(psi + self.offsets - phases)
        return np.clip(self.gain * err, -1.0, 1.0)


def expert_policy(skill: SkillTarget | str) -> ExpertPolicy:
    if isinstance(skill, str):
        skill = get_skill(skill)
    elif skill.name not in SKILL_TABLE:
        raise ValueError(f"unknown skill {skill.name!r}")
    return ExpertPolicy(skill)


class RandomPolicy:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, size=(np.shape(obs)[0], ACT_DIM))


def zero_policy(obs: np.ndarray) -> np.ndarray:
    return np.zeros((np.shape(obs)[0], ACT_DIM))


def static_trajectory(phases, length: int, const: GaitConstants = DEFAULT_CONSTANTS) -> Trajectory:
    """A trajectory whose state never changes (used for still-scene checks)."""
    phases = np.asarray(phases, dtype=float)
    contacts = phases < const.duty
    o = observe(phases, contacts, 0.0, const.h0)
    obs = np.tile(o, (length, 1))
    zeros = np.zeros((length, ACT_DIM))
    dones = np.zeros(length, dtype=bool)
    dones[-1] = True
    return Trajectory(obs, zeros, zeros, obs.copy(), dones, seed=-1, amplitude=const.amplitude)


def with_constants(const: GaitConstants, **changes) -> GaitConstants:
    c = replace(const, **changes)
    c.validate()
    return c


# ------------------------------------------------------------------ rendering

def _segment_distance(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    L2 = dx * dx + dy * dy
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / L2, 0.0, 1.0) if L2 > 0 else 0.0
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def render_state(phases, height: float, width_px: int, height_px: int,
                 const: GaitConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Side-view stick figure: body bar plus four legs at theta = A sin(2 pi phase)."""
    if width_px < 1 or height_px < 1:
        raise ValueError(f"render dimensions must be positive, got {width_px}x{height_px}")
    py, px = np.mgrid[0:height_px, 0:width_px].astype(float)
    ground = 0.85 * height_px
    leg_len = 0.4 * height_px
    hip_y = ground - leg_len * (height / const.h0) * 0.95
    front_x, rear_x = 0.68 * width_px, 0.32 * width_px
    blur = max(0.6, 0.012 * width_px)
    img = np.exp(-_segment_distance(px, py, rear_x, hip_y, front_x, hip_y) ** 2 / (2 * blur**2))
    thetas = const.amplitude * np.sin(2.0 * np.pi * np.asarray(phases, dtype=float))
    # FL, FR, RL, RR; far-side legs drawn dimmer and nudged sideways
    for leg, (hx, shade, nudge) in enumerate(((front_x, 1.0, 1.0), (front_x, 0.55, -1.0),
                                             (rear_x, 1.0, 1.0), (rear_x, 0.55, -1.0))):
        x0 = hx + nudge * 0.02 * width_px
        x1 = x0 + leg_len * np.sin(thetas[leg])
        y1 = hip_y + leg_len * np.cos(thetas[leg])
        d = _segment_distance(px, py, x0, hip_y, x1, y1)
        img = np.maximum(img, shade * np.exp(-d**2 / (2 * blur**2)))
    return np.clip(img, 0.0, 1.0)


def render_frames(traj: Trajectory, width: int = 64, height: int = 64,
                  const: GaitConstants = DEFAULT_CONSTANTS, stride: int = 1):
    """Render the state sequence of a trajectory (initial state plus every next state)."""
    from .flowsel import FrameSequence

    if len(traj) == 0:
        raise ValueError("cannot render an empty trajectory")
    if width <= 0 or height <= 0:
        raise ValueError(f"render dimensions must be positive, got {width}x{height}")
    states = np.concatenate([traj.obs[:1], traj.next_obs])[::stride]
    phases, _, _, heights = decode_obs(states)
    return FrameSequence.from_arrays([render_state(p, h, width, height, const) for p, h in zip(phases, heights)])

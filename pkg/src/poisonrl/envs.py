"""Toy continuous-control environments and behavior-policy dataset generation.

Two environments ship, both engineered so at least one pair of observation
features is strongly correlated (the low-pass "integrated" feature tracks the
instantaneous one), which trigger construction depends on:

``point-reach``
    A damped point mass on the plane steered toward a goal at the origin,
    rewarded for precision hovering: full reward requires sitting on the
    goal at near-zero speed. Physical state ``(p, v, q)`` with position
    ``p``, velocity ``v`` and a low-pass position trace ``q``; the
    observation appends the goal-relative offset ``-p``. Dynamics, per
    step, with action ``a`` clipped to the unit box::

        v' = (1 - DAMPING) * v + GAIN * a
        p' = clip(p + DT * v', -ARENA, ARENA)
        q' = (1 - EMA) * q + EMA * p'

    Reward is ``clip(1 - |p'| / REWARD_SCALE - VEL_PENALTY * |v'|,
    REWARD_FLOOR, 1)``; episodes run exactly ``max_episode_len`` steps.
    A single hard kick near the goal costs several steps of deeply
    negative reward (the excursion plus the high-speed recovery), which
    is what makes observation-time attacks measurable here.

``balance-1d``
    An unstable scalar system (inverted-pendulum flavor): displacement is
    amplified each step and must be actively countered, so a sustained run
    of bad actions tips the system past ``|x| > 1`` and ends the episode
    with a -1 penalty. Per step::

        v' = v + DT * (LAMBDA * x + GAIN * a)
        x' = x + DT * v'
        q' = (1 - EMA) * q + EMA * x'

    Reward is ``1 - |x'|`` while upright.

Scripted proportional-derivative experts provide reproducible "medium"
quality data: datasets mix expert-driven and uniform-random episodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .util import child_seed


@dataclass
class EnvSpec:
    """Static description of an environment's interface."""

    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_len: int
    reward_range: tuple[float, float]

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=np.float64)
        self.action_high = np.asarray(self.action_high, dtype=np.float64)
        if self.action_low.shape != (self.action_dim,) or self.action_high.shape != (self.action_dim,):
            raise ValueError("action bounds must have one entry per action dimension")
        if not np.all(self.action_low < self.action_high):
            raise ValueError("action bounds require low < high per dimension")
        if self.max_episode_len < 1:
            raise ValueError("max episode length must be >= 1")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "action_low": self.action_low.tolist(),
            "action_high": self.action_high.tolist(),
            "max_episode_len": self.max_episode_len,
            "reward_range": list(self.reward_range),
        }

    @staticmethod
    def from_json(d: dict) -> "EnvSpec":
        return EnvSpec(
            name=d["name"],
            state_dim=int(d["state_dim"]),
            action_dim=int(d["action_dim"]),
            action_low=np.asarray(d["action_low"], dtype=np.float64),
            action_high=np.asarray(d["action_high"], dtype=np.float64),
            max_episode_len=int(d["max_episode_len"]),
            reward_range=(float(d["reward_range"][0]), float(d["reward_range"][1])),
        )


@dataclass
class EnvState:
    """Single-owner mutable episode state."""

    phys: np.ndarray
    t: int
    terminated: bool


@dataclass
class BehaviorConfig:
    """Mixture policy for dataset generation."""

    expert_fraction: float = 0.7
    noise_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.expert_fraction <= 1.0):
            raise ValueError("expert_fraction must lie in [0, 1]")
        if self.noise_scale < 0.0:
            raise ValueError("noise_scale must be >= 0")


def return_bounds(reward_range: tuple[float, float], gamma: float) -> tuple[float, float]:
    """Feasible discounted-return range implied by a per-step reward range."""
    lo, hi = reward_range
    return lo / (1.0 - gamma), hi / (1.0 - gamma)


class EpisodeTerminatedError(RuntimeError):
    """Raised when stepping an episode that already ended."""


class Env:
    """Base environment: functional step over an explicit EnvState."""

    spec: EnvSpec

    def __init__(self):
        self.clip_events = 0  # out-of-bounds actions clipped so far

    def reset(self, seed: int) -> tuple[EnvState, np.ndarray]:
        raise NotImplementedError

    def step(self, state: EnvState, action: np.ndarray) -> tuple[EnvState, np.ndarray, float, bool]:
        raise NotImplementedError

    def expert_action(self, obs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _clip_action(self, action: np.ndarray) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (self.spec.action_dim,):
            raise ValueError(f"action has shape {a.shape}, expected ({self.spec.action_dim},)")
        clipped = np.clip(a, self.spec.action_low, self.spec.action_high)
        if np.any(clipped != a):
            self.clip_events += 1
        return clipped

    def _check_live(self, state: EnvState) -> None:
        if state.terminated:
            raise EpisodeTerminatedError(f"{self.spec.name}: episode already terminated at t={state.t}")


class PointReach(Env):
    DT = 0.4
    DAMPING = 0.08
    GAIN = 0.9
    EMA = 0.55
    REWARD_SCALE = 0.25
    VEL_PENALTY = 0.8
    REWARD_FLOOR = -2.0
    ARENA = 2.0  # hard walls: position is clamped to [-ARENA, ARENA]^2
    KP = 1.5
    KV = 1.2

    def __init__(self):
        super().__init__()
        self.spec = EnvSpec(
            name="point-reach",
            state_dim=8,
            action_dim=2,
            action_low=np.array([-1.0, -1.0]),
            action_high=np.array([1.0, 1.0]),
            max_episode_len=105,
            reward_range=(self.REWARD_FLOOR, 1.0),
        )

    def _obs(self, phys: np.ndarray) -> np.ndarray:
        p, v, q = phys[0:2], phys[2:4], phys[4:6]
        return np.concatenate([p, v, q, -p]).astype(np.float32)

    def reset(self, seed: int) -> tuple[EnvState, np.ndarray]:
        rng = np.random.default_rng(seed)
        radius = rng.uniform(0.7, 1.3)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        p = radius * np.array([np.cos(angle), np.sin(angle)])
        v = rng.uniform(-0.2, 0.2, size=2)
        phys = np.concatenate([p, v, p.copy()])
        state = EnvState(phys=phys, t=0, terminated=False)
        return state, self._obs(phys)

    def step(self, state: EnvState, action: np.ndarray) -> tuple[EnvState, np.ndarray, float, bool]:
        self._check_live(state)
        a = self._clip_action(action)
        p, v, q = state.phys[0:2], state.phys[2:4], state.phys[4:6]
        v_next = (1.0 - self.DAMPING) * v + self.GAIN * a
        p_next = np.clip(p + self.DT * v_next, -self.ARENA, self.ARENA)
        q_next = (1.0 - self.EMA) * q + self.EMA * p_next
        t_next = state.t + 1
        done = t_next >= self.spec.max_episode_len
        reward = float(
            np.clip(
                1.0 - np.linalg.norm(p_next) / self.REWARD_SCALE - self.VEL_PENALTY * np.linalg.norm(v_next),
                self.REWARD_FLOOR,
                1.0,
            )
        )
        next_state = EnvState(phys=np.concatenate([p_next, v_next, q_next]), t=t_next, terminated=done)
        return next_state, self._obs(next_state.phys), reward, done

    def expert_action(self, obs: np.ndarray) -> np.ndarray:
        p, v = np.asarray(obs[0:2], dtype=np.float64), np.asarray(obs[2:4], dtype=np.float64)
        return np.clip(-(self.KP * p + self.KV * v), self.spec.action_low, self.spec.action_high)


class Balance1D(Env):
    DT = 0.2
    LAMBDA = 0.8
    GAIN = 2.5
    EMA = 0.3
    LIMIT = 1.0
    KP = 1.0
    KV = 1.0

    def __init__(self):
        super().__init__()
        self.spec = EnvSpec(
            name="balance-1d",
            state_dim=3,
            action_dim=1,
            action_low=np.array([-1.0]),
            action_high=np.array([1.0]),
            max_episode_len=105,
            reward_range=(-1.0, 1.0),
        )

    def _obs(self, phys: np.ndarray) -> np.ndarray:
        return phys.astype(np.float32)

    def reset(self, seed: int) -> tuple[EnvState, np.ndarray]:
        rng = np.random.default_rng(seed)
        x = rng.uniform(-0.25, 0.25)
        v = rng.uniform(-0.25, 0.25)
        phys = np.array([x, v, x])
        state = EnvState(phys=phys, t=0, terminated=False)
        return state, self._obs(phys)

    def step(self, state: EnvState, action: np.ndarray) -> tuple[EnvState, np.ndarray, float, bool]:
        self._check_live(state)
        a = self._clip_action(action)
        x, v, q = state.phys
        v_next = v + self.DT * (self.LAMBDA * x + self.GAIN * a[0])
        x_next = x + self.DT * v_next
        q_next = (1.0 - self.EMA) * q + self.EMA * x_next
        t_next = state.t + 1
        fell = abs(x_next) > self.LIMIT
        done = fell or t_next >= self.spec.max_episode_len
        reward = -1.0 if fell else 1.0 - abs(x_next)
        next_state = EnvState(phys=np.array([x_next, v_next, q_next]), t=t_next, terminated=done)
        return next_state, self._obs(next_state.phys), float(reward), done

    def expert_action(self, obs: np.ndarray) -> np.ndarray:
        x, v = float(obs[0]), float(obs[1])
        return np.clip(np.array([-(self.KP * x + self.KV * v)]), self.spec.action_low, self.spec.action_high)


ENVIRONMENTS = {
    "point-reach": PointReach,
    "balance-1d": Balance1D,
}


def make_env(name: str) -> Env:
    """Instantiate a registered environment by name."""
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise KeyError(f"unknown environment {name!r}; available: {sorted(ENVIRONMENTS)}") from None


@dataclass
class GenerationLog:
    """Generator-side provenance that must never ship inside the dataset."""

    episode_policies: list[str] = field(default_factory=list)
    episode_returns: list[float] = field(default_factory=list)
    episode_starts: list[int] = field(default_factory=list)
    expert_mask: np.ndarray | None = None  # per-transition: produced by the expert?


def run_scripted_expert(env: Env, n_episodes: int, seed: int) -> list[float]:
    """Roll out the scripted expert; returns per-episode cumulative rewards."""
    returns = []
    for i in range(n_episodes):
        state, obs = env.reset(child_seed(seed, "expert-eval", i))
        total = 0.0
        done = False
        while not done:
            state, obs, r, done = env.step(state, env.expert_action(obs))
            total += r
        returns.append(total)
    return returns


def generate_dataset(env: Env, behavior: BehaviorConfig, n_transitions: int, seed: int):
    """Collect whole episodes under the mixture policy until the row budget fills.

    Each episode is driven either by the scripted expert (plus Gaussian
    exploration noise) or by a sub-optimal policy, chosen per episode with
    probability ``expert_fraction``. The sub-optimal policy is epsilon-greedy
    around the expert (expert action with probability 0.3, uniform-random
    otherwise), i.e. loosely task-directed but erratic, which is what
    "medium quality" data looks like: it wanders well beyond the expert's
    operating region without just pinning to the arena walls. The final episode is cut mid-flight if the budget lands inside it.
    Returns ``(dataset, log)``; the log records which policy produced each
    row and never enters the dataset file.
    """
    from .dataset import Dataset

    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    rng = np.random.default_rng(child_seed(seed, "behavior", behavior.seed))
    spec = env.spec
    states = np.empty((n_transitions, spec.state_dim), dtype=np.float32)
    actions = np.empty((n_transitions, spec.action_dim), dtype=np.float32)
    rewards = np.empty(n_transitions, dtype=np.float32)
    next_states = np.empty((n_transitions, spec.state_dim), dtype=np.float32)
    dones = np.empty(n_transitions, dtype=bool)
    log = GenerationLog(expert_mask=np.empty(n_transitions, dtype=bool))

    row = 0
    episode = 0
    while row < n_transitions:
        use_expert = rng.random() < behavior.expert_fraction
        log.episode_policies.append("expert" if use_expert else "random")
        log.episode_starts.append(row)
        state, obs = env.reset(child_seed(seed, "episode", episode))
        ep_return = 0.0
        done = False
        while not done and row < n_transitions:
            if use_expert:
                a = env.expert_action(obs)
                if behavior.noise_scale > 0.0:
                    a = a + behavior.noise_scale * rng.standard_normal(spec.action_dim)
            elif rng.random() < 0.3:
                a = env.expert_action(obs)
            else:
                a = rng.uniform(spec.action_low, spec.action_high)
            a = np.clip(a, spec.action_low, spec.action_high)
            state, next_obs, r, done = env.step(state, a)
            states[row] = obs
            actions[row] = a.astype(np.float32)
            rewards[row] = r
            next_states[row] = next_obs
            dones[row] = done
            log.expert_mask[row] = use_expert
            ep_return += r
            obs = next_obs
            row += 1
        log.episode_returns.append(ep_return)
        episode += 1

    obs_all = np.concatenate([states, next_states], axis=0)
    meta = {
        "obs_min": obs_all.min(axis=0).astype(float).tolist(),
        "obs_max": obs_all.max(axis=0).astype(float).tolist(),
        "episodes": episode,
    }
    provenance = (
        f"generated env={spec.name} n={n_transitions} seed={seed} "
        f"expert_fraction={behavior.expert_fraction} noise={behavior.noise_scale}"
    )
    dataset = Dataset(
        states=states,
        actions=actions,
        rewards=rewards,
        next_states=next_states,
        dones=dones,
        env=spec,
        provenance=provenance,
        meta=meta,
    )
    return dataset, log

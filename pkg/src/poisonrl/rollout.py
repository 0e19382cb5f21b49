"""Live evaluation of trained policies under trigger activation schedules.

The trigger perturbs only what the policy observes: the environment always
steps on its true internal state, and the reported reward is the true
environment reward. Decision steps are 0-indexed. Distributed schedules
activate at steps N, 2N, ... (never step 0, so a clean and a distributed
rollout coincide until the first activation); consecutive schedules activate
a contiguous block of L steps with a uniformly random start.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import TriggerSpec, inject_trigger
from .envs import Env
from .util import child_seed

MODES = ("none", "distributed", "consecutive")


@dataclass
class TriggerSchedule:
    mode: str
    param: int | None
    steps: frozenset[int]

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown schedule mode {self.mode!r}")


@dataclass
class EvalConfig:
    episodes: int = 10
    distributed: tuple[int, ...] = (10, 20, 50)
    consecutive: tuple[int, ...] = (5, 10, 20)
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("need at least one episode per setting")
        if any(n < 1 for n in self.distributed) or any(l < 1 for l in self.consecutive):
            raise ValueError("all distributed periods and consecutive lengths must be >= 1")
        self.distributed = tuple(self.distributed)
        self.consecutive = tuple(self.consecutive)


@dataclass
class SettingResult:
    mode: str
    param: int | None
    mean: float
    std: float
    episodes: int
    rewards: list[float]

    @property
    def label(self) -> str:
        return "clean" if self.mode == "none" else f"{self.mode}-{self.param}"


@dataclass
class EvalReport:
    env: str
    settings: list[SettingResult]
    victim_fingerprint: str = ""
    dataset_hash: str = ""
    meta: dict = field(default_factory=dict)

    def setting(self, mode: str, param: int | None = None) -> SettingResult:
        for s in self.settings:
            if s.mode == mode and s.param == param:
                return s
        raise KeyError(f"no setting {mode}-{param} in report")

    def to_json(self) -> dict:
        return {
            "env": self.env,
            "victim_fingerprint": self.victim_fingerprint,
            "dataset_hash": self.dataset_hash,
            "meta": self.meta,
            "settings": [
                {
                    "mode": s.mode,
                    "param": s.param,
                    "mean": s.mean,
                    "std": s.std,
                    "episodes": s.episodes,
                    "rewards": s.rewards,
                }
                for s in self.settings
            ],
        }

    @staticmethod
    def from_json(d: dict) -> "EvalReport":
        return EvalReport(
            env=d["env"],
            settings=[
                SettingResult(
                    mode=s["mode"],
                    param=s["param"],
                    mean=float(s["mean"]),
                    std=float(s["std"]),
                    episodes=int(s["episodes"]),
                    rewards=[float(r) for r in s["rewards"]],
                )
                for s in d["settings"]
            ],
            victim_fingerprint=d.get("victim_fingerprint", ""),
            dataset_hash=d.get("dataset_hash", ""),
            meta=d.get("meta", {}),
        )


def make_schedule(mode: str, param: int | None, episode_len: int, seed: int) -> TriggerSchedule:
    """Resolve activation timesteps for one episode of the given length."""
    if mode == "none":
        return TriggerSchedule(mode="none", param=None, steps=frozenset())
    if param is None or param < 1:
        raise ValueError(f"{mode} schedule needs a positive parameter")
    if mode == "distributed":
        steps = frozenset(t for t in range(param, episode_len, param))
        return TriggerSchedule(mode=mode, param=param, steps=steps)
    if mode == "consecutive":
        if param > episode_len:
            raise ValueError(f"burst length {param} exceeds episode length {episode_len}")
        rng = np.random.default_rng(seed)
        start = int(rng.integers(0, episode_len - param + 1))
        return TriggerSchedule(mode=mode, param=param, steps=frozenset(range(start, start + param)))
    raise ValueError(f"unknown schedule mode {mode!r}")


def run_episode(
    env: Env,
    policy,
    trigger: TriggerSpec | None,
    schedule: TriggerSchedule,
    seed: int,
) -> float:
    """Roll one episode; returns the true cumulative environment reward."""
    state, obs = env.reset(seed)
    total = 0.0
    t = 0
    done = False
    while not done:
        seen = obs
        if trigger is not None and t in schedule.steps:
            seen = inject_trigger(obs, trigger)
        action = policy.act(seen)
        state, obs, reward, done = env.step(state, np.asarray(action, dtype=np.float64))
        total += float(reward)
        t += 1
    return total


def evaluate(victim, env: Env, trigger: TriggerSpec | None, cfg: EvalConfig) -> EvalReport:
    """Clean setting plus every configured activation setting.

    Episode seeds are shared across settings, so trajectories are identical
    until the first activation diverges them. Without a trigger only the
    clean setting runs.
    """
    policy = getattr(victim, "policy", victim)
    settings: list[tuple[str, int | None]] = [("none", None)]
    if trigger is not None:
        settings += [("distributed", n) for n in cfg.distributed]
        settings += [("consecutive", l) for l in cfg.consecutive]

    results = []
    episode_len = env.spec.max_episode_len
    for mode, param in settings:
        rewards = []
        for j in range(cfg.episodes):
            schedule = make_schedule(mode, param, episode_len, child_seed(cfg.seed, "schedule", mode, param, j))
            env_seed = child_seed(cfg.seed, "episode", j)
            rewards.append(run_episode(env, policy, trigger, schedule, env_seed))
        arr = np.asarray(rewards, dtype=np.float64)
        results.append(
            SettingResult(
                mode=mode,
                param=param,
                mean=float(arr.mean()),
                std=float(arr.std()),
                episodes=cfg.episodes,
                rewards=[float(r) for r in rewards],
            )
        )
    return EvalReport(
        env=env.spec.name,
        settings=results,
        victim_fingerprint=getattr(victim, "config_fingerprint", ""),
        dataset_hash=getattr(victim, "dataset_hash", ""),
    )


def report_to_csv(report: EvalReport, path: str | Path) -> None:
    """One row per setting: mode, param, mean, std, episode count."""
    lines = ["setting,param,mean,std,episodes"]
    for s in report.settings:
        param = "" if s.param is None else str(s.param)
        lines.append(f"{s.mode},{param},{s.mean:.6f},{s.std:.6f},{s.episodes}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def report_to_json(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_report_json(path: str | Path) -> EvalReport:
    with open(path, "r", encoding="utf-8") as f:
        return EvalReport.from_json(json.load(f))


def report_to_markdown(reports: dict[str, EvalReport]) -> str:
    """Comparison table: one row per setting, one column per named variant."""
    if not reports:
        raise ValueError("nothing to report")
    names = list(reports)
    row_keys: list[tuple[str, int | None]] = []
    for rep in reports.values():
        for s in rep.settings:
            if (s.mode, s.param) not in row_keys:
                row_keys.append((s.mode, s.param))

    def cell(rep: EvalReport, key) -> str:
        for s in rep.settings:
            if (s.mode, s.param) == key:
                return f"{s.mean:.1f} ± {s.std:.1f}"
        return "/"

    lines = ["| Setting | " + " | ".join(names) + " |", "|---" * (len(names) + 1) + "|"]
    for key in row_keys:
        label = "Clean" if key[0] == "none" else f"{key[0].capitalize()}-{key[1]}"
        lines.append("| " + label + " | " + " | ".join(cell(reports[n], key) for n in names) + " |")
    return "\n".join(lines) + "\n"

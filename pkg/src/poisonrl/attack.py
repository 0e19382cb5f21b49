"""Poisoning engine: trigger construction, critical-sample selection,
gradient-guided worst-action search, reward relabeling, patch assembly.

The full attack runs in three phases: pick the trigger dimension and value
from dataset statistics, rank transitions by TD score and take the budgeted
slice, then rewrite each selected row as (triggered state, worst action,
relabeled reward) while leaving its next-state and done flag untouched.
Baseline variants (random selection, median-value trigger, inverted-loss
action search) share the same code paths and differ only in configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .dataset import Dataset, DatasetStats, DEFAULT_PERCENTILES, PatchSet, Transition, apply_patch, compute_stats
from .nets import mlp_forward, mlp_gradients
from .proxy import QNetwork, td_errors, TdScores
from .util import child_seed, fingerprint


class BudgetError(ValueError):
    """Poisoning budget rounds to zero rows."""


class ProxyMismatchError(ValueError):
    """Proxy critic was trained on a different dataset than the poison target."""


@dataclass
class TriggerSpec:
    """Backdoor key: one state dimension pinned to a percentile value."""

    dim: int
    value: float
    percentile: float
    scores: np.ndarray  # per-dimension mean |off-diagonal correlation|

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "value": self.value,
            "percentile": self.percentile,
            "scores": [float(s) for s in self.scores],
        }


@dataclass
class SelectionSpec:
    strategy: str = "td-top"  # td-top | td-window | random
    budget: float = 0.05
    window: tuple[float, float] | None = None  # [lo%, hi%) of the descending TD order
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("td-top", "td-window", "random"):
            raise ValueError(f"unknown selection strategy {self.strategy!r}")
        if not (0.0 < self.budget <= 1.0):
            raise ValueError("budget must lie in (0, 1]")
        if self.strategy == "td-window":
            if self.window is None:
                raise ValueError("td-window selection needs window bounds")
            lo, hi = self.window
            if not (0.0 <= lo < hi <= 100.0):
                raise ValueError("window bounds must satisfy 0 <= lo < hi <= 100")
            if abs((hi - lo) / 100.0 - self.budget) > 1e-9:
                raise ValueError("window width must equal the budget: (hi - lo)/100 == budget")


@dataclass
class ActionGenSpec:
    strategy: str = "gradient"  # gradient | inverted-loss | random
    step_size: float = 0.05
    max_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("gradient", "inverted-loss", "random"):
            raise ValueError(f"unknown action strategy {self.strategy!r}")
        if self.step_size <= 0.0:
            raise ValueError("step_size must be > 0")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class PoisonConfig:
    selection: SelectionSpec = field(default_factory=SelectionSpec)
    trigger_strategy: str = "correlation"  # correlation | median
    trigger_percentile: float = 95.0
    action: ActionGenSpec = field(default_factory=ActionGenSpec)
    reward_strategy: str = "percentile"  # percentile | max
    reward_percentile: float = 75.0
    corr_aggregate: str = "mean"  # mean | max over |R[k, j]|, j != k
    seed: int = 0

    def __post_init__(self):
        if self.trigger_strategy not in ("correlation", "median"):
            raise ValueError(f"unknown trigger strategy {self.trigger_strategy!r}")
        if self.reward_strategy not in ("percentile", "max"):
            raise ValueError(f"unknown reward strategy {self.reward_strategy!r}")
        if self.corr_aggregate not in ("mean", "max"):
            raise ValueError(f"unknown correlation aggregate {self.corr_aggregate!r}")

    def effective_trigger_percentile(self) -> float:
        # The median baseline is a config-only change: same selection of the
        # trigger dimension, value taken at the 50th percentile instead.
        return 50.0 if self.trigger_strategy == "median" else self.trigger_percentile

    def fingerprint(self) -> str:
        return fingerprint(asdict(self))


@dataclass
class PoisonRow:
    index: int
    action_before: np.ndarray
    action_after: np.ndarray
    delta_q: float


@dataclass
class PoisonReport:
    """Attacker-side audit trail; never consumed by victim training."""

    trigger: TriggerSpec
    indices: np.ndarray
    rows: list[PoisonRow]
    r_target: float
    config_fingerprint: str
    hash_before: str
    hash_after: str

    def to_json(self) -> dict:
        return {
            "trigger": self.trigger.to_json(),
            "indices": [int(i) for i in self.indices],
            "rows": [
                {
                    "index": int(r.index),
                    "action_before": [float(v) for v in r.action_before],
                    "action_after": [float(v) for v in r.action_after],
                    "delta_q": float(r.delta_q),
                }
                for r in self.rows
            ],
            "r_target": self.r_target,
            "config_fingerprint": self.config_fingerprint,
            "hash_before": self.hash_before,
            "hash_after": self.hash_after,
        }


def save_report(report: PoisonReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def generate_trigger(stats: DatasetStats, percentile: float = 95.0, aggregate: str = "mean") -> TriggerSpec:
    """Pick the most-correlated state dimension and pin it to a percentile value.

    Dimension score is the mean (or max) absolute off-diagonal correlation;
    ties resolve to the lowest index. The injected value is the nearest-rank
    percentile of that dimension, so it is always a value the dataset
    actually contains.
    """
    d = stats.corr.shape[0]
    if d < 2:
        raise ValueError("trigger selection needs at least 2 state dimensions (no correlated peer exists)")
    abs_r = np.abs(stats.corr.copy())
    np.fill_diagonal(abs_r, 0.0)
    if aggregate == "mean":
        scores = abs_r.sum(axis=1) / (d - 1)
    elif aggregate == "max":
        scores = abs_r.max(axis=1)
    else:
        raise ValueError(f"unknown aggregate {aggregate!r}")
    k = int(np.argmax(scores))  # argmax returns the first (lowest) index on ties
    return TriggerSpec(dim=k, value=stats.state_percentile(k, percentile), percentile=float(percentile), scores=scores)


def inject_trigger(s: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Copy of ``s`` with the trigger dimension replaced; input untouched."""
    s = np.asarray(s)
    if trigger.dim >= s.shape[-1]:
        raise IndexError(f"trigger dim {trigger.dim} out of range for state of size {s.shape[-1]}")
    out = s.copy()
    out[..., trigger.dim] = trigger.value
    return out


def select_critical(scores: TdScores | np.ndarray, spec: SelectionSpec) -> np.ndarray:
    """Indices of the rows to poison, sorted ascending.

    td-top takes the floor(budget*N) largest scores; td-window takes the same
    count starting at rank floor(lo/100*N) of the descending order; random
    samples uniformly without replacement. Score ties always resolve in favor
    of the lower index.
    """
    values = scores.values if isinstance(scores, TdScores) else np.asarray(scores, dtype=np.float64)
    n = values.shape[0]
    if n < 1:
        raise ValueError("scores must be non-empty")
    m = int(spec.budget * n)
    if m == 0:
        raise BudgetError(f"budget rounds to zero: floor({spec.budget} * {n}) = 0")
    if spec.strategy == "random":
        rng = np.random.default_rng(child_seed(spec.seed, "random-selection"))
        picked = rng.choice(n, size=m, replace=False)
        return np.sort(picked)
    order = np.argsort(-values, kind="stable")  # stable: equal scores keep index order
    if spec.strategy == "td-top":
        start = 0
    else:
        lo, _ = spec.window
        start = int(lo / 100.0 * n)
        if start + m > n:
            raise ValueError(f"window [{lo}%, ...) with budget {spec.budget} exceeds N={n}")
    return np.sort(order[start:start + m])


def _check_bounds(a: np.ndarray, low: np.ndarray, high: np.ndarray) -> None:
    if np.any(a < low) or np.any(a > high):
        raise ValueError(f"action {a} outside bounds [{low}, {high}]")


def worst_action(
    q: QNetwork,
    s_trig: np.ndarray,
    a0: np.ndarray,
    spec: ActionGenSpec,
    bounds: tuple[np.ndarray, np.ndarray],
) -> np.ndarray:
    """Search for a low-value action at the triggered state.

    gradient: projected descent on Q's action gradient, accepting a step only
    if Q strictly decreases; stops early otherwise. The step budget bounds the
    distance from the seed action, keeping the result near the data manifold.
    inverted-loss: the unconstrained baseline; same descent direction but no
    accept rule and a 4x step budget, still projected into the action box.
    random: uniform draw inside the bounds.
    """
    low, high = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    a = np.asarray(a0, dtype=np.float64).copy()
    _check_bounds(a, low, high)
    s = np.asarray(s_trig, dtype=np.float64)

    if spec.strategy == "random":
        rng = np.random.default_rng(child_seed(spec.seed, "random-action"))
        return rng.uniform(low, high)

    if spec.strategy == "inverted-loss":
        for _ in range(4 * spec.max_steps):
            g = q.action_gradient(s, a)
            a = np.clip(a - spec.step_size * g, low, high)
        return a

    out, _, _ = _gradient_descent_batch(q, s[None, :], a[None, :], spec, low, high)
    return out[0]


def _gradient_descent_batch(
    q: QNetwork,
    s_trig: np.ndarray,
    a0: np.ndarray,
    spec: ActionGenSpec,
    low: np.ndarray,
    high: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Accept-rule descent over a batch of rows.

    Returns ``(actions, q_start, q_final)`` where the final values are the
    ones the accept rule itself compared against, so ``q_final <= q_start``
    holds exactly for every row.
    """
    m = s_trig.shape[0]
    s64 = q.norm.apply(s_trig.astype(np.float64))
    a = a0.astype(np.float64).copy()
    q_cur = mlp_forward(q.params, np.concatenate([s64, a], axis=1))[:, 0]
    q_start = q_cur.copy()
    active = np.ones(m, dtype=bool)
    for _ in range(spec.max_steps):
        if not np.any(active):
            break
        xs = np.concatenate([s64[active], a[active]], axis=1)
        _, dx = mlp_gradients(q.params, xs, np.ones((xs.shape[0], 1)))
        candidate = np.clip(a[active] - spec.step_size * dx[:, q.state_dim:], low, high)
        q_new = mlp_forward(q.params, np.concatenate([s64[active], candidate], axis=1))[:, 0]
        accept = q_new < q_cur[active]
        rows = np.flatnonzero(active)
        a[rows[accept]] = candidate[accept]
        q_cur[rows[accept]] = q_new[accept]
        active[rows[~accept]] = False
    return a, q_start, q_cur


def relabel_reward(stats: DatasetStats, strategy: str, percentile: float = 75.0) -> float:
    """Target reward for poisoned rows: a reward percentile or the dataset max."""
    if strategy == "percentile":
        return stats.reward_percentile(percentile)
    if strategy == "max":
        return stats.reward_max
    raise ValueError(f"unknown reward strategy {strategy!r}")


def poison(dataset: Dataset, q_proxy: QNetwork, cfg: PoisonConfig) -> tuple[Dataset, PoisonReport]:
    """Run the full attack; returns the poisoned dataset and its audit trail.

    Selected rows get the triggered state, a worst-case action seeded from the
    row's own action, and the relabeled reward; next-state and done flag stay
    bit-identical. The proxy must have been trained on this exact dataset.
    """
    if q_proxy.dataset_hash != dataset.content_hash():
        raise ProxyMismatchError(
            f"proxy trained on {q_proxy.dataset_hash}, poisoning target is {dataset.content_hash()}"
        )
    needed = sorted({*DEFAULT_PERCENTILES, float(cfg.effective_trigger_percentile()), float(cfg.reward_percentile)})
    stats = compute_stats(dataset, tuple(needed))
    trigger = generate_trigger(stats, cfg.effective_trigger_percentile(), cfg.corr_aggregate)
    r_target = relabel_reward(stats, cfg.reward_strategy, cfg.reward_percentile)
    scores = td_errors(dataset, q_proxy, q_proxy.config)
    indices = select_critical(scores, cfg.selection)

    low, high = dataset.env.action_low, dataset.env.action_high
    s_trig = inject_trigger(dataset.states[indices].astype(np.float64), trigger)
    a_orig = dataset.actions[indices].astype(np.float64)
    for j in range(a_orig.shape[0]):
        _check_bounds(a_orig[j], low, high)

    if cfg.action.strategy == "gradient":
        a_new, q_before, q_after = _gradient_descent_batch(q_proxy, s_trig, a_orig, cfg.action, low, high)
        delta_q = q_after - q_before
    else:
        a_new = np.empty_like(a_orig)
        for j, i in enumerate(indices):
            row_spec = replace(cfg.action, seed=child_seed(cfg.action.seed, "row", int(i)))
            a_new[j] = worst_action(q_proxy, s_trig[j], a_orig[j], row_spec, (low, high))
        delta_q = np.asarray(q_proxy.value(s_trig, a_new)) - np.asarray(q_proxy.value(s_trig, a_orig))

    entries = []
    rows = []
    for j, i in enumerate(indices):
        orig = dataset.row(int(i))
        entries.append(
            (
                int(i),
                Transition(
                    s=s_trig[j].astype(np.float32),
                    a=a_new[j].astype(np.float32),
                    r=r_target,
                    s_next=orig.s_next,
                    done=orig.done,
                ),
            )
        )
        rows.append(PoisonRow(index=int(i), action_before=a_orig[j], action_after=a_new[j], delta_q=float(delta_q[j])))

    poisoned = apply_patch(dataset, PatchSet(entries))
    report = PoisonReport(
        trigger=trigger,
        indices=indices,
        rows=rows,
        r_target=float(r_target),
        config_fingerprint=cfg.fingerprint(),
        hash_before=dataset.content_hash(),
        hash_after=poisoned.content_hash(),
    )
    return poisoned, report

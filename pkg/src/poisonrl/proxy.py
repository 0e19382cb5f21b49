"""Attacker-side critic: fitted Q-iteration on clean data and TD scoring.

The critic maps ``concat(s, a)`` to a scalar. Training regresses each batch
onto bootstrapped targets from a periodically synced target copy; the max
over next actions is approximated by the best of K candidate actions drawn
from the dataset's own action column (plus the zero action), which keeps the
bootstrap in-support for continuous control.

Per-transition scores are the absolute Bellman residuals. Terminal rows mask
the bootstrap term, so their score is just ``|r - Q(s, a)|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .envs import return_bounds
from .nets import (
    MlpParams,
    ObsNorm,
    TrainingDivergedError,
    load_bundle,
    mlp_forward,
    mlp_gradients,
    mlp_init,
    optim_init,
    optim_step,
    save_bundle,
)
from .util import child_seed, fingerprint

DEFAULT_HIDDEN = (64, 64)


@dataclass
class ProxyConfig:
    gamma: float = 0.9
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    target_sync: int = 5
    num_candidates: int = 16
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.num_candidates < 1:
            raise ValueError("need at least one candidate action")
        self.hidden = tuple(self.hidden)

    def fingerprint(self) -> str:
        return fingerprint(asdict(self))


@dataclass
class QNetwork:
    """Trained critic over concat(s, a), tagged with its training provenance.

    States are standardized (per the norm fitted on the training dataset)
    before entering the net; actions pass through raw.
    """

    params: MlpParams
    state_dim: int
    action_dim: int
    dataset_hash: str
    config: ProxyConfig
    norm: ObsNorm = None
    loss_log: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.norm is None:
            self.norm = ObsNorm.identity(self.state_dim)

    def value(self, s: np.ndarray, a: np.ndarray) -> np.ndarray | float:
        s = self.norm.apply(np.asarray(s, dtype=np.float64))
        a = np.asarray(a, dtype=np.float64)
        if s.ndim == 1:
            return float(mlp_forward(self.params, np.concatenate([s, a]))[0])
        return mlp_forward(self.params, np.concatenate([s, a], axis=1))[:, 0]

    def action_gradient(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Gradient of Q(s, a) with respect to the action coordinates."""
        sn = self.norm.apply(np.asarray(s, dtype=np.float64))
        x = np.concatenate([sn, np.asarray(a, dtype=np.float64)])
        _, dx = mlp_gradients(self.params, x, np.array([1.0]))
        return dx[self.state_dim:]


@dataclass
class TdScores:
    """Absolute Bellman residual per transition."""

    values: np.ndarray
    dataset_hash: str
    config_fingerprint: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0.0):
            raise ValueError("TD scores must be finite and non-negative")


def _candidate_actions(dataset: Dataset, cfg: ProxyConfig, rng: np.random.Generator) -> np.ndarray:
    """K candidates: K-1 rows drawn from the dataset's actions plus zero."""
    zero = np.zeros((1, dataset.env.action_dim))
    if cfg.num_candidates == 1:
        return zero
    idx = rng.integers(0, dataset.n, size=cfg.num_candidates - 1)
    return np.concatenate([dataset.actions[idx].astype(np.float64), zero], axis=0)


def _batched_q(params: MlpParams, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return mlp_forward(params, np.concatenate([s, a], axis=1))[:, 0]


def _max_over_candidates(params: MlpParams, s_next: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """max_k Q(s', cand_k) for a batch of next states against shared candidates."""
    b, k = s_next.shape[0], candidates.shape[0]
    s_rep = np.repeat(s_next, k, axis=0)
    a_rep = np.tile(candidates, (b, 1))
    q = _batched_q(params, s_rep, a_rep).reshape(b, k)
    return q.max(axis=1)


def q_max(q: QNetwork, s_next: np.ndarray, dataset: Dataset, cfg: ProxyConfig) -> float:
    """Approximate max over next actions using seeded dataset candidates."""
    rng = np.random.default_rng(child_seed(cfg.seed, "qmax-candidates"))
    candidates = _candidate_actions(dataset, cfg, rng)
    s = q.norm.apply(np.asarray(s_next, dtype=np.float64))[None, :]
    return float(_max_over_candidates(q.params, s, candidates)[0])


def train_proxy(dataset: Dataset, cfg: ProxyConfig) -> QNetwork:
    """Fitted Q-iteration against a periodically synced target copy.

    Runs a fixed epoch budget (the "converged" criterion at desk scale) with
    a divergence guard; per-epoch mean losses are logged on the returned
    network.
    """
    spec = dataset.env
    in_dim = spec.state_dim + spec.action_dim
    params = mlp_init((in_dim, *cfg.hidden, 1), child_seed(cfg.seed, "proxy-init"))
    target = params.copy()
    opt = optim_init(params, "adam", cfg.lr)
    rng = np.random.default_rng(child_seed(cfg.seed, "proxy-train"))

    norm = ObsNorm.fit(dataset.states)
    s32 = norm.apply(dataset.states).astype(np.float32)
    sn32 = norm.apply(dataset.next_states).astype(np.float32)
    a32, r32 = dataset.actions, dataset.rewards
    not_done = (~dataset.dones).astype(np.float32)

    # One candidate set for the whole run, drawn exactly like the scoring
    # path: keeps the bootstrap target deterministic between target syncs.
    cand_rng = np.random.default_rng(child_seed(cfg.seed, "qmax-candidates"))
    candidates = _candidate_actions(dataset, cfg, cand_rng).astype(np.float32)

    # The true fixed point lies inside the feasible return range; clamping
    # the bootstrap there stops candidate-max overestimation from feeding
    # back through target syncs.
    v_lo, v_hi = return_bounds(spec.reward_range, cfg.gamma)

    loss_log: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(dataset.n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, dataset.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            boot = np.clip(_max_over_candidates(target, sn32[idx], candidates), v_lo, v_hi)
            targets = r32[idx] + cfg.gamma * not_done[idx] * boot
            x = np.concatenate([s32[idx], a32[idx]], axis=1)
            pred = mlp_forward(params, x)[:, 0]
            err = pred - targets
            loss = float(np.mean(err ** 2, dtype=np.float64))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"proxy training diverged at epoch {epoch} (loss={loss}); lower the learning rate"
                )
            upstream = (2.0 * err / idx.size)[:, None]
            grads, _ = mlp_gradients(params, x, upstream)
            optim_step(opt, params, grads)
            if opt.step % cfg.target_sync == 0:
                target = params.copy()
            epoch_loss += loss
            n_batches += 1
        loss_log.append(epoch_loss / max(n_batches, 1))

    return QNetwork(
        params=params,
        state_dim=spec.state_dim,
        action_dim=spec.action_dim,
        dataset_hash=dataset.content_hash(),
        config=cfg,
        norm=norm,
        loss_log=loss_log,
    )


def td_errors(dataset: Dataset, q: QNetwork, cfg: ProxyConfig) -> TdScores:
    """Absolute TD residual for every transition, bootstrap masked on done rows."""
    rng = np.random.default_rng(child_seed(cfg.seed, "qmax-candidates"))
    candidates = _candidate_actions(dataset, cfg, rng)
    s64 = q.norm.apply(dataset.states.astype(np.float64))
    a64 = dataset.actions.astype(np.float64)
    r64 = dataset.rewards.astype(np.float64)
    q_sa = _batched_q(q.params, s64, a64)
    delta = r64 - q_sa
    alive = ~dataset.dones
    if np.any(alive):
        boot = _max_over_candidates(q.params, q.norm.apply(dataset.next_states[alive].astype(np.float64)), candidates)
        delta[alive] += cfg.gamma * boot
    return TdScores(values=np.abs(delta), dataset_hash=dataset.content_hash(), config_fingerprint=cfg.fingerprint())


def save_proxy(q: QNetwork, path: str | Path) -> None:
    meta = {
        "kind": "proxy-critic",
        "state_dim": q.state_dim,
        "action_dim": q.action_dim,
        "dataset_hash": q.dataset_hash,
        "config": asdict(q.config),
        "norm": q.norm.to_json(),
        "loss_log": [float(v) for v in q.loss_log],
    }
    save_bundle(path, meta, {"critic": q.params})


def load_proxy(path: str | Path) -> QNetwork:
    meta, nets = load_bundle(path)
    if meta.get("kind") != "proxy-critic":
        raise ValueError(f"{path}: not a proxy critic bundle")
    cfg_dict = dict(meta["config"])
    cfg_dict["hidden"] = tuple(cfg_dict["hidden"])
    return QNetwork(
        params=nets["critic"],
        state_dim=int(meta["state_dim"]),
        action_dim=int(meta["action_dim"]),
        dataset_hash=meta["dataset_hash"],
        config=ProxyConfig(**cfg_dict),
        norm=ObsNorm.from_json(meta["norm"]),
        loss_log=list(meta.get("loss_log", [])),
    )

"""Desk-scale conservative offline RL victims: CQL-like, IQL-like, BCQ-like.

These are deliberately simplified single-critic variants of the named
algorithms (no twin critics, no entropy terms, deterministic actors with
tanh-squashed outputs) sized to train in seconds on the toy environments:

* ``cql``   - fitted actor-critic with a logsumexp penalty pushing down the
  critic at uniformly sampled out-of-dataset actions. ``plain`` is the same
  trainer with the penalty weight forced to zero.
* ``iql``   - expectile-regressed state value, critic bootstrapped through
  the value net (so the critic is never queried at non-dataset actions),
  advantage-weighted regression actor.
* ``bcq``   - behavior-cloning model plus a critic; acting picks the best
  candidate within a box of radius phi around the behavior output.

Victim training reads nothing but the dataset: this module must never import
the attack engine, so a poisoned dataset is indistinguishable from a clean
one here.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .envs import EnvSpec, return_bounds
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

ALGORITHMS = ("cql", "iql", "bcq", "plain")


@dataclass
class VictimConfig:
    algorithm: str = "cql"
    gamma: float = 0.95
    epochs: int = 50
    batch_size: int = 256
    critic_lr: float = 1e-3
    actor_lr: float = 1e-3
    value_lr: float = 1e-3
    cql_alpha: float = 1.0
    cql_samples: int = 8
    iql_expectile: float = 0.7
    iql_beta: float = 3.0
    iql_weight_clip: float = 100.0
    bcq_phi: float = 0.1
    bcq_candidates: int = 10
    hidden: tuple[int, ...] = (64, 64)
    target_sync: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.cql_alpha < 0.0:
            raise ValueError("cql_alpha must be >= 0")
        if not (0.0 < self.iql_expectile < 1.0):
            raise ValueError("iql_expectile must lie in (0, 1)")
        if self.bcq_phi < 0.0:
            raise ValueError("bcq_phi must be >= 0")
        if self.bcq_candidates < 1:
            raise ValueError("bcq_candidates must be >= 1")
        self.hidden = tuple(self.hidden)

    def fingerprint(self) -> str:
        return fingerprint(asdict(self))


# ---------------------------------------------------------------------------
# Squashed deterministic actors
# ---------------------------------------------------------------------------


def squash(y: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    mid = (low + high) / 2.0
    half = (high - low) / 2.0
    return mid + half * np.tanh(y)


def squash_jac(y: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    half = (high - low) / 2.0
    return half * (1.0 - np.tanh(y) ** 2)


class MlpPolicy:
    """Deterministic tanh-squashed actor; outputs always inside the bounds."""

    def __init__(self, params: MlpParams, low: np.ndarray, high: np.ndarray, norm: ObsNorm):
        self.params = params
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        self.norm = norm

    def act(self, obs: np.ndarray) -> np.ndarray:
        y = mlp_forward(self.params, self.norm.apply(np.asarray(obs, dtype=np.float64)))
        return squash(y, self.low, self.high)


class BcqPolicy:
    """Behavior-constrained policy: best-of-candidates around the cloned action.

    Candidate offsets are drawn once at construction, so acting is a pure
    deterministic function of the observation.
    """

    def __init__(self, behavior: MlpParams, critic: MlpParams, low, high, phi: float, n_candidates: int, seed: int,
                 norm: ObsNorm):
        self.behavior = behavior
        self.critic = critic
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        self.norm = norm
        self.phi = float(phi)
        rng = np.random.default_rng(child_seed(seed, "bcq-act-offsets"))
        dim = self.low.shape[0]
        offsets = rng.uniform(-self.phi, self.phi, size=(n_candidates - 1, dim)) if n_candidates > 1 else np.zeros((0, dim))
        self.offsets = np.concatenate([np.zeros((1, dim)), offsets], axis=0)

    def act(self, obs: np.ndarray) -> np.ndarray:
        sn = self.norm.apply(np.asarray(obs, dtype=np.float64))
        base = squash(mlp_forward(self.behavior, sn), self.low, self.high)
        cands = np.clip(base[None, :] + self.offsets, self.low, self.high)
        x = np.concatenate([np.tile(sn, (cands.shape[0], 1)), cands], axis=1)
        q = mlp_forward(self.critic, x)[:, 0]
        return cands[int(np.argmax(q))]


@dataclass
class TrainedVictim:
    policy: object
    actor: MlpParams | None
    critic: MlpParams | None
    value: MlpParams | None
    behavior: MlpParams | None
    norm: ObsNorm
    curve: list[dict]
    config: VictimConfig
    config_fingerprint: str
    dataset_hash: str
    env: EnvSpec
    diagnostics: dict = field(default_factory=dict)


def expectile_loss(u: np.ndarray, tau: float) -> float:
    """Asymmetric squared loss: weight tau above zero, (1 - tau) below."""
    w = np.where(u < 0.0, 1.0 - tau, tau)
    return float(np.mean(w * u ** 2))


def _columns32(dataset: Dataset, norm: ObsNorm):
    """Training views: float32 hot path; losses still reduce in float64."""
    return (
        norm.apply(dataset.states).astype(np.float32),
        dataset.actions,
        dataset.rewards,
        norm.apply(dataset.next_states).astype(np.float32),
        (~dataset.dones).astype(np.float32),
    )


def _guard(loss: float, what: str, epoch: int) -> None:
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"{what} loss diverged at epoch {epoch}; lower the learning rate")


def _critic_eval(params: MlpParams, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return mlp_forward(params, np.concatenate([s, a], axis=1))[:, 0]


def train_victim(dataset: Dataset, cfg: VictimConfig) -> TrainedVictim:
    """Dispatch to the configured trainer. ``plain`` is cql with alpha = 0."""
    if cfg.algorithm in ("cql", "plain"):
        return _train_cql(dataset, cfg)
    if cfg.algorithm == "iql":
        return _train_iql(dataset, cfg)
    return _train_bcq(dataset, cfg)


def train_cql(dataset: Dataset, cfg: VictimConfig) -> TrainedVictim:
    if cfg.algorithm not in ("cql", "plain"):
        raise ValueError("train_cql requires a cql/plain config")
    return _train_cql(dataset, cfg)


def train_iql(dataset: Dataset, cfg: VictimConfig) -> TrainedVictim:
    if cfg.algorithm != "iql":
        raise ValueError("train_iql requires an iql config")
    return _train_iql(dataset, cfg)


def train_bcq(dataset: Dataset, cfg: VictimConfig) -> TrainedVictim:
    if cfg.algorithm != "bcq":
        raise ValueError("train_bcq requires a bcq config")
    return _train_bcq(dataset, cfg)


def _train_cql(dataset: Dataset, cfg: VictimConfig) -> TrainedVictim:
    spec = dataset.env
    s_dim, a_dim = spec.state_dim, spec.action_dim
    low, high = spec.action_low, spec.action_high
    alpha = 0.0 if cfg.algorithm == "plain" else cfg.cql_alpha
    l32, h32 = low.astype(np.float32), high.astype(np.float32)
    v_lo, v_hi = return_bounds(spec.reward_range, cfg.gamma)

    critic = mlp_init((s_dim + a_dim, *cfg.hidden, 1), child_seed(cfg.seed, "critic-init"))
    actor = mlp_init((s_dim, *cfg.hidden, a_dim), child_seed(cfg.seed, "actor-init"))
    critic_t, actor_t = critic.copy(), actor.copy()
    opt_c = optim_init(critic, "adam", cfg.critic_lr)
    opt_a = optim_init(actor, "adam", cfg.actor_lr)
    rng = np.random.default_rng(child_seed(cfg.seed, "train"))

    norm = ObsNorm.fit(dataset.states)
    s32, a32, r32, sn32, alive = _columns32(dataset, norm)
    curve: list[dict] = []
    ood_queries = 0
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(dataset.n)
        sums = {"critic": 0.0, "actor": 0.0, "penalty": 0.0}
        n_batches = 0
        for start in range(0, dataset.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = idx.size
            s, a, r, sn = s32[idx], a32[idx], r32[idx], sn32[idx]

            # critic: TD toward target actor's action at s'
            an = squash(mlp_forward(actor_t, sn), l32, h32)
            boot = np.clip(_critic_eval(critic_t, sn, an), v_lo, v_hi)
            targets = r + cfg.gamma * alive[idx] * boot
            ood_queries += b  # target critic queried at actor-proposed actions
            q_data = _critic_eval(critic, s, a)
            err = q_data - targets
            td_loss = float(np.mean(err ** 2, dtype=np.float64))

            penalty = 0.0
            if alpha > 0.0:
                m = cfg.cql_samples
                rand_a = rng.uniform(low, high, size=(b, m, a_dim)).astype(np.float32)
                x_rand = np.concatenate(
                    [np.repeat(s, m, axis=0), rand_a.reshape(b * m, a_dim)], axis=1
                )
                q_rand = mlp_forward(critic, x_rand)[:, 0].reshape(b, m)
                ood_queries += b * m
                zmax = q_rand.max(axis=1, keepdims=True)
                lse = zmax[:, 0] + np.log(np.exp(q_rand - zmax).sum(axis=1))
                penalty = float(np.mean(lse - q_data, dtype=np.float64))
                soft = np.exp(q_rand - zmax)
                soft /= soft.sum(axis=1, keepdims=True)
                up_rand = (alpha / b) * soft.reshape(b * m, 1)
                up_data = (2.0 * err / b - alpha / b)[:, None]
                x_all = np.concatenate([np.concatenate([s, a], axis=1), x_rand], axis=0)
                up_all = np.concatenate([up_data, up_rand], axis=0)
                grads, _ = mlp_gradients(critic, x_all, up_all)
            else:
                grads, _ = mlp_gradients(critic, np.concatenate([s, a], axis=1), (2.0 * err / b)[:, None])
            loss_c = td_loss + alpha * penalty
            _guard(loss_c, "cql critic", epoch)
            optim_step(opt_c, critic, grads)

            # actor: ascend the critic at dataset states
            y = mlp_forward(actor, s)
            a_act = squash(y, l32, h32)
            x_act = np.concatenate([s, a_act], axis=1)
            q_act = mlp_forward(critic, x_act)[:, 0]
            ood_queries += b
            _, dx = mlp_gradients(critic, x_act, np.full((b, 1), -1.0 / b))
            up_actor = dx[:, s_dim:] * squash_jac(y, l32, h32)
            a_grads, _ = mlp_gradients(actor, s, up_actor)
            loss_a = float(-np.mean(q_act, dtype=np.float64))
            _guard(loss_a, "cql actor", epoch)
            optim_step(opt_a, actor, a_grads)

            steps += 1
            if steps % cfg.target_sync == 0:
                critic_t, actor_t = critic.copy(), actor.copy()
            sums["critic"] += td_loss
            sums["actor"] += loss_a
            sums["penalty"] += penalty
            n_batches += 1
        curve.append({"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}})

    return TrainedVictim(
        policy=MlpPolicy(actor, low, high, norm),
        actor=actor,
        critic=critic,
        value=None,
        behavior=None,
        norm=norm,
        curve=curve,
        config=cfg,
        config_fingerprint=cfg.fingerprint(),
        dataset_hash=dataset.content_hash(),
        env=spec,
        diagnostics={"ood_action_queries": ood_queries},
    )


def _train_iql(dataset: Dataset, cfg: VictimConfig) -> TrainedVictim:
    spec = dataset.env
    s_dim = spec.state_dim
    low, high = spec.action_low, spec.action_high
    tau = cfg.iql_expectile
    l32, h32 = low.astype(np.float32), high.astype(np.float32)
    v_lo, v_hi = return_bounds(spec.reward_range, cfg.gamma)

    critic = mlp_init((s_dim + spec.action_dim, *cfg.hidden, 1), child_seed(cfg.seed, "critic-init"))
    value = mlp_init((s_dim, *cfg.hidden, 1), child_seed(cfg.seed, "value-init"))
    actor = mlp_init((s_dim, *cfg.hidden, spec.action_dim), child_seed(cfg.seed, "actor-init"))
    critic_t = critic.copy()
    opt_c = optim_init(critic, "adam", cfg.critic_lr)
    opt_v = optim_init(value, "adam", cfg.value_lr)
    opt_a = optim_init(actor, "adam", cfg.actor_lr)
    rng = np.random.default_rng(child_seed(cfg.seed, "train"))

    norm = ObsNorm.fit(dataset.states)
    s32, a32, r32, sn32, alive = _columns32(dataset, norm)
    curve: list[dict] = []
    ood_queries = 0  # critic is only ever evaluated at dataset actions
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(dataset.n)
        sums = {"critic": 0.0, "value": 0.0, "actor": 0.0}
        n_batches = 0
        for start in range(0, dataset.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = idx.size
            s, a, r, sn = s32[idx], a32[idx], r32[idx], sn32[idx]

            # value: expectile regression of target-critic values
            q_t = _critic_eval(critic_t, s, a)
            v = mlp_forward(value, s)[:, 0]
            u = q_t - v
            w = np.where(u < 0.0, 1.0 - tau, tau)
            loss_v = float(np.mean(w * u ** 2, dtype=np.float64))
            _guard(loss_v, "iql value", epoch)
            v_grads, _ = mlp_gradients(value, s, (-2.0 * w * u / b)[:, None])
            optim_step(opt_v, value, v_grads)

            # critic: TD through the value net (never queries unseen actions)
            targets = r + cfg.gamma * alive[idx] * np.clip(mlp_forward(value, sn)[:, 0], v_lo, v_hi)
            q = _critic_eval(critic, s, a)
            err = q - targets
            loss_c = float(np.mean(err ** 2, dtype=np.float64))
            _guard(loss_c, "iql critic", epoch)
            c_grads, _ = mlp_gradients(critic, np.concatenate([s, a], axis=1), (2.0 * err / b)[:, None])
            optim_step(opt_c, critic, c_grads)

            # actor: advantage-weighted regression onto dataset actions
            adv = q_t - v
            weights = np.minimum(np.exp(cfg.iql_beta * adv), cfg.iql_weight_clip)
            y = mlp_forward(actor, s)
            a_act = squash(y, l32, h32)
            diff = a_act - a
            loss_a = float(np.mean(weights[:, None] * diff ** 2, dtype=np.float64))
            _guard(loss_a, "iql actor", epoch)
            up = (2.0 * weights[:, None] * diff / (b * diff.shape[1])) * squash_jac(y, l32, h32)
            a_grads, _ = mlp_gradients(actor, s, up)
            optim_step(opt_a, actor, a_grads)

            steps += 1
            if steps % cfg.target_sync == 0:
                critic_t = critic.copy()
            sums["critic"] += loss_c
            sums["value"] += loss_v
            sums["actor"] += loss_a
            n_batches += 1
        curve.append({"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}})

    return TrainedVictim(
        policy=MlpPolicy(actor, low, high, norm),
        actor=actor,
        critic=critic,
        value=value,
        behavior=None,
        norm=norm,
        curve=curve,
        config=cfg,
        config_fingerprint=cfg.fingerprint(),
        dataset_hash=dataset.content_hash(),
        env=spec,
        diagnostics={"ood_action_queries": ood_queries},
    )


def _train_bcq(dataset: Dataset, cfg: VictimConfig) -> TrainedVictim:
    spec = dataset.env
    s_dim, a_dim = spec.state_dim, spec.action_dim
    low, high = spec.action_low, spec.action_high

    l32, h32 = low.astype(np.float32), high.astype(np.float32)
    v_lo, v_hi = return_bounds(spec.reward_range, cfg.gamma)
    behavior = mlp_init((s_dim, *cfg.hidden, a_dim), child_seed(cfg.seed, "behavior-init"))
    critic = mlp_init((s_dim + a_dim, *cfg.hidden, 1), child_seed(cfg.seed, "critic-init"))
    behavior_t, critic_t = behavior.copy(), critic.copy()
    opt_b = optim_init(behavior, "adam", cfg.actor_lr)
    opt_c = optim_init(critic, "adam", cfg.critic_lr)
    rng = np.random.default_rng(child_seed(cfg.seed, "train"))

    norm = ObsNorm.fit(dataset.states)
    s32, a32, r32, sn32, alive = _columns32(dataset, norm)
    curve: list[dict] = []
    ood_queries = 0
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(dataset.n)
        sums = {"behavior": 0.0, "critic": 0.0}
        n_batches = 0
        for start in range(0, dataset.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = idx.size
            s, a, r, sn = s32[idx], a32[idx], r32[idx], sn32[idx]

            # behavior cloning
            y = mlp_forward(behavior, s)
            a_bc = squash(y, l32, h32)
            diff = a_bc - a
            loss_b = float(np.mean(diff ** 2, dtype=np.float64))
            _guard(loss_b, "bcq behavior", epoch)
            up_b = (2.0 * diff / (b * a_dim)) * squash_jac(y, l32, h32)
            b_grads, _ = mlp_gradients(behavior, s, up_b)
            optim_step(opt_b, behavior, b_grads)

            # critic: TD toward the best candidate near the cloned next action
            c = cfg.bcq_candidates
            base = squash(mlp_forward(behavior_t, sn), l32, h32)
            offsets = rng.uniform(-cfg.bcq_phi, cfg.bcq_phi, size=(b, c - 1, a_dim)).astype(np.float32) if c > 1 else None
            cands = base[:, None, :]
            if offsets is not None:
                cands = np.concatenate([cands, np.clip(base[:, None, :] + offsets, l32, h32)], axis=1)
            x_next = np.concatenate([np.repeat(sn, c, axis=0), cands.reshape(b * c, a_dim)], axis=1)
            q_next = mlp_forward(critic_t, x_next)[:, 0].reshape(b, c)
            ood_queries += b * c
            targets = r + cfg.gamma * alive[idx] * np.clip(q_next.max(axis=1), v_lo, v_hi)
            q = _critic_eval(critic, s, a)
            err = q - targets
            loss_c = float(np.mean(err ** 2, dtype=np.float64))
            _guard(loss_c, "bcq critic", epoch)
            c_grads, _ = mlp_gradients(critic, np.concatenate([s, a], axis=1), (2.0 * err / b)[:, None])
            optim_step(opt_c, critic, c_grads)

            steps += 1
            if steps % cfg.target_sync == 0:
                behavior_t, critic_t = behavior.copy(), critic.copy()
            sums["behavior"] += loss_b
            sums["critic"] += loss_c
            n_batches += 1
        curve.append({"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}})

    policy = BcqPolicy(behavior, critic, low, high, cfg.bcq_phi, cfg.bcq_candidates, cfg.seed, norm)
    return TrainedVictim(
        policy=policy,
        actor=None,
        critic=critic,
        value=None,
        behavior=behavior,
        norm=norm,
        curve=curve,
        config=cfg,
        config_fingerprint=cfg.fingerprint(),
        dataset_hash=dataset.content_hash(),
        env=spec,
        diagnostics={"ood_action_queries": ood_queries},
    )


# ---------------------------------------------------------------------------
# Serialization: shared bundle format + CSV training curves
# ---------------------------------------------------------------------------


def save_victim(victim: TrainedVictim, path: str | Path) -> None:
    nets = {}
    for name in ("actor", "critic", "value", "behavior"):
        net = getattr(victim, name)
        if net is not None:
            nets[name] = net
    meta = {
        "kind": "victim",
        "norm": victim.norm.to_json(),
        "config": asdict(victim.config),
        "config_fingerprint": victim.config_fingerprint,
        "dataset_hash": victim.dataset_hash,
        "env": victim.env.to_json(),
        "diagnostics": victim.diagnostics,
        "curve": victim.curve,
    }
    save_bundle(path, meta, nets)


def load_victim(path: str | Path) -> TrainedVictim:
    meta, nets = load_bundle(path)
    if meta.get("kind") != "victim":
        raise ValueError(f"{path}: not a victim bundle")
    cfg_dict = dict(meta["config"])
    cfg_dict["hidden"] = tuple(cfg_dict["hidden"])
    cfg = VictimConfig(**cfg_dict)
    env = EnvSpec.from_json(meta["env"])
    norm = ObsNorm.from_json(meta["norm"])
    low, high = env.action_low, env.action_high
    if cfg.algorithm == "bcq":
        policy = BcqPolicy(nets["behavior"], nets["critic"], low, high, cfg.bcq_phi, cfg.bcq_candidates, cfg.seed, norm)
    else:
        policy = MlpPolicy(nets["actor"], low, high, norm)
    return TrainedVictim(
        policy=policy,
        actor=nets.get("actor"),
        critic=nets.get("critic"),
        value=nets.get("value"),
        behavior=nets.get("behavior"),
        norm=norm,
        curve=list(meta.get("curve", [])),
        config=cfg,
        config_fingerprint=meta["config_fingerprint"],
        dataset_hash=meta["dataset_hash"],
        env=env,
        diagnostics=dict(meta.get("diagnostics", {})),
    )


def save_curve_csv(victim: TrainedVictim, path: str | Path) -> None:
    if not victim.curve:
        raise ValueError("victim has no training curve")
    keys = list(victim.curve[0].keys())
    lines = [",".join(keys)]
    for row in victim.curve:
        lines.append(",".join(f"{row[k]:.8g}" if isinstance(row[k], float) else str(row[k]) for k in keys))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

"""Transition container, columnar on-disk format, stats, and patching.

File layout: one JSON header line (schema version, dims, row count, env
description, provenance, content hash) followed by little-endian float32
columnar blocks in field order ``s, a, r, s_next, done`` (done as 0/1).
The content hash is 64-bit FNV-1a over the concatenated float blocks and is
revalidated on load, so silent corruption and truncation surface as distinct
errors rather than garbage data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import EnvSpec
from .stats import pearson_matrix, percentile_nearest_rank
from .util import fnv1a64_blocks, hash_hex

FORMAT_VERSION = 1
DEFAULT_PERCENTILES = (5.0, 25.0, 50.0, 75.0, 95.0)


class DatasetError(Exception):
    """Base for dataset file-format failures."""


class DatasetVersionError(DatasetError):
    """On-disk schema version does not match this implementation."""


class DatasetHashError(DatasetError):
    """Stored content hash disagrees with the loaded blocks."""


class DatasetTruncatedError(DatasetError):
    """File ends before all declared blocks were read."""


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


@dataclass
class Dataset:
    """Columnar transition store. Treat as immutable after construction."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    env: EnvSpec
    provenance: str = ""
    version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=np.float32)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float32)
        self.rewards = np.ascontiguousarray(self.rewards, dtype=np.float32)
        self.next_states = np.ascontiguousarray(self.next_states, dtype=np.float32)
        self.dones = np.ascontiguousarray(self.dones, dtype=bool)
        n = self.states.shape[0]
        if n < 1:
            raise ValueError("dataset must hold at least one transition")
        for name, col, cols in (
            ("states", self.states, 2),
            ("actions", self.actions, 2),
            ("rewards", self.rewards, 1),
            ("next_states", self.next_states, 2),
            ("dones", self.dones, 1),
        ):
            if col.ndim != cols or col.shape[0] != n:
                raise ValueError(f"column {name} has shape {col.shape}, inconsistent with N={n}")
        if self.states.shape[1] != self.env.state_dim or self.next_states.shape[1] != self.env.state_dim:
            raise ValueError("state columns do not match env state_dim")
        if self.actions.shape[1] != self.env.action_dim:
            raise ValueError("action column does not match env action_dim")
        for name, col in (("states", self.states), ("actions", self.actions),
                          ("rewards", self.rewards), ("next_states", self.next_states)):
            if not np.all(np.isfinite(col)):
                raise ValueError(f"column {name} contains non-finite entries")
        self._hash: str | None = None

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def _blocks(self) -> list[bytes]:
        return [
            np.ascontiguousarray(self.states, dtype="<f4").tobytes(),
            np.ascontiguousarray(self.actions, dtype="<f4").tobytes(),
            np.ascontiguousarray(self.rewards, dtype="<f4").tobytes(),
            np.ascontiguousarray(self.next_states, dtype="<f4").tobytes(),
            np.ascontiguousarray(self.dones.astype(np.float32), dtype="<f4").tobytes(),
        ]

    def content_hash(self) -> str:
        if self._hash is None:
            self._hash = hash_hex(fnv1a64_blocks(self._blocks()))
        return self._hash

    def row(self, i: int) -> Transition:
        return Transition(
            s=self.states[i].copy(),
            a=self.actions[i].copy(),
            r=float(self.rewards[i]),
            s_next=self.next_states[i].copy(),
            done=bool(self.dones[i]),
        )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    blocks = dataset._blocks()
    header = {
        "format": "transition-dataset",
        "version": dataset.version,
        "n": dataset.n,
        "env": dataset.env.to_json(),
        "provenance": dataset.provenance,
        "meta": dataset.meta,
        "hash": dataset.content_hash(),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for block in blocks:
            f.write(block)


def load_dataset(path: str | Path) -> Dataset:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DatasetTruncatedError(f"{path}: unreadable dataset header") from e
        if header.get("format") != "transition-dataset":
            raise DatasetVersionError(f"{path}: not a transition-dataset file")
        if header.get("version") != FORMAT_VERSION:
            raise DatasetVersionError(f"{path}: format version {header.get('version')} != {FORMAT_VERSION}")
        env = EnvSpec.from_json(header["env"])
        n = int(header["n"])
        shapes = [(n, env.state_dim), (n, env.action_dim), (n,), (n, env.state_dim), (n,)]
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape))
            raw = f.read(4 * count)
            if len(raw) < 4 * count:
                raise DatasetTruncatedError(f"{path}: file ends mid-block (got {len(raw)} of {4 * count} bytes)")
            arrays.append(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
        trailing = f.read(1)
    if trailing:
        raise DatasetTruncatedError(f"{path}: trailing bytes after declared blocks")
    dataset = Dataset(
        states=arrays[0],
        actions=arrays[1],
        rewards=arrays[2],
        next_states=arrays[3],
        dones=arrays[4] != 0.0,
        env=env,
        provenance=header.get("provenance", ""),
        version=FORMAT_VERSION,
        meta=header.get("meta", {}),
    )
    actual = dataset.content_hash()
    if actual != header["hash"]:
        raise DatasetHashError(f"{path}: content hash {actual} != header {header['hash']}")
    return dataset


@dataclass
class DatasetStats:
    """Summary statistics of a dataset, keyed by its content hash."""

    n: int
    state_min: np.ndarray
    state_max: np.ndarray
    state_mean: np.ndarray
    state_std: np.ndarray
    corr: np.ndarray
    state_percentiles: dict[float, np.ndarray]
    reward_percentiles: dict[float, float]
    reward_max: float
    source_hash: str

    def state_percentile(self, dim: int, p: float) -> float:
        p = float(p)
        if p not in self.state_percentiles:
            raise KeyError(f"percentile {p} not in stats table {sorted(self.state_percentiles)}; recompute stats")
        return float(self.state_percentiles[p][dim])

    def reward_percentile(self, p: float) -> float:
        p = float(p)
        if p not in self.reward_percentiles:
            raise KeyError(f"percentile {p} not in stats table {sorted(self.reward_percentiles)}; recompute stats")
        return self.reward_percentiles[p]


def compute_stats(dataset: Dataset, percentiles: tuple[float, ...] = DEFAULT_PERCENTILES) -> DatasetStats:
    """Pure function of dataset content: moments, correlations, percentiles."""
    if dataset.n < 2:
        raise ValueError("stats need at least 2 transitions")
    states = dataset.states.astype(np.float64)
    rewards = dataset.rewards.astype(np.float64)
    state_percentiles = {
        float(p): np.array([percentile_nearest_rank(states[:, d], p) for d in range(states.shape[1])])
        for p in percentiles
    }
    reward_percentiles = {float(p): percentile_nearest_rank(rewards, p) for p in percentiles}
    return DatasetStats(
        n=dataset.n,
        state_min=states.min(axis=0),
        state_max=states.max(axis=0),
        state_mean=states.mean(axis=0),
        state_std=states.std(axis=0),
        corr=pearson_matrix(states),
        state_percentiles=state_percentiles,
        reward_percentiles=reward_percentiles,
        reward_max=float(rewards.max()),
        source_hash=dataset.content_hash(),
    )


@dataclass
class PatchSet:
    """Row replacements to apply to a dataset: (index, new transition) pairs."""

    entries: list[tuple[int, Transition]]

    def __post_init__(self):
        indices = [i for i, _ in self.entries]
        if len(set(indices)) != len(indices):
            raise ValueError("patch indices must be unique")

    def __len__(self) -> int:
        return len(self.entries)


def apply_patch(dataset: Dataset, patch: PatchSet) -> Dataset:
    """Return a new dataset with exactly the patched rows replaced."""
    for i, _ in patch.entries:
        if not (0 <= i < dataset.n):
            raise IndexError(f"patch index {i} out of range for N={dataset.n}")
    states = dataset.states.copy()
    actions = dataset.actions.copy()
    rewards = dataset.rewards.copy()
    next_states = dataset.next_states.copy()
    dones = dataset.dones.copy()
    for i, t in patch.entries:
        states[i] = np.asarray(t.s, dtype=np.float32)
        actions[i] = np.asarray(t.a, dtype=np.float32)
        rewards[i] = np.float32(t.r)
        next_states[i] = np.asarray(t.s_next, dtype=np.float32)
        dones[i] = bool(t.done)
    return Dataset(
        states=states,
        actions=actions,
        rewards=rewards,
        next_states=next_states,
        dones=dones,
        env=dataset.env,
        provenance=dataset.provenance,
        version=dataset.version,
        meta=dict(dataset.meta),
    )

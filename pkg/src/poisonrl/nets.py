"""Dense multilayer perceptrons with exact reverse-mode gradients.

Networks are fixed-topology MLPs: ReLU on hidden layers, linear output.
Parameters are stored as 32-bit floats; all forward/backward arithmetic runs
in 64-bit and results are handed back as float64. This keeps on-disk and
in-memory footprints small while making gradient checks against central
finite differences tight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .util import fnv1a64_blocks, hash_hex

PARAM_FORMAT_VERSION = 1


class ShapeMismatchError(ValueError):
    """Input or upstream vector does not match the network topology."""

    def __init__(self, layer: int, message: str):
        self.layer = layer
        super().__init__(f"layer {layer}: {message}")


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite; learning rate is likely too large."""


@dataclass
class MlpParams:
    """Per-layer weight matrices ``(fan_in, fan_out)`` and bias vectors."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up layer by layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ShapeMismatchError(i, f"weight {w.shape} does not chain with bias {b.shape}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatchError(
                    i, f"fan-in {w.shape[0]} does not chain with previous fan-out {self.weights[i - 1].shape[1]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


def mlp_init(layer_sizes: Sequence[int], seed: int) -> MlpParams:
    """He-style initialization for a ReLU net with the given layer widths."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output size")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append((rng.standard_normal((fan_in, fan_out)) * scale).astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return MlpParams(weights, biases)


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.dtype != np.float32:
        x = x.astype(np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeMismatchError(0, f"{what} has shape {x.shape}, expected (..., {dim})")
    return x, single


def _forward_cached(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Forward pass keeping pre-activations and activations for backprop.

    Arithmetic runs in the input's dtype: float32 batches stay float32 (the
    training hot path), anything else is evaluated in float64.
    """
    dt = x.dtype
    pre, acts = [], [x]
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.astype(dt, copy=False) + b.astype(dt, copy=False)
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return h, pre, acts


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single vector or a batch of rows."""
    xb, single = _as_batch(x, params.in_dim, "input")
    y, _, _ = _forward_cached(params, xb)
    return y[0] if single else y


def mlp_gradients(
    params: MlpParams, x: np.ndarray, upstream: np.ndarray
) -> tuple[tuple[list[np.ndarray], list[np.ndarray]], np.ndarray]:
    """Exact gradients of ``sum(upstream * output)`` via reverse mode.

    Returns ``((dW, db), dx)``. For batched inputs the parameter gradients
    are summed over rows and ``dx`` keeps one row per input.
    """
    xb, single = _as_batch(x, params.in_dim, "input")
    ub = np.asarray(upstream).astype(xb.dtype, copy=False)
    if single:
        if ub.ndim != 1 or ub.shape[0] != params.out_dim:
            raise ShapeMismatchError(params.n_layers - 1, f"upstream has shape {ub.shape}, expected ({params.out_dim},)")
        ub = ub[None, :]
    elif ub.shape != (xb.shape[0], params.out_dim):
        raise ShapeMismatchError(
            params.n_layers - 1, f"upstream has shape {ub.shape}, expected {(xb.shape[0], params.out_dim)}"
        )

    _, pre, acts = _forward_cached(params, xb)
    n = params.n_layers
    d_w: list[np.ndarray] = [np.empty(0)] * n
    d_b: list[np.ndarray] = [np.empty(0)] * n
    delta = ub
    for i in range(n - 1, -1, -1):
        d_w[i] = acts[i].T @ delta
        d_b[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].astype(xb.dtype, copy=False).T
        if i > 0:
            delta = delta * (pre[i - 1] > 0.0)
    dx = delta[0] if single else delta
    return (d_w, d_b), dx


@dataclass
class ObsNorm:
    """Per-dimension standardization fitted on a dataset's state column.

    Networks see standardized states; everything outside the nets (triggers,
    environments, action search) stays in raw observation units.
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)

    @staticmethod
    def fit(states: np.ndarray) -> "ObsNorm":
        x = np.asarray(states, dtype=np.float64)
        return ObsNorm(mean=x.mean(axis=0), std=np.maximum(x.std(axis=0), 1e-3))

    @staticmethod
    def identity(dim: int) -> "ObsNorm":
        return ObsNorm(mean=np.zeros(dim), std=np.ones(dim))

    def apply(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s)
        dt = s.dtype if s.dtype in (np.float32, np.float64) else np.float64
        return (s.astype(dt, copy=False) - self.mean.astype(dt, copy=False)) / self.std.astype(dt, copy=False)

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @staticmethod
    def from_json(d: dict) -> "ObsNorm":
        return ObsNorm(mean=np.asarray(d["mean"]), std=np.asarray(d["std"]))


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimState:
    """SGD or Adam state; moment accumulators mirror the parameter shapes."""

    kind: str
    lr: float
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def _flat_params(params: MlpParams) -> list[np.ndarray]:
    return list(params.weights) + list(params.biases)


def optim_init(params: MlpParams, kind: str = "adam", lr: float = 1e-3) -> OptimState:
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    state = OptimState(kind=kind, lr=lr)
    if kind == "adam":
        state.m = [np.zeros_like(p, dtype=np.float64) for p in _flat_params(params)]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in _flat_params(params)]
    return state


def optim_step(state: OptimState, params: MlpParams, grads: tuple[list[np.ndarray], list[np.ndarray]]) -> None:
    """Apply one update in place. Caller owns the parameters during training."""
    flat_p = _flat_params(params)
    flat_g = list(grads[0]) + list(grads[1])
    state.step += 1
    if state.kind == "sgd":
        for p, g in zip(flat_p, flat_g):
            p -= (state.lr * g).astype(np.float32)
        return
    b1c = 1.0 - ADAM_BETA1 ** state.step
    b2c = 1.0 - ADAM_BETA2 ** state.step
    for p, g, m, v in zip(flat_p, flat_g, state.m, state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        update = state.lr * (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)
        p -= update.astype(np.float32)


# ---------------------------------------------------------------------------
# Versioned binary parameter bundles (shared by proxy critics and victims)
# ---------------------------------------------------------------------------


def save_bundle(path: str | Path, meta: dict, nets: dict[str, MlpParams]) -> None:
    """Write named networks to one file: JSON header line + float32 blocks.

    Blocks are emitted in sorted net-name order, each layer as weight bytes
    then bias bytes, little endian. The header carries a 64-bit FNV-1a hash
    of the concatenated blocks.
    """
    blocks: list[bytes] = []
    layout: dict[str, list[list[int]]] = {}
    for name in sorted(nets):
        net = nets[name]
        layout[name] = [[int(w.shape[0]), int(w.shape[1])] for w in net.weights]
        for w, b in zip(net.weights, net.biases):
            blocks.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
            blocks.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    header = {
        "format": "mlp-bundle",
        "version": PARAM_FORMAT_VERSION,
        "layout": layout,
        "meta": meta,
        "hash": hash_hex(fnv1a64_blocks(blocks)),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for block in blocks:
            f.write(block)


def load_bundle(path: str | Path) -> tuple[dict, dict[str, MlpParams]]:
    """Read a parameter bundle back; verifies version and content hash."""
    from .dataset import DatasetHashError, DatasetTruncatedError, DatasetVersionError

    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DatasetTruncatedError(f"{path}: unreadable bundle header") from e
        if header.get("format") != "mlp-bundle" or header.get("version") != PARAM_FORMAT_VERSION:
            raise DatasetVersionError(
                f"{path}: expected mlp-bundle v{PARAM_FORMAT_VERSION}, "
                f"got {header.get('format')!r} v{header.get('version')!r}"
            )
        blocks: list[bytes] = []
        nets: dict[str, MlpParams] = {}
        for name in sorted(header["layout"]):
            weights, biases = [], []
            for fan_in, fan_out in header["layout"][name]:
                wb = f.read(4 * fan_in * fan_out)
                bb = f.read(4 * fan_out)
                if len(wb) < 4 * fan_in * fan_out or len(bb) < 4 * fan_out:
                    raise DatasetTruncatedError(f"{path}: bundle ends mid-block in net {name!r}")
                blocks.extend([wb, bb])
                weights.append(np.frombuffer(wb, dtype="<f4").reshape(fan_in, fan_out).copy())
                biases.append(np.frombuffer(bb, dtype="<f4").copy())
            nets[name] = MlpParams(weights, biases)
    actual = hash_hex(fnv1a64_blocks(blocks))
    if actual != header["hash"]:
        raise DatasetHashError(f"{path}: bundle hash {actual} != header {header['hash']}")
    return header["meta"], nets

"""Small feed-forward networks with hand-written reverse-mode gradients.

A network is described by a :class:`NetworkSpec` and its weights live in one
flat float64 vector whose layout depends only on that description.  The same
machinery backs the policy (categorical logits or gaussian mean/log-std head),
the state-value critic and the optional state-action critic.

Every array function accepts either a single input vector or a ``(batch, dim)``
matrix; ``backward`` sums the parameter gradient over the batch.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "relu")
HEADS = ("linear", "categorical-logits", "gaussian-mean-logstd")

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"PGLB"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input or gradient does not match the network's declared dimensions."""


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_layers: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    head: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        dims = (self.input_dim, self.output_dim, *self.hidden_layers)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all network dimensions must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "gaussian-mean-logstd" and self.output_dim % 2:
            raise ValueError("gaussian head needs an even output_dim (mean and log-std halves)")

    @property
    def is_gaussian(self) -> bool:
        return self.head == "gaussian-mean-logstd"

    @property
    def action_dim(self) -> int:
        """Width of the affine output (the mean half for a gaussian head)."""
        return self.output_dim // 2 if self.is_gaussian else self.output_dim

    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(self._shapes)

    @cached_property
    def _shapes(self) -> tuple:
        sizes = [self.input_dim, *self.hidden_layers, self.action_dim]
        return tuple((sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1))

    @cached_property
    def n_params(self) -> int:
        n = sum(o * i + o for o, i in self.layer_shapes())
        return n + (self.action_dim if self.is_gaussian else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_layers=tuple(d["hidden_layers"]),
            output_dim=int(d["output_dim"]),
            activation=d.get("activation", "tanh"),
            head=d.get("head", "linear"),
        )


def unpack(params: np.ndarray, spec: NetworkSpec):
    """Views into ``params``: a list of ``(W, b)`` per layer and the log-std tail (or None)."""
    if params.shape != (spec.n_params,):
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    layers = []
    pos = 0
    for out_dim, in_dim in spec._shapes:
        W = params[pos:pos + out_dim * in_dim].reshape(out_dim, in_dim)
        pos += out_dim * in_dim
        b = params[pos:pos + out_dim]
        pos += out_dim
        layers.append((W, b))
    log_std = params[pos:pos + spec.action_dim] if spec.is_gaussian else None
    return layers, log_std


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; log-std starts at 0."""
    params = np.zeros(spec.n_params)
    layers, _ = unpack(params, spec)
    for W, b in layers:
        bound = 1.0 / math.sqrt(W.shape[1])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return params


def _as_batch(x, dim: int, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ShapeError(f"{what} must have trailing dimension {dim}, got shape {np.shape(x)}")
    return arr, single


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _trace(params, spec, X):
    layers, log_std = unpack(params, spec)
    inputs = []
    h = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W.T + b
        h = z if i == last else _activate(z, spec.activation)
    if log_std is not None:
        clamped = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
        h = np.concatenate([h, np.broadcast_to(clamped, h.shape)], axis=1)
    return inputs, h


def forward(params: np.ndarray, spec: NetworkSpec, x) -> np.ndarray:
    X, single = _as_batch(x, spec.input_dim, "input")
    _, out = _trace(params, spec, X)
    return out[0] if single else out


def backward(params: np.ndarray, spec: NetworkSpec, x, output_grad) -> np.ndarray:
    """Gradient of ``sum(forward(x) * output_grad)`` with respect to ``params``."""
    X, _ = _as_batch(x, spec.input_dim, "input")
    G, _ = _as_batch(output_grad, spec.output_dim, "output_grad")
    if G.shape[0] != X.shape[0]:
        raise ShapeError(f"batch mismatch: {X.shape[0]} inputs, {G.shape[0]} output grads")

    layers, log_std = unpack(params, spec)
    grad = np.zeros_like(params)
    g_layers, g_log_std = unpack(grad, spec)
    inputs, _ = _trace(params, spec, X)

    if log_std is not None:
        inside = (log_std >= LOG_STD_MIN) & (log_std <= LOG_STD_MAX)
        g_log_std[...] = G[:, spec.action_dim:].sum(axis=0) * inside
        G = G[:, :spec.action_dim]

    delta = G
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW, gb = g_layers[i]
        h_in = inputs[i]
        gW[...] = delta.T @ h_in
        gb[...] = delta.sum(axis=0)
        if i == 0:
            break
        back = delta @ W
        # h_in is the activated output of layer i-1
        if spec.activation == "tanh":
            delta = back * (1.0 - h_in * h_in)
        else:
            delta = back * (h_in > 0.0)
    return grad


# ---------------------------------------------------------------------------
# policy distributions


@dataclass
class PolicyDistribution:
    """Categorical (``logits``) or diagonal gaussian (``mean``, ``log_std``).

    Arrays may carry a leading batch dimension.
    """

    kind: str
    logits: np.ndarray | None = None
    mean: np.ndarray | None = None
    log_std: np.ndarray | None = None

    @classmethod
    def from_output(cls, spec: NetworkSpec, out: np.ndarray) -> "PolicyDistribution":
        if spec.head == "categorical-logits":
            return cls("categorical", logits=out)
        if spec.is_gaussian:
            d = spec.action_dim
            return cls("gaussian", mean=out[..., :d], log_std=out[..., d:])
        raise ValueError(f"head {spec.head!r} does not define a policy distribution")

    @cached_property
    def log_probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    @cached_property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


def log_prob(dist: PolicyDistribution, action):
    if dist.kind == "categorical":
        lp = dist.log_probs
        n = lp.shape[-1]
        if lp.ndim == 1 and isinstance(action, (int, np.integer)):
            if not 0 <= action < n:
                raise ValueError(f"categorical action out of support [0, {n}): {action!r}")
            return float(lp[action])
        a = np.asarray(action)
        if not np.issubdtype(a.dtype, np.integer) or np.any(a < 0) or np.any(a >= n):
            raise ValueError(f"categorical action out of support [0, {n}): {action!r}")
        if lp.ndim == 1:
            return float(lp[int(a)])
        return np.take_along_axis(lp, a.reshape(-1, 1), axis=1)[:, 0]
    a = np.asarray(action, dtype=np.float64)
    if a.shape[-1:] != dist.mean.shape[-1:]:
        raise ValueError(f"gaussian action has shape {a.shape}, expected trailing {dist.mean.shape[-1]}")
    z = (a - dist.mean) * np.exp(-dist.log_std)
    out = np.sum(-0.5 * z * z - dist.log_std - 0.5 * LOG_2PI, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def entropy(dist: PolicyDistribution):
    if dist.kind == "categorical":
        p = dist.probs
        out = -np.sum(p * dist.log_probs, axis=-1)
    else:
        out = np.sum(0.5 * (1.0 + LOG_2PI) + dist.log_std, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def log_prob_grad(dist: PolicyDistribution, actions) -> np.ndarray:
    """d log_prob / d network-output, batched; same layout as the network output."""
    if dist.kind == "categorical":
        g = -dist.probs.copy()
        g[np.arange(g.shape[0]), np.asarray(actions)] += 1.0
        return g
    a = np.asarray(actions, dtype=np.float64)
    inv_var = np.exp(-2.0 * dist.log_std)
    diff = a - dist.mean
    return np.concatenate([diff * inv_var, diff * diff * inv_var - 1.0], axis=1)


def entropy_grad(dist: PolicyDistribution) -> np.ndarray:
    """d entropy / d network-output, batched."""
    if dist.kind == "categorical":
        p = dist.probs
        lp = dist.log_probs
        h = -np.sum(p * lp, axis=-1, keepdims=True)
        return -p * (lp + h)
    return np.concatenate([np.zeros_like(dist.mean), np.ones_like(dist.log_std)], axis=1)


def sample_action(dist: PolicyDistribution, rng: np.random.Generator):
    """One action from a single (unbatched) distribution."""
    if dist.kind == "categorical":
        cdf = np.cumsum(dist.probs)
        idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return min(idx, cdf.shape[0] - 1)
    return dist.mean + np.exp(dist.log_std) * rng.standard_normal(dist.mean.shape)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: np.ndarray, spec: NetworkSpec) -> None:
    """Binary file (magic, version, header JSON, little-endian float64) plus a ``.json`` sidecar."""
    path = Path(path)
    header = json.dumps(spec.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(np.asarray(params, dtype="<f8").tobytes())
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps({"version": CHECKPOINT_VERSION, "spec": spec.to_dict()}, indent=2, sort_keys=True)
    )


def load_checkpoint(path) -> tuple[np.ndarray, NetworkSpec]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    spec = NetworkSpec.from_dict(json.loads(blob[12:12 + hlen]))
    params = np.frombuffer(blob[12 + hlen:], dtype="<f8").astype(np.float64)
    if params.shape != (spec.n_params,):
        raise ValueError(f"{path}: expected {spec.n_params} parameters, found {params.shape[0]}")
    return params, spec

"""Dense feed-forward networks with hand-derived gradients.

Everything trainable in this package is built from three pieces defined
here: `Network` (a stack of fully connected layers with explicit
backprop), `GaussianHead` (a diagonal Gaussian over continuous actions
with a learnable, state-independent log-std), and `AdamState` (Adam with
global gradient-norm clipping). All arithmetic is float64; parameters are
plain numpy arrays so updates and checkpoints stay auditable.

Weights are stored as (in_dim, out_dim) row-major matrices; a batch of
inputs is a (batch, in_dim) array and the forward pass is `x @ W + b`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

RELU = "relu"
IDENTITY = "identity"

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

LOG_2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_MAGIC = b"PLCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when an input or gradient does not match the network shape."""


class StaleCacheError(ValueError):
    """Raised when a backward pass receives a cache from another forward."""


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ShapeError(f"{what}: expected length {dim}, got {x.shape[0]}")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what}: expected (*, {dim}), got {x.shape}")
    return x, False


@dataclass
class Layer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )
        if self.activation not in (RELU, IDENTITY):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValueError("layer parameters must be finite")


class ForwardCache:
    """Per-layer inputs and pre-activations recorded by `Network.forward`."""

    __slots__ = ("net_id", "inputs", "preacts", "batch")

    def __init__(self, net_id: int, inputs: list[np.ndarray], preacts: list[np.ndarray]):
        self.net_id = net_id
        self.inputs = inputs
        self.preacts = preacts
        self.batch = inputs[0].shape[0]


def orthogonal_init(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(a if rows >= cols else a.T)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Network:
    """A fixed MLP topology: affine layers with ReLU or identity activations.

    Hidden layers use ReLU; whether the final layer is ReLU or identity is
    up to the builder (sub-encoders inside a policy keep ReLU outputs,
    policy/value outputs are identity).
    """

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ShapeError(
                    f"layer dims do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        self.layers = layers

    @classmethod
    def build(
        cls,
        dims: list[int],
        rng: np.random.Generator,
        out_activation: str = IDENTITY,
        out_gain: float = 1.0,
    ) -> "Network":
        """Build an MLP with the given layer widths, ReLU on hidden layers.

        `dims` is [input, hidden..., output]. Hidden layers use orthogonal
        init with gain sqrt(2); the output layer uses `out_gain`.
        """
        if len(dims) < 2:
            raise ValueError("dims must contain input and output sizes")
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
            last = i == len(dims) - 2
            gain = out_gain if last else np.sqrt(2.0)
            act = out_activation if last else RELU
            layers.append(Layer(orthogonal_init(d_in, d_out, gain, rng), np.zeros(d_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        """Run the net on a vector or a (batch, in_dim) array.

        Returns the output (same batch convention as the input) and a cache
        of per-layer inputs/pre-activations for `backward`.
        """
        h, squeeze = _as_batch(x, self.input_dim, "forward input")
        inputs: list[np.ndarray] = []
        preacts: list[np.ndarray] = []
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight + layer.bias
            preacts.append(z)
            h = np.maximum(z, 0.0) if layer.activation == RELU else z
        out = h[0] if squeeze else h
        return out, ForwardCache(id(self), inputs, preacts)

    def backward(
        self, cache: ForwardCache, grad_output: np.ndarray
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """Given d(loss)/d(output), return per-parameter grads and d(loss)/d(input).

        Gradients are aligned with `params()`. The cache must come from a
        `forward` call on this same network instance.
        """
        if cache.net_id != id(self):
            raise StaleCacheError("cache was produced by a different network")
        g, squeeze = _as_batch(grad_output, self.output_dim, "grad_output")
        if g.shape[0] != cache.batch:
            raise StaleCacheError(
                f"cache batch {cache.batch} does not match grad batch {g.shape[0]}"
            )
        grads: list[np.ndarray] = []
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            z = cache.preacts[idx]
            if layer.activation == RELU:
                g = g * (z > 0.0)
            grads.append(np.sum(g, axis=0))  # bias
            grads.append(cache.inputs[idx].T @ g)  # weight
            g = g @ layer.weight.T
        grads.reverse()
        return grads, (g[0] if squeeze else g)


@dataclass
class GaussianHead:
    """Diagonal Gaussian over a continuous action, log-std learnable.

    The mean comes from a policy network per state; `log_std` is a single
    state-independent vector, clamped to [-20, 2].
    """

    log_std: np.ndarray

    def __post_init__(self) -> None:
        self.log_std = np.clip(np.asarray(self.log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)

    @classmethod
    def build(cls, dim: int, init: float = -0.5) -> "GaussianHead":
        return cls(np.full(dim, init, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.log_std.shape[0]

    def clamp(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))

    def sample(
        self, mean: np.ndarray, rng: np.random.Generator, deterministic: bool = False
    ) -> tuple[np.ndarray, np.ndarray]:
        """Draw an action and its exact log-density.

        Deterministic mode returns the mean together with the density of the
        mean itself.
        """
        mean = np.asarray(mean, dtype=np.float64)
        if not np.isfinite(mean).all():
            raise ValueError("non-finite action mean")
        if deterministic:
            action = mean.copy()
        else:
            action = mean + rng.standard_normal(mean.shape) * self.std()
        return action, self.log_prob(mean, action)

    def log_prob(self, mean: np.ndarray, action: np.ndarray) -> np.ndarray:
        mean = np.asarray(mean, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        std = self.std()
        z = (action - mean) / std
        per_dim = -0.5 * z * z - np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX) - 0.5 * LOG_2PI
        return per_dim.sum(axis=-1)

    def entropy(self) -> float:
        """Entropy of one action draw (state-independent for this head)."""
        return float(np.sum(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX) + 0.5 * (1.0 + LOG_2PI)))

    def log_prob_grads(
        self, mean: np.ndarray, action: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """d(log_prob)/d(mean) and d(log_prob)/d(log_std), per sample."""
        mean = np.asarray(mean, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        var = self.std() ** 2
        diff = action - mean
        d_mean = diff / var
        d_log_std = diff * diff / var - 1.0
        return d_mean, d_log_std


@dataclass
class AdamState:
    """Adam moments plus the clipping threshold applied before each step."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    skipped: int = field(default=0)

    @classmethod
    def for_params(
        cls,
        params: list[np.ndarray],
        lr: float,
        max_grad_norm: float | None = None,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            step=0,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            max_grad_norm=max_grad_norm,
        )


def global_grad_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grads(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale gradients so their global L2 norm is at most `max_norm`.

    Norms already below the threshold are left untouched. Returns the
    (possibly rescaled) gradients and the pre-clip norm.
    """
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> bool:
    """Apply one bias-corrected Adam update in place.

    Gradients are first clipped to `state.max_grad_norm` (global L2). A
    non-finite gradient skips the step entirely and flags it via
    `state.skipped`. Returns True when the step was applied.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("params/grads/state length mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param {p.shape}")
    if not all(np.isfinite(g).all() for g in grads):
        state.skipped += 1
        return False
    if state.max_grad_norm is not None:
        grads, _ = clip_grads(grads, state.max_grad_norm)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


# ---------------------------------------------------------------------------
# Checkpoint container: length-prefixed JSON header + raw little-endian f64.
# ---------------------------------------------------------------------------


def save_checkpoint(path, arrays: list[np.ndarray], meta: dict) -> None:
    """Write a self-describing checkpoint with a bit-exact parameter blob.

    Layout: magic, format version, u64 header length, JSON header (meta +
    array shapes), then every array flattened as little-endian float64.
    """
    header = {
        "format_version": CHECKPOINT_VERSION,
        "shapes": [list(a.shape) for a in arrays],
        "meta": meta,
    }
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[list[np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = []
        for shape in header["shapes"]:
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            arrays.append(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
    return arrays, header["meta"]

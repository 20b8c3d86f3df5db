"""Actor-critic policy architectures.

Three architectures share one training interface:

* `ActorCriticMLP` — plain trunk + Gaussian policy head + value head.
  Used for the pointing controller and small benchmark tasks.
* `PooledPolicy` — a per-record encoder, mean pooling across experiment
  records, then trunk and heads. Output is invariant to record order.
* `RelationalPolicy` — a pair encoder over consecutive fixations summed
  within each experiment, a per-experiment transform `g` summed across
  experiments, then trunk and heads. Invariant to experiment order but
  sensitive to within-episode fixation order.

Observations arrive as flat float64 vectors; the set-based policies carry
a layout describing how records, padding masks and the record count are
packed into that vector. The training interface is `act` (sampled or
deterministic actions with exact log-densities), `evaluate` (log-probs,
entropy and values with caches kept), and `backward` (map d/d mean,
d/d value and d/d log_std to parameter gradients aligned with `params()`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .nn import (
    IDENTITY,
    RELU,
    GaussianHead,
    Network,
    load_checkpoint,
    save_checkpoint,
)

TRUNK_DIMS = (32, 64, 128, 128)
HEAD_DIMS = (128, 64)
SET_ENCODER_DIMS = (32, 64, 128, 256)
SET_TRUNK_DIMS = (256, 64)
SET_HEAD_DIMS = (64, 64)
EMBED_DIM = 256


@dataclass
class Evaluation:
    """Everything `ppo_update` needs from one forward pass."""

    log_probs: np.ndarray  # (B,)
    values: np.ndarray  # (B,)
    mean: np.ndarray  # (B, A)
    entropy: float
    cache: tuple


class Policy(Protocol):
    action_dim: int
    obs_dim: int

    def act(self, obs, rng, deterministic: bool = False): ...
    def evaluate(self, obs, actions) -> Evaluation: ...
    def backward(self, cache, d_mean, d_value, d_log_std) -> list[np.ndarray]: ...
    def params(self) -> list[np.ndarray]: ...


def _batched(obs: np.ndarray) -> tuple[np.ndarray, bool]:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 1:
        return obs[None, :], True
    return obs, False


class _ActorCriticBase:
    """Shared act/evaluate/backward plumbing on top of an embedding stage."""

    trunk: Network
    policy_head: Network
    value_head: Network
    head: GaussianHead
    action_dim: int
    obs_dim: int

    # Subclasses: embed forward returns (trunk_input, embed_cache); embed
    # backward consumes d(trunk_input) and returns grads for embed params.
    def _embed(self, obs: np.ndarray) -> tuple[np.ndarray, object]:
        raise NotImplementedError

    def _embed_backward(self, embed_cache, d_trunk_in: np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError

    def _embed_params(self) -> list[np.ndarray]:
        raise NotImplementedError

    def _forward(self, obs: np.ndarray):
        trunk_in, ecache = self._embed(obs)
        h, tcache = self.trunk.forward(trunk_in)
        mean, pcache = self.policy_head.forward(h)
        value, vcache = self.value_head.forward(h)
        return mean, value[:, 0], (ecache, tcache, pcache, vcache)

    def act(
        self, obs: np.ndarray, rng: np.random.Generator | None = None, deterministic: bool = False
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        obs, squeeze = _batched(obs)
        mean, values, _ = self._forward(obs)
        if deterministic:
            actions = mean.copy()
        else:
            if rng is None:
                raise ValueError("sampling requires an rng")
            actions = mean + rng.standard_normal(mean.shape) * self.head.std()
        log_probs = self.head.log_prob(mean, actions)
        if squeeze:
            return actions[0], log_probs[0], values[0]
        return actions, log_probs, values

    def value(self, obs: np.ndarray) -> np.ndarray:
        obs, squeeze = _batched(obs)
        _, values, _ = self._forward(obs)
        return values[0] if squeeze else values

    def evaluate(self, obs: np.ndarray, actions: np.ndarray) -> Evaluation:
        obs, _ = _batched(obs)
        actions = np.asarray(actions, dtype=np.float64)
        mean, values, cache = self._forward(obs)
        log_probs = self.head.log_prob(mean, actions)
        return Evaluation(log_probs, values, mean, self.head.entropy(), cache)

    def backward(
        self,
        cache: tuple,
        d_mean: np.ndarray,
        d_value: np.ndarray,
        d_log_std: np.ndarray,
    ) -> list[np.ndarray]:
        """Parameter gradients for a loss with the given output gradients.

        `d_mean` is (B, A), `d_value` is (B,), `d_log_std` is (A,) already
        summed over the batch. Order matches `params()`.
        """
        ecache, tcache, pcache, vcache = cache
        pgrads, gh_p = self.policy_head.backward(pcache, d_mean)
        vgrads, gh_v = self.value_head.backward(vcache, np.asarray(d_value)[:, None])
        tgrads, g_in = self.trunk.backward(tcache, gh_p + gh_v)
        egrads = self._embed_backward(ecache, g_in)
        return egrads + tgrads + pgrads + vgrads + [np.asarray(d_log_std, dtype=np.float64)]

    def params(self) -> list[np.ndarray]:
        return (
            self._embed_params()
            + self.trunk.params()
            + self.policy_head.params()
            + self.value_head.params()
            + [self.head.log_std]
        )

    def set_params(self, values: list[np.ndarray]) -> None:
        own = self.params()
        if len(own) != len(values):
            raise ValueError(f"expected {len(own)} arrays, got {len(values)}")
        for dst, src in zip(own, values):
            if dst.shape != np.shape(src):
                raise ValueError(f"shape mismatch {dst.shape} vs {np.shape(src)}")
            dst[...] = src
        self.head.clamp()

    def copy(self):
        import copy as _copy

        return _copy.deepcopy(self)


class ActorCriticMLP(_ActorCriticBase):
    """Trunk MLP with Gaussian policy and value heads on flat observations."""

    kind = "mlp"

    def __init__(
        self,
        obs_dim: int,
        action_dim: int,
        rng: np.random.Generator,
        trunk_dims: tuple[int, ...] = TRUNK_DIMS,
        head_dims: tuple[int, ...] = HEAD_DIMS,
        log_std_init: float = -0.5,
    ):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.trunk_dims = tuple(trunk_dims)
        self.head_dims = tuple(head_dims)
        self.trunk = Network.build([obs_dim, *trunk_dims], rng, out_activation=RELU)
        last = trunk_dims[-1]
        self.policy_head = Network.build([last, *head_dims, action_dim], rng, out_gain=0.01)
        self.value_head = Network.build([last, *head_dims, 1], rng)
        self.head = GaussianHead.build(action_dim, log_std_init)

    def _embed(self, obs: np.ndarray):
        return obs, None

    def _embed_backward(self, embed_cache, d_trunk_in):
        return []

    def _embed_params(self):
        return []

    def arch_meta(self) -> dict:
        return {
            "kind": self.kind,
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "trunk_dims": list(self.trunk_dims),
            "head_dims": list(self.head_dims),
        }


@dataclass(frozen=True)
class PooledLayout:
    """Flat-vector layout: `max_records` fixed-width records then a count."""

    max_records: int
    record_dim: int

    @property
    def obs_dim(self) -> int:
        return self.max_records * self.record_dim + 1

    def pack(self, records: np.ndarray) -> np.ndarray:
        """records: (k, record_dim) with k <= max_records."""
        records = np.asarray(records, dtype=np.float64).reshape(-1, self.record_dim)
        k = records.shape[0]
        if k > self.max_records:
            raise ValueError(f"{k} records exceed capacity {self.max_records}")
        out = np.zeros(self.obs_dim)
        flat = out[: self.max_records * self.record_dim].reshape(self.max_records, self.record_dim)
        flat[:k] = records
        out[-1] = float(k)
        return out

    def unpack(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        obs = np.asarray(obs, dtype=np.float64)
        b = obs.shape[0]
        counts = np.rint(obs[:, -1]).astype(int)
        records = obs[:, :-1].reshape(b, self.max_records, self.record_dim)
        return records, counts


class PooledPolicy(_ActorCriticBase):
    """Record encoder -> mean pooling -> trunk -> Gaussian/value heads.

    Zero records map to a learned null embedding so the cold-start action
    is well defined and trainable.
    """

    kind = "pooled"

    def __init__(
        self,
        layout: PooledLayout,
        action_dim: int,
        rng: np.random.Generator,
        log_std_init: float = -0.5,
    ):
        self.layout = layout
        self.obs_dim = layout.obs_dim
        self.action_dim = action_dim
        self.encoder = Network.build(
            [layout.record_dim, *SET_ENCODER_DIMS], rng, out_activation=RELU
        )
        # Small random init: an all-zero null embedding would leave the
        # cold-start pathway on the ReLU kink with no gradient at all.
        self.null_embed = rng.standard_normal(EMBED_DIM) * 0.1
        self.trunk = Network.build([EMBED_DIM + 1, *SET_TRUNK_DIMS], rng, out_activation=RELU)
        last = SET_TRUNK_DIMS[-1]
        self.policy_head = Network.build([last, *SET_HEAD_DIMS, action_dim], rng, out_gain=0.01)
        self.value_head = Network.build([last, *SET_HEAD_DIMS, 1], rng)
        self.head = GaussianHead.build(action_dim, log_std_init)

    def embed_records(self, obs: np.ndarray) -> np.ndarray:
        """Pooled embedding only (no trunk/heads); used by contract tests."""
        obs, squeeze = _batched(obs)
        trunk_in, _ = self._embed(obs)
        e = trunk_in[:, :EMBED_DIM]
        return e[0] if squeeze else e

    def _embed(self, obs: np.ndarray):
        b = obs.shape[0]
        m = self.layout.max_records
        records, counts = self.layout.unpack(obs)
        enc, ecache = self.encoder.forward(records.reshape(b * m, self.layout.record_dim))
        enc = enc.reshape(b, m, EMBED_DIM)
        mask = np.arange(m)[None, :] < counts[:, None]
        sums = np.einsum("bme,bm->be", enc, mask.astype(np.float64))
        denom = np.maximum(counts, 1).astype(np.float64)
        pooled = sums / denom[:, None]
        empty = counts == 0
        pooled[empty] = self.null_embed
        trunk_in = np.concatenate([pooled, (counts / m)[:, None]], axis=1)
        return trunk_in, (ecache, mask, counts, denom, empty)

    def _embed_backward(self, embed_cache, d_trunk_in):
        ecache, mask, counts, denom, empty = embed_cache
        b, m = mask.shape
        d_pooled = d_trunk_in[:, :EMBED_DIM].copy()
        d_null = d_pooled[empty].sum(axis=0)
        d_pooled[empty] = 0.0
        d_sums = d_pooled / denom[:, None]
        d_enc = d_sums[:, None, :] * mask[:, :, None]
        egrads, _ = self.encoder.backward(ecache, d_enc.reshape(b * m, EMBED_DIM))
        return egrads + [d_null]

    def _embed_params(self):
        return self.encoder.params() + [self.null_embed]

    def arch_meta(self) -> dict:
        return {
            "kind": self.kind,
            "action_dim": self.action_dim,
            "max_records": self.layout.max_records,
            "record_dim": self.layout.record_dim,
        }


@dataclass(frozen=True)
class SeqLayout:
    """Layout for sequence outcomes: per record a context row, fixation-pair
    rows and a pair mask; a trailing record count.

    Record block: [context (context_dim) | pairs ((max_pairs) * pair_dim) |
    pair_mask (max_pairs)].
    """

    max_records: int
    context_dim: int
    max_pairs: int
    pair_dim: int

    @property
    def record_block(self) -> int:
        return self.context_dim + self.max_pairs * (self.pair_dim + 1)

    @property
    def obs_dim(self) -> int:
        return self.max_records * self.record_block + 1

    def pack_record(self, context: np.ndarray, pairs: np.ndarray) -> np.ndarray:
        context = np.asarray(context, dtype=np.float64)
        pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, self.pair_dim)
        if context.shape != (self.context_dim,):
            raise ValueError(f"context must be ({self.context_dim},), got {context.shape}")
        k = pairs.shape[0]
        if k > self.max_pairs:
            raise ValueError(f"{k} pairs exceed capacity {self.max_pairs}")
        block = np.zeros(self.record_block)
        block[: self.context_dim] = context
        body = block[self.context_dim : self.context_dim + self.max_pairs * self.pair_dim]
        body.reshape(self.max_pairs, self.pair_dim)[:k] = pairs
        block[self.context_dim + self.max_pairs * self.pair_dim :][:k] = 1.0
        return block

    def pack(self, blocks: list[np.ndarray]) -> np.ndarray:
        if len(blocks) > self.max_records:
            raise ValueError(f"{len(blocks)} records exceed capacity {self.max_records}")
        out = np.zeros(self.obs_dim)
        for i, blk in enumerate(blocks):
            out[i * self.record_block : (i + 1) * self.record_block] = blk
        out[-1] = float(len(blocks))
        return out

    def unpack(self, obs: np.ndarray):
        obs = np.asarray(obs, dtype=np.float64)
        b = obs.shape[0]
        counts = np.rint(obs[:, -1]).astype(int)
        blocks = obs[:, :-1].reshape(b, self.max_records, self.record_block)
        context = blocks[:, :, : self.context_dim]
        pairs = blocks[
            :, :, self.context_dim : self.context_dim + self.max_pairs * self.pair_dim
        ].reshape(b, self.max_records, self.max_pairs, self.pair_dim)
        pair_mask = blocks[:, :, self.context_dim + self.max_pairs * self.pair_dim :]
        return context, pairs, pair_mask, counts


class RelationalPolicy(_ActorCriticBase):
    """Pair encoder with local (within-episode) and global (across-episode)
    sum pooling, then trunk and heads.

    The local embedding sums the pair encoder over consecutive-fixation
    rows; the per-episode transform sees that sum together with the episode
    context row, and its outputs are summed across experiment records.
    Padding rows are masked out of both sums.
    """

    kind = "relational"

    def __init__(
        self,
        layout: SeqLayout,
        action_dim: int,
        rng: np.random.Generator,
        log_std_init: float = -0.5,
    ):
        self.layout = layout
        self.obs_dim = layout.obs_dim
        self.action_dim = action_dim
        self.pair_encoder = Network.build(
            [layout.pair_dim, *SET_ENCODER_DIMS], rng, out_activation=RELU
        )
        self.episode_net = Network.build(
            [EMBED_DIM + layout.context_dim, EMBED_DIM, EMBED_DIM], rng, out_activation=RELU
        )
        self.trunk = Network.build([EMBED_DIM + 1, *SET_TRUNK_DIMS], rng, out_activation=RELU)
        last = SET_TRUNK_DIMS[-1]
        self.policy_head = Network.build([last, *SET_HEAD_DIMS, action_dim], rng, out_gain=0.01)
        self.value_head = Network.build([last, *SET_HEAD_DIMS, 1], rng)
        self.head = GaussianHead.build(action_dim, log_std_init)

    def local_embeddings(self, obs: np.ndarray) -> np.ndarray:
        """Per-record pair-sum embeddings (B, max_records, E); test surface."""
        obs, squeeze = _batched(obs)
        b = obs.shape[0]
        lay = self.layout
        _, pairs, pair_mask, _ = lay.unpack(obs)
        enc, _ = self.pair_encoder.forward(pairs.reshape(-1, lay.pair_dim))
        enc = enc.reshape(b, lay.max_records, lay.max_pairs, EMBED_DIM)
        e_l = np.einsum("bmpe,bmp->bme", enc, pair_mask)
        return e_l[0] if squeeze else e_l

    def global_embedding(self, obs: np.ndarray) -> np.ndarray:
        obs, squeeze = _batched(obs)
        trunk_in, _ = self._embed(obs)
        e = trunk_in[:, :EMBED_DIM]
        return e[0] if squeeze else e

    def _embed(self, obs: np.ndarray):
        b = obs.shape[0]
        lay = self.layout
        context, pairs, pair_mask, counts = lay.unpack(obs)
        enc, pcache = self.pair_encoder.forward(pairs.reshape(-1, lay.pair_dim))
        enc = enc.reshape(b, lay.max_records, lay.max_pairs, EMBED_DIM)
        e_l = np.einsum("bmpe,bmp->bme", enc, pair_mask)
        g_in = np.concatenate([e_l, context], axis=2).reshape(
            b * lay.max_records, EMBED_DIM + lay.context_dim
        )
        g_out, gcache = self.episode_net.forward(g_in)
        g_out = g_out.reshape(b, lay.max_records, EMBED_DIM)
        rec_mask = np.arange(lay.max_records)[None, :] < counts[:, None]
        e_g = np.einsum("bme,bm->be", g_out, rec_mask.astype(np.float64))
        trunk_in = np.concatenate([e_g, (counts / lay.max_records)[:, None]], axis=1)
        return trunk_in, (pcache, gcache, pair_mask, rec_mask)

    def _embed_backward(self, embed_cache, d_trunk_in):
        pcache, gcache, pair_mask, rec_mask = embed_cache
        b, m = rec_mask.shape
        lay = self.layout
        d_eg = d_trunk_in[:, :EMBED_DIM]
        d_gout = (d_eg[:, None, :] * rec_mask[:, :, None]).reshape(b * m, EMBED_DIM)
        ggrads, d_gin = self.episode_net.backward(gcache, d_gout)
        d_el = d_gin.reshape(b, m, EMBED_DIM + lay.context_dim)[:, :, :EMBED_DIM]
        d_enc = d_el[:, :, None, :] * pair_mask[:, :, :, None]
        fgrads, _ = self.pair_encoder.backward(pcache, d_enc.reshape(-1, EMBED_DIM))
        return fgrads + ggrads

    def _embed_params(self):
        return self.pair_encoder.params() + self.episode_net.params()

    def arch_meta(self) -> dict:
        return {
            "kind": self.kind,
            "action_dim": self.action_dim,
            "max_records": self.layout.max_records,
            "context_dim": self.layout.context_dim,
            "max_pairs": self.layout.max_pairs,
            "pair_dim": self.layout.pair_dim,
        }


# ---------------------------------------------------------------------------
# Checkpoint round-trip: arch descriptor header + flat parameter arrays.
# ---------------------------------------------------------------------------


def save_policy(path, policy, extra_meta: dict | None = None) -> None:
    meta = {"arch": policy.arch_meta()}
    if extra_meta:
        meta["extra"] = extra_meta
    save_checkpoint(path, policy.params(), meta)


def build_policy(arch: dict) -> _ActorCriticBase:
    rng = np.random.default_rng(0)  # overwritten by set_params
    kind = arch["kind"]
    if kind == "mlp":
        return ActorCriticMLP(
            arch["obs_dim"],
            arch["action_dim"],
            rng,
            trunk_dims=tuple(arch["trunk_dims"]),
            head_dims=tuple(arch["head_dims"]),
        )
    if kind == "pooled":
        layout = PooledLayout(arch["max_records"], arch["record_dim"])
        return PooledPolicy(layout, arch["action_dim"], rng)
    if kind == "relational":
        layout = SeqLayout(
            arch["max_records"], arch["context_dim"], arch["max_pairs"], arch["pair_dim"]
        )
        return RelationalPolicy(layout, arch["action_dim"], rng)
    raise ValueError(f"unknown policy kind {kind!r}")


def load_policy(path) -> tuple[_ActorCriticBase, dict]:
    arrays, meta = load_checkpoint(path)
    policy = build_policy(meta["arch"])
    policy.set_params(arrays)
    return policy, meta.get("extra", {})

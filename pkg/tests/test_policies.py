import numpy as np
import pytest

from pointlab.nn import IDENTITY, Layer, Network
from pointlab.policies import (
    EMBED_DIM,
    ActorCriticMLP,
    PooledLayout,
    PooledPolicy,
    RelationalPolicy,
    SeqLayout,
    load_policy,
    save_policy,
)

from helpers import max_relative_error


def pooled_policy(seed=0, m=4, d=7, action_dim=3):
    return PooledPolicy(PooledLayout(m, d), action_dim, np.random.default_rng(seed))


def seq_layout(m=4, c=5, pairs=6, pd=4):
    return SeqLayout(max_records=m, context_dim=c, max_pairs=pairs, pair_dim=pd)


def relational_policy(seed=0, layout=None, action_dim=3):
    return RelationalPolicy(layout or seq_layout(), action_dim, np.random.default_rng(seed))


def random_records(rng, k, d=7):
    return rng.standard_normal((k, d))


def random_blocks(rng, layout, k, pairs_per=None):
    blocks = []
    for i in range(k):
        n_pairs = rng.integers(0, layout.max_pairs + 1) if pairs_per is None else pairs_per
        blocks.append(
            layout.pack_record(
                rng.standard_normal(layout.context_dim),
                rng.standard_normal((n_pairs, layout.pair_dim)),
            )
        )
    return blocks


class TestPooled:
    def test_single_record_embedding_equals_encoding(self):
        rng = np.random.default_rng(0)
        policy = pooled_policy()
        rec = random_records(rng, 1)
        obs = policy.layout.pack(rec)
        embed = policy.embed_records(obs)
        enc, _ = policy.encoder.forward(rec[0])
        np.testing.assert_allclose(embed, enc, atol=1e-12)

    def test_duplicated_record_mean_idempotent(self):
        rng = np.random.default_rng(1)
        policy = pooled_policy()
        rec = random_records(rng, 1)
        one = policy.embed_records(policy.layout.pack(rec))
        two = policy.embed_records(policy.layout.pack(np.vstack([rec, rec])))
        np.testing.assert_allclose(one, two, atol=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        policy = pooled_policy()
        recs = random_records(rng, 4)
        a, _, _ = policy.act(policy.layout.pack(recs), deterministic=True)
        b, _, _ = policy.act(policy.layout.pack(recs[::-1]), deterministic=True)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_zero_records_uses_null_embedding(self):
        policy = pooled_policy()
        policy.null_embed[:] = np.linspace(0, 1, EMBED_DIM)
        obs = policy.layout.pack(np.zeros((0, 7)))
        np.testing.assert_allclose(policy.embed_records(obs), policy.null_embed, atol=1e-15)

    def test_capacity_enforced(self):
        policy = pooled_policy(m=2)
        with pytest.raises(ValueError, match="capacity"):
            policy.layout.pack(np.zeros((3, 7)))


class TestRelational:
    def test_single_fixation_episode_has_zero_local_embedding(self):
        rng = np.random.default_rng(3)
        layout = seq_layout()
        policy = relational_policy(layout=layout)
        block = layout.pack_record(rng.standard_normal(layout.context_dim), np.zeros((0, layout.pair_dim)))
        e_l = policy.local_embeddings(layout.pack([block]))
        np.testing.assert_array_equal(e_l[0], np.zeros(EMBED_DIM))

    def test_local_embedding_matches_hand_computation(self):
        rng = np.random.default_rng(4)
        layout = seq_layout(m=1, c=3, pairs=4, pd=4)
        policy = relational_policy(layout=layout)
        # Tiny known single-layer pair encoder: f(x) = x @ w + b.
        w = rng.standard_normal((layout.pair_dim, EMBED_DIM)) * 0.1
        b = rng.standard_normal(EMBED_DIM) * 0.1
        policy.pair_encoder = Network([Layer(w, b, IDENTITY)])
        pairs = rng.standard_normal((2, layout.pair_dim))
        block = layout.pack_record(rng.standard_normal(3), pairs)
        e_l = policy.local_embeddings(layout.pack([block]))[0]
        expected = (pairs[0] @ w + b) + (pairs[1] @ w + b)
        np.testing.assert_allclose(e_l, expected, atol=1e-12)

    def test_padding_rows_masked_out(self):
        rng = np.random.default_rng(5)
        layout = seq_layout()
        policy = relational_policy(layout=layout)
        ctx = rng.standard_normal(layout.context_dim)
        pairs = rng.standard_normal((2, layout.pair_dim))
        a = policy.local_embeddings(layout.pack([layout.pack_record(ctx, pairs)]))
        # Same record but with junk written into the padded area beyond the mask.
        block = layout.pack_record(ctx, pairs)
        body = block[layout.context_dim : layout.context_dim + layout.max_pairs * layout.pair_dim]
        body.reshape(layout.max_pairs, layout.pair_dim)[3:] = 99.0
        b = policy.local_embeddings(layout.pack([block]))
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_experiment_permutation_invariance(self):
        rng = np.random.default_rng(6)
        layout = seq_layout()
        policy = relational_policy(layout=layout)
        blocks = random_blocks(rng, layout, 4)
        a, _, _ = policy.act(layout.pack(blocks), deterministic=True)
        b, _, _ = policy.act(layout.pack(blocks[::-1]), deterministic=True)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_within_episode_order_sensitivity(self):
        rng = np.random.default_rng(7)
        layout = seq_layout()
        policy = relational_policy(layout=layout)
        ctx = rng.standard_normal(layout.context_dim)
        fixations = rng.standard_normal((4, 2))

        def pairs_for(fx):
            return np.array(
                [np.concatenate([fx[t], fx[t + 1]]) for t in range(len(fx) - 1)]
            )

        orig = policy.local_embeddings(layout.pack([layout.pack_record(ctx, pairs_for(fixations))]))
        swapped_fx = fixations[[2, 1, 0, 3]]  # swap non-adjacent fixations
        swapped = policy.local_embeddings(
            layout.pack([layout.pack_record(ctx, pairs_for(swapped_fx))])
        )
        assert not np.allclose(orig, swapped, atol=1e-6)

    def test_deterministic_act_repeatable(self):
        rng = np.random.default_rng(8)
        layout = seq_layout()
        policy = relational_policy(layout=layout)
        obs = layout.pack(random_blocks(rng, layout, 3))
        a, _, _ = policy.act(obs, deterministic=True)
        b, _, _ = policy.act(obs, deterministic=True)
        np.testing.assert_array_equal(a, b)


def subset_finite_diff_check(policy, obs, n_entries=3, h=1e-6, seed=0):
    """Compare backward() to finite differences on a random parameter subset.

    Parameters are nudged off zero first: freshly built nets have zero
    biases, which parks ReLU pre-activations exactly on the kink where the
    two sides of a central difference disagree by construction.
    """
    rng = np.random.default_rng(seed)
    for p in policy.params():
        p += rng.normal(0.0, 0.01, p.shape)
    b = obs.shape[0]
    g_mean = rng.standard_normal((b, policy.action_dim))
    g_value = rng.standard_normal(b)

    def loss():
        ev = policy.evaluate(obs, np.zeros((b, policy.action_dim)))
        return float(np.sum(ev.mean * g_mean) + np.sum(ev.values * g_value))

    ev = policy.evaluate(obs, np.zeros((b, policy.action_dim)))
    analytic = policy.backward(ev.cache, g_mean, g_value, np.zeros(policy.action_dim))
    worst = 0.0
    for arr, grad in zip(policy.params(), analytic):
        for _ in range(min(n_entries, arr.size)):
            idx = tuple(rng.integers(0, s) for s in arr.shape) if arr.ndim else ()
            orig = arr[idx]
            arr[idx] = orig + h
            hi = loss()
            arr[idx] = orig - h
            lo = loss()
            arr[idx] = orig
            fd = (hi - lo) / (2 * h)
            denom = max(abs(fd), abs(grad[idx]), 1e-4)
            worst = max(worst, abs(fd - grad[idx]) / denom)
    return worst


class TestBackward:
    def test_pooled_backward_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        policy = pooled_policy(seed=3, m=3, d=5, action_dim=2)
        obs = np.stack(
            [
                policy.layout.pack(random_records(rng, 0, 5)),
                policy.layout.pack(random_records(rng, 2, 5)),
                policy.layout.pack(random_records(rng, 3, 5)),
            ]
        )
        assert subset_finite_diff_check(policy, obs) <= 1e-4

    def test_relational_backward_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        layout = seq_layout(m=3, c=4, pairs=3, pd=4)
        policy = relational_policy(seed=4, layout=layout, action_dim=2)
        obs = np.stack(
            [
                layout.pack(random_blocks(rng, layout, 0)),
                layout.pack(random_blocks(rng, layout, 2)),
                layout.pack(random_blocks(rng, layout, 3, pairs_per=2)),
            ]
        )
        assert subset_finite_diff_check(policy, obs) <= 1e-4


class TestCheckpointRoundTrip:
    @pytest.mark.parametrize("builder", ["mlp", "pooled", "relational"])
    def test_save_load_bit_exact(self, tmp_path, builder):
        rng = np.random.default_rng(11)
        if builder == "mlp":
            policy = ActorCriticMLP(5, 2, rng, trunk_dims=(8, 8), head_dims=(8,))
            obs = rng.standard_normal(5)
        elif builder == "pooled":
            policy = pooled_policy(seed=5)
            obs = policy.layout.pack(random_records(rng, 2))
        else:
            layout = seq_layout()
            policy = relational_policy(seed=6, layout=layout)
            obs = layout.pack(random_blocks(rng, layout, 2))
        path = tmp_path / "p.ckpt"
        save_policy(path, policy, extra_meta={"note": "test"})
        loaded, extra = load_policy(path)
        assert extra == {"note": "test"}
        for a, b in zip(policy.params(), loaded.params()):
            assert a.tobytes() == b.tobytes()
        ao, _, _ = policy.act(obs, deterministic=True)
        bo, _, _ = loaded.act(obs, deterministic=True)
        np.testing.assert_array_equal(ao, bo)

import numpy as np
import pytest

from sparseattn import transformer as tfm
from sparseattn.numerics import Rng, gradcheck

SMALL = tfm.TransformerConfig(n=6, d=8, heads=2, d_ff=12, blocks=2, vocab=12)


def small_setup(seed=7, batch=2):
    rng = Rng(seed)
    params = tfm.init_params(SMALL, rng)
    tokens = rng.uniform_array((batch, SMALL.n), 4, SMALL.vocab).astype(int)
    targets = np.full_like(tokens, -1)
    targets[:, 2] = tokens[:, 2]
    targets[0, 4] = tokens[0, 4]
    p = rng.uniform_array((SMALL.heads, SMALL.n, SMALL.n), 0.05, 0.95)
    p = (p + p.transpose(0, 2, 1)) / 2
    return params, tokens, targets, p


def reference_attention_layer(x, block, p=None, c=1e4):
    """Straight-line single-sequence reference: explicit loops, no einsum."""
    n, d = x.shape
    heads = block.wq.shape[0]
    out = x.copy()
    for h in range(heads):
        q, k, v = x @ block.wq[h], x @ block.wk[h], x @ block.wv[h]
        s = q @ k.T
        if p is not None:
            s = s - c * (1.0 - p[h])
        a = np.empty_like(s)
        for i in range(n):
            e = np.exp(s[i] - s[i].max())
            a[i] = e / e.sum()
        out = out + (a @ v) @ block.wo[h].T
    return out


class TestAttentionMatrix:
    def test_zero_weights_uniform(self):
        x = Rng(1).uniform_array((5, 8), -1, 1)
        a = tfm.attention_matrix(x, np.zeros((8, 4)), np.zeros((8, 4)))
        np.testing.assert_allclose(a, np.full((5, 5), 0.2), atol=1e-15)

    def test_single_token(self):
        a = tfm.attention_matrix(np.ones((1, 4)), np.ones((4, 2)), np.ones((4, 2)))
        np.testing.assert_array_equal(a, [[1.0]])

    def test_rows_stochastic(self):
        rng = Rng(3)
        a = tfm.attention_matrix(rng.uniform_array((4, 4), -2, 2),
                                 rng.uniform_array((4, 4), -1, 1),
                                 rng.uniform_array((4, 4), -1, 1))
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            tfm.attention_matrix(np.ones((3, 5)), np.ones((4, 2)), np.ones((4, 2)))


class TestMaskedAttentionMatrix:
    def test_all_ones_reduces_exactly(self):
        rng = Rng(5)
        x = rng.uniform_array((4, 4), -2, 2)
        wq = rng.uniform_array((4, 2), -1, 1)
        wk = rng.uniform_array((4, 2), -1, 1)
        plain = tfm.attention_matrix(x, wq, wk)
        masked = tfm.masked_attention_matrix(x, wq, wk, np.ones((4, 4)), 1e4)
        np.testing.assert_allclose(masked, plain, atol=1e-15)

    def test_identity_mask_concentrates_diagonal(self):
        rng = Rng(6)
        x = rng.uniform_array((4, 4), -1, 1)
        a = tfm.masked_attention_matrix(x, rng.uniform_array((4, 2), -0.1, 0.1),
                                        rng.uniform_array((4, 2), -0.1, 0.1),
                                        np.eye(4), 1e4)
        np.testing.assert_allclose(a, np.eye(4), atol=1e-12)

    def test_partial_row_zero_weights(self):
        x = np.zeros((3, 4))
        p = np.ones((3, 3))
        p[0, 2] = 0.0
        a = tfm.masked_attention_matrix(x, np.zeros((4, 2)), np.zeros((4, 2)), p, 1e4)
        np.testing.assert_allclose(a[0], [0.5, 0.5, 0.0], atol=1e-15)

    def test_fully_masked_row_is_uniform(self):
        x = np.zeros((3, 4))
        p = np.ones((3, 3))
        p[1, :] = 0.0  # residual path carries the token; row degrades to uniform
        a = tfm.masked_attention_matrix(x, np.zeros((4, 2)), np.zeros((4, 2)), p, 1e4)
        np.testing.assert_allclose(a[1], [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


class TestLayerForwards:
    def test_zero_output_projection_is_identity(self):
        rng = Rng(2)
        params = tfm.init_params(SMALL, rng)
        block = params.blocks[0]
        block.wo[...] = 0.0
        x = rng.uniform_array((SMALL.n, SMALL.d), -1, 1)
        np.testing.assert_array_equal(tfm.attention_layer_forward(x, block, SMALL), x)

    def test_feedforward_identity_and_bias(self):
        rng = Rng(4)
        params = tfm.init_params(SMALL, rng)
        block = params.blocks[0]
        x = rng.uniform_array((SMALL.n, SMALL.d), -1, 1)
        block.w1[...] = 0.0
        block.b1[...] = 0.0
        block.w2[...] = 0.0
        block.b2[...] = 0.0
        np.testing.assert_array_equal(tfm.feedforward_forward(x, block), x)
        v = rng.uniform_array(SMALL.d, -1, 1)
        block.b2[...] = v
        np.testing.assert_allclose(tfm.feedforward_forward(x, block), x + v, atol=1e-15)

    def test_matches_straight_line_reference(self):
        rng = Rng(8)
        params = tfm.init_params(SMALL, rng)
        x = rng.uniform_array((SMALL.n, SMALL.d), -1, 1)
        p = rng.uniform_array((SMALL.heads, SMALL.n, SMALL.n), 0.2, 1.0)
        got = tfm.attention_layer_forward(x, params.blocks[0], SMALL, p)
        want = reference_attention_layer(x, params.blocks[0], p, SMALL.mask_penalty)
        np.testing.assert_allclose(got, want, atol=1e-12)

        block = params.blocks[1]
        z = rng.uniform_array((SMALL.n, SMALL.d), -1, 1)
        ref = z + np.maximum(z @ block.w1 + block.b1, 0.0) @ block.w2 + block.b2
        np.testing.assert_allclose(tfm.feedforward_forward(z, block), ref, atol=1e-12)


class TestMlmLoss:
    def test_uniform_logits_give_log_vocab(self):
        params = tfm.zeros_like_params(tfm.init_params(SMALL, Rng(0)))
        _, tokens, targets, p = small_setup()
        loss, _, _ = tfm.mlm_forward_loss(params, SMALL, tokens, targets, p,
                                          want_grads=False)
        assert loss == pytest.approx(np.log(SMALL.vocab), abs=1e-6)

    def test_rejects_empty_prediction_set(self):
        params, tokens, _, p = small_setup()
        with pytest.raises(ValueError):
            tfm.mlm_forward_loss(params, SMALL, tokens, np.full_like(tokens, -1), p)

    def test_rejects_out_of_range_tokens(self):
        params, tokens, targets, p = small_setup()
        bad = tokens.copy()
        bad[0, 0] = SMALL.vocab
        with pytest.raises(ValueError):
            tfm.mlm_forward_loss(params, SMALL, bad, targets, p)

    def test_gradcheck_weights_and_mask(self):
        params, tokens, targets, p = small_setup()

        def f_w(vec):
            pp = tfm.vector_to_params(vec, params)
            loss, grads, _ = tfm.mlm_forward_loss(pp, SMALL, tokens, targets, p)
            return loss, tfm.params_to_vector(grads)

        vec = tfm.params_to_vector(params)
        coords = Rng(1).choice_without_replacement(vec.size, 200)
        assert gradcheck(f_w, vec, 1e-5, coords=coords).max_rel_error < 1e-4

        def f_p(pvec):
            loss, _, dp = tfm.mlm_forward_loss(params, SMALL, tokens, targets,
                                               pvec.reshape(p.shape))
            return loss, dp.ravel()

        assert gradcheck(f_p, p.ravel(), 1e-5).max_rel_error < 1e-4

    def test_gradcheck_multiply_mode(self):
        cfg = tfm.TransformerConfig(n=6, d=8, heads=2, d_ff=12, blocks=2,
                                    vocab=12, mask_mode="multiply")
        params, tokens, targets, p = small_setup()

        def f_p(pvec):
            loss, _, dp = tfm.mlm_forward_loss(params, cfg, tokens, targets,
                                               pvec.reshape(p.shape))
            return loss, dp.ravel()

        assert gradcheck(f_p, p.ravel(), 1e-5).max_rel_error < 1e-4

    def test_sgd_step_decreases_batch_loss(self):
        params, tokens, targets, p = small_setup()
        loss0, grads, _ = tfm.mlm_forward_loss(params, SMALL, tokens, targets, p)
        tfm.update_params_(params, grads, 0.05)
        loss1, _, _ = tfm.mlm_forward_loss(params, SMALL, tokens, targets, p,
                                           want_grads=False)
        assert loss1 < loss0

    def test_forward_deterministic(self):
        params, tokens, targets, p = small_setup()
        a, _, _ = tfm.mlm_forward_loss(params, SMALL, tokens, targets, p,
                                       want_grads=False)
        b, _, _ = tfm.mlm_forward_loss(params, SMALL, tokens, targets, p,
                                       want_grads=False)
        assert a == b


class TestRenormalizationProperties:
    def test_random_configurations(self):
        rng = Rng(99)
        for trial in range(25):
            n = 3 + rng.randint(6)
            d = 4 + 2 * rng.randint(3)
            x = rng.uniform_array((n, d), -2, 2)
            wq = rng.uniform_array((d, 4), -0.5, 0.5)
            wk = rng.uniform_array((d, 4), -0.5, 0.5)
            p = rng.uniform_array((n, n), 0.0, 1.0)
            p[0, -1] = 0.0
            p[0, 0] = 1.0
            a = tfm.masked_attention_matrix(x, wq, wk, p, 1e4)
            np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
            assert a[0, -1] < 1e-12
            plain = tfm.attention_matrix(x, wq, wk)
            full = tfm.masked_attention_matrix(x, wq, wk, np.ones((n, n)), 1e4)
            np.testing.assert_allclose(full, plain, atol=1e-15)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params, _, _, _ = small_setup()
        path = tmp_path / "ckpt.json"
        tfm.save_checkpoint(path, SMALL, params, extra={"step": 3})
        cfg2, params2, extra = tfm.load_checkpoint(path)
        assert cfg2 == SMALL
        assert extra == {"step": 3}
        for a, b in zip(params.arrays(), params2.arrays()):
            np.testing.assert_array_equal(a, b)


class TestConfigValidation:
    def test_divisibility(self):
        with pytest.raises(ValueError):
            tfm.TransformerConfig(n=4, d=10, heads=4, d_ff=8, blocks=1, vocab=8)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            tfm.TransformerConfig(mask_mode="other")

import numpy as np
import pytest

from fscil.errors import (
    DimensionMismatchError,
    NonFiniteError,
    StaleCacheError,
    ZeroNormError,
)
from fscil.network import AffineLayer, CosineHead, EmbeddingNet, GradBuffer, backward
from fscil.numerics import Rng, finite_diff_grad


def identity_net(dim: int) -> EmbeddingNet:
    h = AffineLayer(np.eye(dim), np.zeros(dim))
    g = AffineLayer(np.eye(dim), np.zeros(dim))
    return EmbeddingNet([h], [g])


def random_net(in_dim, mid_dim, embed_dim, seed=0) -> EmbeddingNet:
    return EmbeddingNet.build(in_dim, mid_dim, embed_dim, Rng(seed))


class TestForward:
    def test_identity_layer(self):
        net = identity_net(2)
        mid, _ = net.forward_mid([1.0, 2.0])
        np.testing.assert_array_equal(mid, [1.0, 2.0])

    def test_zero_weights_give_zero_preactivation(self):
        layer = AffineLayer(np.zeros((3, 2)), np.zeros(3))
        out, _ = layer.forward(np.array([[5.0, -7.0]]))
        np.testing.assert_array_equal(out, np.zeros((1, 3)))

    def test_wrong_dimension(self):
        net = random_net(4, 6, 3)
        with pytest.raises(DimensionMismatchError):
            net.forward_mid([1.0, 2.0])

    def test_identity_g_from_mid(self):
        net = identity_net(2)
        out, _ = net.forward_from_mid([0.5, 0.5])
        np.testing.assert_array_equal(out, [0.5, 0.5])

    def test_nonfinite_mid_rejected(self):
        net = identity_net(2)
        with pytest.raises(NonFiniteError):
            net.forward_from_mid([np.nan, 0.0])

    def test_composition_equals_full_forward(self):
        net = random_net(5, 8, 4, seed=3)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(size=5)
            mid, _ = net.forward_mid(x)
            via_mid, _ = net.forward_from_mid(mid)
            full, _ = net.forward(x)
            np.testing.assert_array_equal(via_mid, full)

    def test_forward_deterministic(self):
        net = random_net(6, 10, 4, seed=9)
        x = np.linspace(-1, 1, 6)
        a, _ = net.forward(x)
        b, _ = net.forward(x)
        np.testing.assert_array_equal(a, b)

    def test_batch_matches_per_instance(self):
        net = random_net(4, 7, 3, seed=5)
        rng = np.random.default_rng(2)
        xs = rng.normal(size=(6, 4))
        batch, _ = net.forward(xs)
        for i in range(6):
            single, _ = net.forward(xs[i])
            np.testing.assert_allclose(single, batch[i], atol=1e-15)


class TestCosineHead:
    def test_parallel_prototype_hits_scale(self):
        head = CosineHead(np.array([[2.0, 0.0]]), np.array([[0.0, 1.0]]), scale=16.0)
        logits, _ = head.logits(np.array([5.0, 0.0]))
        assert logits[0] == pytest.approx(16.0, abs=1e-12)

    def test_orthogonal_prototype_zero(self):
        head = CosineHead(np.array([[1.0, 0.0], [0.0, 3.0]]), np.array([[1.0, 1.0]]),
                          scale=16.0)
        logits, _ = head.logits(np.array([1.0, 0.0]))
        assert logits[1] == pytest.approx(0.0, abs=1e-12)

    def test_antiparallel_virtual(self):
        head = CosineHead(np.array([[1.0, 0.0]]), np.array([[-0.5, 0.0]]), scale=16.0)
        logits, _ = head.logits(np.array([2.0, 0.0]))
        assert logits[1] == pytest.approx(-16.0, abs=1e-12)

    def test_logits_bounded_by_scale(self):
        rng = Rng(21)
        head = CosineHead.init_random(5, 3, 8, rng, scale=16.0)
        gen = np.random.default_rng(1)
        for _ in range(100):
            logits, _ = head.logits(gen.normal(size=8))
            assert np.all(np.abs(logits) <= 16.0 + 1e-9)

    def test_block_layout(self):
        head = CosineHead.init_random(4, 2, 6, Rng(0))
        logits, _ = head.logits(np.ones(6))
        assert logits.shape == (6,)
        assert head.num_known == 4 and head.num_virtual == 2

    def test_zero_embedding_rejected(self):
        head = CosineHead.init_random(2, 1, 4, Rng(0))
        with pytest.raises(ZeroNormError):
            head.logits(np.zeros(4))

    def test_unscaled_flag(self):
        head = CosineHead(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), scale=16.0)
        logits, _ = head.logits(np.array([1.0, 1.0]), use_scale=False)
        assert logits[0] == pytest.approx(np.sqrt(0.5), abs=1e-12)


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        net = random_net(3, 5, 4, seed=1)
        head = CosineHead.init_random(3, 2, 4, Rng(2))
        x = np.array([[0.4, -0.2, 0.9]])
        emb, caches = net.forward(x)
        logits, head_cache = head.logits(emb)
        buf = backward(net, head, np.zeros_like(logits), (caches, head_cache))
        for g in buf.arrays():
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_stale_cache_rejected(self):
        head = CosineHead.init_random(2, 1, 4, Rng(3))
        _, cache = head.logits(np.ones(4))
        with pytest.raises(StaleCacheError):
            head.backward(np.zeros((1, 5)), cache)

    def test_half_squared_linear_layer_vs_fd(self):
        # L = 0.5 * ||W x||^2 through a single linear layer
        rng = np.random.default_rng(0)
        W = rng.normal(size=(3, 4))
        layer = AffineLayer(W.copy(), np.zeros(3))
        x = rng.normal(size=(1, 4))
        out, cache = layer.forward(x)
        _, dW, _ = layer.backward(out, cache)  # d(0.5*||y||^2)/dy = y

        def loss(w_flat):
            return 0.5 * float(np.sum((x @ w_flat.reshape(3, 4).T) ** 2))

        fd = finite_diff_grad(loss, W.ravel(), step=1e-5)
        assert np.linalg.norm(dW.ravel() - fd) / np.linalg.norm(fd) < 1e-6

    def test_cosine_logit_grad_vs_fd(self):
        # single logit k as a function of the embedding
        head = CosineHead.init_random(3, 2, 5, Rng(4), scale=16.0)
        gen = np.random.default_rng(5)
        for k in range(head.num_outputs):
            emb = gen.normal(size=5)
            _, cache = head.logits(emb)
            upstream = np.zeros(head.num_outputs)
            upstream[k] = 1.0
            d_emb, _, _ = head.backward(upstream, cache)

            def logit_k(e):
                vals, _ = head.logits(e)
                return float(vals[k])

            fd = finite_diff_grad(logit_k, emb, step=1e-5)
            assert np.linalg.norm(d_emb - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-6

    def test_cosine_prototype_grad_vs_fd(self):
        head = CosineHead.init_random(2, 2, 4, Rng(8), scale=16.0)
        gen = np.random.default_rng(9)
        emb = gen.normal(size=4)
        _, cache = head.logits(emb)
        upstream = gen.normal(size=head.num_outputs)
        _, d_known, d_virtual = head.backward(upstream, cache)
        analytic = np.concatenate([d_known, d_virtual]).ravel()
        proto0 = head.prototypes()

        def weighted_logits(p_flat):
            h = CosineHead(p_flat.reshape(4, 4)[:2], p_flat.reshape(4, 4)[2:],
                           scale=16.0)
            vals, _ = h.logits(emb)
            return float(upstream @ vals)

        fd = finite_diff_grad(weighted_logits, proto0.ravel(), step=1e-5)
        assert np.linalg.norm(analytic - fd) / np.linalg.norm(fd) < 1e-6

    @pytest.mark.parametrize("in_dim,mid_dim,embed_dim,n_known,n_virtual,seed",
                             [(4, 6, 3, 3, 2, 11), (7, 16, 8, 5, 1, 21),
                              (2, 10, 16, 2, 4, 31)])
    def test_full_chain_vs_fd(self, in_dim, mid_dim, embed_dim, n_known,
                              n_virtual, seed):
        # scalar loss: weighted sum of scaled cosine logits through the whole net
        net = random_net(in_dim, mid_dim, embed_dim, seed=seed)
        head = CosineHead.init_random(n_known, n_virtual, embed_dim, Rng(seed + 1))
        gen = np.random.default_rng(seed + 2)
        x = gen.normal(size=(1, in_dim))
        upstream = gen.normal(size=(1, head.num_outputs))
        emb, caches = net.forward(x)
        logits, head_cache = head.logits(emb)
        buf = backward(net, head, upstream, (caches, head_cache))

        params = net.param_arrays() + head.param_arrays()
        grads = buf.arrays()
        for p, g in zip(params, grads):
            shape = p.shape
            baseline = p.copy()

            def loss(flat, p=p, shape=shape):
                p[...] = flat.reshape(shape)
                try:
                    e, _ = net.forward(x)
                    v, _ = head.logits(e)
                    return float((upstream * v).sum())
                finally:
                    p[...] = baseline

            fd = finite_diff_grad(loss, baseline.ravel(), step=1e-5)
            rel = np.linalg.norm(g.ravel() - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel < 1e-5, f"parameter shape {shape}: rel err {rel}"


class TestGradBuffer:
    def test_zeros_match_shapes(self):
        net = random_net(3, 4, 2, seed=0)
        head = CosineHead.init_random(2, 2, 2, Rng(1))
        buf = GradBuffer.zeros(net, head)
        params = net.param_arrays() + head.param_arrays()
        assert len(buf.arrays()) == len(params)
        for g, p in zip(buf.arrays(), params):
            assert g.shape == p.shape

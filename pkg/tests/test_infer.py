import numpy as np
import pytest

from thermodet import graph, infer
from thermodet.errors import DimensionError
from thermodet.graph import BN_EPS

from conftest import tiny_graph


class TestRelu6:
    @pytest.mark.parametrize("x,expect", [(-1.0, 0.0), (7.0, 6.0), (3.5, 3.5)])
    def test_scalar_cases(self, x, expect):
        assert infer.relu6(np.array([x]))[0] == expect


class TestFoldBatchnorm:
    def test_identity_bn_keeps_weights(self):
        g = tiny_graph(seed=1)
        folded = infer.fold_batchnorm(g)
        # gamma=1, beta=0, mean=0, var=1 at init: only the 1/sqrt(1+eps)
        # factor remains
        factor = 1.0 / np.sqrt(1.0 + BN_EPS)
        assert np.allclose(folded.params[0].w, g.params[0].w * factor, rtol=1e-6)
        assert not folded.has_batchnorm()

    def test_numerical_equivalence(self, rng):
        g = tiny_graph(widths=(4, 6, 8), seed=2)
        for p in g.params:
            if p.bn_gamma is not None:
                p.bn_gamma += rng.normal(0, 0.3, p.bn_gamma.shape).astype(np.float32)
                p.bn_beta += rng.normal(0, 0.3, p.bn_beta.shape).astype(np.float32)
                p.bn_mean += rng.normal(0, 0.3, p.bn_mean.shape).astype(np.float32)
                p.bn_var = np.abs(
                    p.bn_var + rng.normal(0, 0.3, p.bn_var.shape)
                ).astype(np.float32) + 0.1
        folded = infer.fold_batchnorm(g)
        for _ in range(5):
            x = rng.random((1, 24, 32), dtype=np.float32)
            a = infer.forward(g, x)
            b = infer.forward(folded, x)
            assert np.abs(a - b).max() < 1e-5

    def test_gamma_scales_weights(self, rng):
        g = tiny_graph(seed=3)
        p = g.params[0]
        p.bn_gamma = np.full_like(p.bn_gamma, 2.0)
        sigma2 = np.abs(rng.normal(1.0, 0.2, p.bn_var.shape)).astype(np.float32)
        p.bn_var = sigma2
        folded = infer.fold_batchnorm(g)
        expect = p.w * (2.0 / np.sqrt(sigma2 + BN_EPS))[:, None, None, None]
        assert np.allclose(folded.params[0].w, expect, rtol=1e-6)


class TestForward:
    def test_zero_weights_give_bias_output(self):
        g = tiny_graph(widths=(4, 6), batchnorm=False, seed=0)
        for p in g.params:
            p.w[:] = 0.0
            p.b[:] = 0.0
        g.params[-1].b[:] = np.arange(25, dtype=np.float32)
        out = infer.forward(g, np.random.rand(1, 24, 32).astype(np.float32))
        for c in range(25):
            assert np.allclose(out[c], c)

    def test_output_shape(self):
        g = graph.default_architecture(1)
        out = infer.forward(g, np.zeros((1, 24, 32), dtype=np.float32))
        assert out.shape == (25, 6, 8)

    def test_matches_manual_layer_composition(self, rng):
        g = tiny_graph(widths=(4, 6, 8), batchnorm=False, seed=4)
        x = rng.random((1, 24, 32), dtype=np.float32)
        manual = x
        for desc, p in zip(g.layers, g.params):
            manual = infer.run_layer(desc, p, manual)
        assert np.array_equal(infer.forward(g, x), manual)

    def test_bit_deterministic(self, rng):
        g = tiny_graph(seed=5)
        x = rng.random((1, 24, 32), dtype=np.float32)
        assert np.array_equal(infer.forward(g, x), infer.forward(g, x))

    def test_channel_mismatch(self):
        g = tiny_graph(input_channels=2)
        with pytest.raises(DimensionError):
            infer.forward(g, np.zeros((1, 24, 32), dtype=np.float32))

    def test_forward_collect_layers(self, rng):
        g = tiny_graph(widths=(4, 6), seed=6)
        x = rng.random((1, 24, 32), dtype=np.float32)
        head, acts = infer.forward_collect(g, x)
        assert len(acts) == len(g.layers) + 1
        assert np.array_equal(acts[0], x[None][0])
        assert np.array_equal(acts[-1], head)

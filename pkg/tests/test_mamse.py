import math

import numpy as np
import pytest

from ms2s.errors import DimensionError
from ms2s.mamse import (
    AdditiveRetrieval,
    Aggregator,
    DeepInteractiveModule,
    DimBlock,
    dim_cross_attention,
    select_features,
)
from ms2s.numcore import Tensor, check_gradients, ops


def softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def log_softmax(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def oracle_logits(x, keys, wq, wk, prior):
    return np.array([(x @ wq) @ (row @ wk) for row in keys]) / math.sqrt(wq.shape[1]) + prior


def oracle_attention(x, keys, wq, wk):
    """x: (D,), keys: (K, D_M) -> (D_M,), weights (K,)."""
    w = softmax(oracle_logits(x, keys, wq, wk, 0.0))
    return sum(wi * row for wi, row in zip(w, keys)), w


def oracle_dim(fs, memory, blocks, R=8):
    """Loop-per-speaker reimplementation of the three-block chain."""
    out = []
    for x in fs:
        keys, prior = memory, np.zeros(len(memory))
        for b in blocks:
            z1 = oracle_logits(x, keys, b.w1q.data, b.w1k.data, prior)
            idx = sorted(range(len(keys)), key=lambda i: -z1[i])[: min(R, len(keys))]
            keys = keys[idx]
            z2 = oracle_logits(x, keys, b.w2q.data, b.w2k.data, log_softmax(z1[idx]))
            h2 = softmax(z2) @ keys
            prior = log_softmax(z2)
        out.append(h2)
    return np.array(out)


class TestSelectFeatures:
    def test_all_ones_is_mean(self):
        fp = np.arange(12.0).reshape(4, 3)
        np.testing.assert_allclose(select_features(fp, np.ones((1, 4))).data, fp.mean(axis=0, keepdims=True))

    def test_empty_row_is_zero(self):
        out = select_features(np.ones((4, 3)), np.zeros((2, 4))).data
        np.testing.assert_array_equal(out, np.zeros((2, 3)))

    def test_selected_frames(self):
        fp = np.array([[1.0, 2.0], [10.0, 20.0], [3.0, 6.0]])
        out = select_features(fp, np.array([[1.0, 0.0, 1.0]])).data
        np.testing.assert_allclose(out, [[2.0, 4.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            select_features(np.ones((4, 3)), np.ones((1, 5)))


class TestCrossAttention:
    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_single_key(self):
        key = self.rng.normal(size=(1, 4))
        out, w = dim_cross_attention(self.rng.normal(size=(1, 4)), key, self.rng.normal(size=(4, 4)), self.rng.normal(size=(4, 4)))
        np.testing.assert_array_equal(out.data, key)

    def test_identical_keys(self):
        row = self.rng.normal(size=(1, 5))
        keys = np.repeat(row, 6, axis=0)
        out, w = dim_cross_attention(self.rng.normal(size=(1, 4)), keys, self.rng.normal(size=(4, 4)), self.rng.normal(size=(5, 4)))
        np.testing.assert_allclose(out.data, row, atol=1e-12)
        assert abs(softmax(w.data[0]).sum() - 1) < 1e-12

    def test_dense_oracle(self):
        x = self.rng.normal(size=(1, 4))
        keys = self.rng.normal(size=(3, 4))
        wq, wk = self.rng.normal(size=(4, 4)), self.rng.normal(size=(4, 4))
        out, _ = dim_cross_attention(x, keys, wq, wk)
        ref, _ = oracle_attention(x[0], keys, wq, wk)
        assert np.abs(out.data[0] - ref).max() <= 1e-10


class TestDim:
    def make(self, D=16, DM=12, seed=1, R=8):
        return DeepInteractiveModule(D, DM, np.random.default_rng(seed), top_r=R)

    def test_matches_oracle_with_truncation(self):
        rng = np.random.default_rng(2)
        dim = self.make(R=4)
        fs = rng.normal(size=(3, 16))
        mem = rng.normal(size=(10, 12))
        out = dim(fs, mem).data
        np.testing.assert_allclose(out, oracle_dim(fs, mem, dim.blocks, R=4), atol=1e-10)

    def test_small_memory_spans_memory_rows(self):
        rng = np.random.default_rng(3)
        blk = DimBlock(8, 6, rng, top_r=8)
        mem = rng.normal(size=(5, 6))
        _, ctx, prior = blk(Tensor(rng.normal(size=(1, 8))), mem)
        np.testing.assert_array_equal(ctx.data, mem)
        assert abs(np.exp(prior.data).sum() - 1.0) < 1e-12

    def test_truncates_to_top_r(self):
        rng = np.random.default_rng(4)
        blk = DimBlock(8, 6, rng, top_r=3)
        mem = rng.normal(size=(7, 6))
        _, ctx, prior = blk(Tensor(rng.normal(size=(2, 1, 8))), mem)
        assert ctx.shape == (2, 3, 6) and prior.shape == (2, 1, 3)
        for rows in ctx.data:
            assert all(np.abs(mem - r).sum(axis=1).min() == 0 for r in rows)

    def test_dominant_row(self):
        D = DM = 8
        rng = np.random.default_rng(4)
        blk = DimBlock(D, DM, rng)
        for w in (blk.w1q, blk.w1k, blk.w2q, blk.w2k):
            w.data[...] = np.eye(D)
        mem = np.eye(DM)[:5] * 1.0
        target = mem[2]
        q = 20.0 * target[None, :]
        h2, _, _ = blk(q, mem)
        cos = h2.data[0] @ target / np.linalg.norm(h2.data[0])
        assert cos > 0.99

    def test_tiny_weights_give_memory_mean(self):
        dim = self.make(D=8, DM=6)
        for p in dim.parameters().values():
            p.data *= 1e-4
        rng = np.random.default_rng(5)
        mem = rng.normal(size=(6, 6))
        out = dim(rng.normal(size=(2, 8)), mem).data
        np.testing.assert_allclose(out, np.repeat(mem.mean(axis=0, keepdims=True), 2, axis=0), atol=1e-3)

    def test_convex_hull_bound(self):
        dim = self.make()
        for seed in range(100):
            rng = np.random.default_rng(seed)
            K = int(rng.integers(1, 15))
            mem = rng.normal(size=(K, 12))
            out = dim(rng.normal(size=(3, 16)) * 3, mem).data
            assert np.all(out >= mem.min(axis=0) - 1e-6) and np.all(out <= mem.max(axis=0) + 1e-6)

    def test_speaker_permutation(self):
        dim = self.make()
        rng = np.random.default_rng(6)
        fs, mem = rng.normal(size=(4, 16)), rng.normal(size=(9, 12))
        perm = np.array([2, 0, 3, 1])
        np.testing.assert_allclose(dim(fs[perm], mem).data, dim(fs, mem).data[perm], atol=1e-12)

    def test_gradients(self):
        dim = self.make(D=16, DM=12)
        rng = np.random.default_rng(7)
        fs = Tensor(rng.normal(size=(2, 16)), requires_grad=True)
        mem = rng.normal(size=(8, 12))
        w = rng.normal(size=(2, 12))

        def loss():
            return ops.sum(ops.mul(dim(fs, mem), w))

        params = dict(dim.parameters())
        params["fs"] = fs
        for r in check_gradients(loss, params, max_coords=None):
            assert r.rel_err <= 1e-4, r


class TestAdditive:
    def test_single_row(self):
        ar = AdditiveRetrieval(6, 4, np.random.default_rng(0))
        mem = np.random.default_rng(1).normal(size=(1, 4))
        np.testing.assert_allclose(ar(np.ones((2, 6)), mem).data, np.repeat(mem, 2, axis=0), atol=1e-12)

    def test_uniform_scores_give_mean(self):
        ar = AdditiveRetrieval(6, 4, np.random.default_rng(0))
        ar.v.data[...] = 0.0
        mem = np.random.default_rng(2).normal(size=(5, 4))
        np.testing.assert_allclose(ar(np.ones((1, 6)), mem).data, mem.mean(axis=0, keepdims=True), atol=1e-12)

    def test_oracle(self):
        rng = np.random.default_rng(3)
        ar = AdditiveRetrieval(6, 4, rng)
        for p in ar.parameters().values():
            p.data[...] = rng.normal(size=p.shape)
        fs, mem = rng.normal(size=(2, 6)), rng.normal(size=(5, 4))
        ref = []
        for f in fs:
            s = np.array([ar.v.data[:, 0] @ np.tanh(f @ ar.wf.data + m @ ar.wm.data + ar.b.data) for m in mem])
            ref.append(softmax(s) @ mem)
        assert np.abs(ar(fs, mem).data - np.array(ref)).max() <= 1e-10


class TestAggregate:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.agg = Aggregator(256 + 100 + 100, 32, self.rng)
        self.agg.proj.bias.data[...] = self.rng.normal(size=32)

    def parts(self):
        return self.rng.normal(size=(3, 256)), self.rng.normal(size=(3, 100)), self.rng.normal(size=(3, 100))

    def test_zero_inputs_give_bias(self):
        z = [np.zeros((3, 256)), np.zeros((3, 100)), np.zeros((3, 100))]
        np.testing.assert_array_equal(self.agg(*z).data, np.repeat(self.agg.proj.bias.data[None], 3, axis=0))

    def test_linearity(self):
        a, b = self.parts(), self.parts()
        z = self.agg(np.zeros((3, 256)), np.zeros((3, 100)), np.zeros((3, 100))).data
        ab = self.agg(*[x + y for x, y in zip(a, b)]).data
        np.testing.assert_allclose(ab - z, (self.agg(*a).data - z) + (self.agg(*b).data - z), atol=1e-6)

    def test_oracle(self):
        a = self.parts()
        ref = np.concatenate(a, axis=1) @ self.agg.proj.weight.data + self.agg.proj.bias.data
        assert np.abs(self.agg(*a).data - ref).max() <= 1e-10

    def test_row_mismatch(self):
        with pytest.raises(DimensionError):
            self.agg(np.zeros((3, 256)), np.zeros((2, 100)), np.zeros((3, 100)))

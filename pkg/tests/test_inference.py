import numpy as np
import pytest

from ms2s.errors import DimensionError, InputError
from ms2s.features import FeatureMatrix
from ms2s.inference import ChunkPlan, binarize, decode_channel, fuse_channels, iterate, stitch
from ms2s.model import ModelConfig, NSDModel
from ms2s.scoring import RttmSegment


def tiny():
    return NSDModel(ModelConfig.tiny(t_out=20)).eval()


def banks(cfg, rng):
    return rng.normal(size=(6, cfg.xvec_dim)), rng.normal(size=(6, cfg.ivec_dim))


class TestChunks:
    @pytest.mark.parametrize("T", [20, 21, 57, 200])
    def test_cover(self, T):
        spans = ChunkPlan(T, 20, 0.25).spans
        covered = np.zeros(T, bool)
        for a, b in spans:
            assert b - a == 20
            covered[a : min(b, T)] = True
        assert covered.all() and spans[-1][1] >= T

    def test_hop(self):
        assert ChunkPlan(100, 20, 0.25).hop == 15
        assert ChunkPlan(100, 20, 0.0).hop == 20

    @pytest.mark.parametrize("overlap", [0.0, 0.25, 0.5])
    def test_constant_stitch_is_constant(self, overlap):
        spans = ChunkPlan(77, 20, overlap).spans
        out = stitch([np.full((2, 20), 0.3) for _ in spans], spans, 77)
        np.testing.assert_allclose(out, 0.3, atol=1e-15)

    def test_bad_overlap(self):
        with pytest.raises(InputError):
            ChunkPlan(10, 5, 1.0)


class TestDecode:
    def setup_method(self):
        self.m = tiny()
        self.rng = np.random.default_rng(0)
        self.mx, self.mi = banks(self.m.cfg, self.rng)
        self.iv = self.rng.normal(size=(2, 10))

    def test_short_recording(self):
        fm = FeatureMatrix(self.rng.normal(size=(13, 8)))
        S = np.ones((2, 13))
        y = decode_channel(self.m, fm, S, self.iv, self.mx, self.mi)
        assert y.shape == (2, 13)
        X = np.pad(fm.frames, ((0, 7), (0, 0)), mode="edge")
        full = self.m(X, np.pad(S, ((0, 0), (0, 7))), self.iv, self.mx, self.mi).data[:, :13]
        np.testing.assert_allclose(y, full, atol=1e-12)

    def test_identical_chunks_identical_posteriors(self):
        block = self.rng.normal(size=(20, 8))
        fm = FeatureMatrix(np.vstack([block, block]))
        S = np.tile((self.rng.random((2, 20)) > 0.5).astype(float), 2)
        y = decode_channel(self.m, fm, S, self.iv, self.mx, self.mi, overlap=0.0)
        np.testing.assert_array_equal(y[:, :20], y[:, 20:])

    def test_mask_mismatch(self):
        with pytest.raises(DimensionError):
            decode_channel(self.m, FeatureMatrix(np.zeros((30, 8))), np.ones((2, 29)), self.iv, self.mx, self.mi)


class TestFuse:
    def test_identical(self):
        p = np.random.default_rng(1).random((2, 9))
        np.testing.assert_allclose(fuse_channels([p, p, p]), p, atol=1e-15)

    def test_two_channels(self):
        np.testing.assert_allclose(fuse_channels([np.full((1, 3), 0.2), np.full((1, 3), 0.8)]), 0.5, atol=1e-15)

    def test_zero_channel(self):
        p = np.random.default_rng(2).random((3, 5))
        k = 3
        np.testing.assert_allclose(fuse_channels([p] * k + [np.zeros_like(p)]), k / (k + 1) * p, atol=1e-12)

    def test_order_invariant(self):
        rng = np.random.default_rng(3)
        ps = [rng.random((2, 4)) for _ in range(4)]
        np.testing.assert_allclose(fuse_channels(ps), fuse_channels(ps[::-1]), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            fuse_channels([np.zeros((2, 3)), np.zeros((2, 4))])


class TestBinarize:
    def test_all_high(self):
        np.testing.assert_array_equal(binarize(np.full((2, 100), 0.9)), np.ones((2, 100)))

    def test_all_low(self):
        assert not binarize(np.full((2, 100), 0.1)).any()

    def test_dip_removed(self):
        y = np.full((1, 60), 0.9)
        y[0, 30:33] = 0.1
        out = binarize(y)
        np.testing.assert_array_equal(out, np.ones((1, 60)))

    def test_short_segment_dropped(self):
        y = np.full((1, 100), 0.1)
        y[0, 40:55] = 0.9  # 0.15 s < 0.2 s
        assert not binarize(y, median_win=1).any()

    def test_short_gap_merged(self):
        y = np.full((1, 100), 0.1)
        y[0, 10:40] = 0.9
        y[0, 45:80] = 0.9  # 50 ms gap
        out = binarize(y, median_win=1)
        np.testing.assert_array_equal(out[0, 10:80], 1.0)
        assert out.sum() == 70

    @pytest.mark.parametrize("seed", range(5))
    def test_segments_disjoint_and_bounded(self, seed):
        y = np.random.default_rng(seed).random((3, 300))
        out = binarize(y)
        assert set(np.unique(out)) <= {0.0, 1.0}
        assert out.sum() <= 3 * 300


class TestIterate:
    def setup_method(self):
        self.m = tiny()
        rng = np.random.default_rng(4)
        self.mx, self.mi = banks(self.m.cfg, rng)
        self.fm = FeatureMatrix(rng.normal(size=(50, 8)))
        self.S = (rng.random((2, 50)) > 0.5).astype(float)
        self.prof = lambda fm, S: S @ np.ones((50, 10)) / 50.0

    def test_single_iteration_is_plain_decode(self):
        res = iterate(self.m, [self.fm], self.S, self.prof, self.mx, self.mi, n_iters=1)
        y = decode_channel(self.m, self.fm, self.S, self.prof(self.fm, self.S), self.mx, self.mi)
        np.testing.assert_array_equal(res.posteriors, y)
        np.testing.assert_array_equal(res.mask, binarize(y))

    def test_masks_stay_binary_and_der_recorded(self):
        ref = [RttmSegment("rec", "A", 0.0, 0.3)]
        res = iterate(self.m, [self.fm, self.fm], self.S, self.prof, self.mx, self.mi, n_iters=3, reference=ref, collar=0.0)
        assert len(res.iteration_der) == 3 and len(res.masks) == 3
        for m in res.masks:
            assert set(np.unique(m)) <= {0.0, 1.0}

    def test_needs_one_iteration(self):
        with pytest.raises(InputError):
            iterate(self.m, [self.fm], self.S, self.prof, self.mx, self.mi, n_iters=0)

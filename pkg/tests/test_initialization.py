import itertools

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from ms2s.errors import InputError
from ms2s.features import AudioClip, FeatureMatrix, fbank
from ms2s.initialization import (
    MemoryBank,
    SegmentEmbedding,
    ToyEmbedder,
    build_memory,
    central_segments,
    energy_vad,
    floor_embedding,
    kmeans,
    labels_to_mask,
    read_embeddings_csv,
    spectral_cluster,
    toy_embed,
    write_embeddings_csv,
)


def same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return all((a[i] == a[j]) == (b[i] == b[j]) for i, j in itertools.combinations(range(len(a)), 2))


def blobs(rng, n=20, dim=16, sigma=0.01):
    c1 = np.zeros(dim)
    c1[0] = 1.0
    c2 = np.zeros(dim)
    c2[1] = 1.0
    x = np.vstack([c1 + sigma * rng.normal(size=(n, dim)), c2 + sigma * rng.normal(size=(n, dim))])
    return x, np.repeat([0, 1], n)


def band_noise(rng, lo, hi, seconds, sr=16000):
    n = int(seconds * sr)
    spec = np.fft.rfft(rng.normal(size=n))
    f = np.fft.rfftfreq(n, 1 / sr)
    spec[(f < lo) | (f > hi)] = 0
    x = np.fft.irfft(spec, n)
    return 0.3 * x / np.abs(x).max()


class TestToyEmbed:
    def test_two_spectral_bands_separate(self):
        rng = np.random.default_rng(0)
        a = fbank(AudioClip(band_noise(rng, 200, 600, 4.0)))
        b = fbank(AudioClip(band_noise(rng, 2500, 4000, 4.0)))
        ea = np.array([e.vector for e in toy_embed(a, 1.0, 1.0)])
        eb = np.array([e.vector for e in toy_embed(b, 1.0, 1.0)])
        u = lambda v: v / np.linalg.norm(v, axis=1, keepdims=True)
        within = min((u(ea) @ u(ea).T).min(), (u(eb) @ u(eb).T).min())
        between = (u(ea) @ u(eb).T).max()
        assert within > between

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        fm = FeatureMatrix(rng.normal(size=(300, 40)))
        a = [e.vector for e in toy_embed(fm, 1.0, 0.5)]
        b = [e.vector for e in toy_embed(fm, 1.0, 0.5)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_identical_windows_identical_embeddings(self):
        rng = np.random.default_rng(2)
        block = rng.normal(size=(100, 40))
        fm = FeatureMatrix(np.vstack([block, block]))
        e = toy_embed(fm, 1.0, 1.0)
        assert np.array_equal(e[0].vector, e[1].vector)

    def test_silence_window(self):
        fm = fbank(AudioClip(np.zeros(16000)))
        e = toy_embed(fm, 0.5, 0.5)
        np.testing.assert_allclose(e[0].vector, floor_embedding(ToyEmbedder()), atol=1e-9)

    def test_window_too_long(self):
        with pytest.raises(InputError):
            toy_embed(FeatureMatrix(np.zeros((50, 40))), 1.0, 0.5)

    def test_window_too_short(self):
        with pytest.raises(InputError):
            toy_embed(FeatureMatrix(np.zeros((500, 40))), 0.4, 0.2)


class TestSpectralCluster:
    def test_two_blobs(self):
        x, truth = blobs(np.random.default_rng(3))
        assert same_partition(spectral_cluster(x), truth)
        assert same_partition(spectral_cluster(x, n_speakers=2), truth)

    def test_one_speaker(self):
        x, _ = blobs(np.random.default_rng(4))
        assert np.all(spectral_cluster(x, n_speakers=1) == 0)

    def test_duplicates_do_not_change_partition(self):
        x, _ = blobs(np.random.default_rng(5))
        base = spectral_cluster(x)
        dup = spectral_cluster(np.vstack([x, x]))
        assert same_partition(dup[: len(x)], base)
        assert np.array_equal(dup[: len(x)], dup[len(x) :])

    def test_rotation_invariant(self):
        rng = np.random.default_rng(6)
        x, _ = blobs(rng)
        q = special_ortho_group.rvs(16, random_state=7)
        assert same_partition(spectral_cluster(x), spectral_cluster(x @ q))

    def test_too_few(self):
        with pytest.raises(InputError):
            spectral_cluster(np.ones((1, 4)))
        with pytest.raises(InputError):
            spectral_cluster(np.eye(3), n_speakers=4)


class TestMask:
    def seg(self, a, b):
        return SegmentEmbedding(a, b, np.ones(2))

    def test_full_window_one_speaker(self):
        m = labels_to_mask([0], [self.seg(0.0, 1.0)], 100).mask
        np.testing.assert_array_equal(m, np.ones((1, 100)))

    def test_non_overlapping_windows_are_one_hot(self):
        segs = [self.seg(0.0, 0.5), self.seg(0.5, 1.0), self.seg(1.0, 1.5)]
        m = labels_to_mask([0, 1, 0], segs, 150).mask
        np.testing.assert_array_equal(m.sum(axis=0), np.ones(150))

    def test_hand_built_layout(self):
        segs = [self.seg(0.0, 0.03), self.seg(0.02, 0.06), self.seg(0.07, 0.08)]
        m = labels_to_mask([0, 1, 0], segs, 10).mask
        expected = np.array([[1, 1, 1, 0, 0, 0, 0, 1, 0, 0], [0, 0, 1, 1, 1, 1, 0, 0, 0, 0]], dtype=float)
        np.testing.assert_array_equal(m, expected)

    def test_vad_zeroes_silence(self):
        speech = np.array([1, 1, 0, 0, 1, 1, 1, 1, 1, 1], bool)
        m = labels_to_mask([0], [self.seg(0.0, 0.1)], 10, speech=speech).mask
        np.testing.assert_array_equal(m[0], speech.astype(float))
        assert set(np.unique(m)) <= {0.0, 1.0}

    def test_energy_vad(self):
        rng = np.random.default_rng(8)
        x = np.concatenate([0.3 * rng.normal(size=8000), 1e-4 * rng.normal(size=8000)])
        v = energy_vad(fbank(AudioClip(x)))
        assert v[:40].all() and not v[-40:].any()

    def test_central_segments_tile(self):
        embs = [self.seg(s, s + 1.0) for s in np.arange(0, 3.01, 0.5)]
        segs = central_segments(embs)
        assert segs[0].start_s == 0.0 and segs[-1].end_s == 4.0
        for a, b in zip(segs, segs[1:]):
            assert a.end_s == b.start_s


class TestMemory:
    def test_exact_points(self):
        rng = np.random.default_rng(9)
        pts = rng.normal(size=(4, 6))
        mem = build_memory(pts, 4)
        unit = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        for row in unit:
            assert np.abs(mem.vectors - row).sum(axis=1).min() < 1e-9

    def test_single_center_is_normalized_mean(self):
        rng = np.random.default_rng(10)
        pts = rng.normal(size=(30, 5)) + 2.0
        m = pts.mean(axis=0)
        np.testing.assert_allclose(build_memory(pts, 1).vectors[0], m / np.linalg.norm(m), atol=1e-12)

    def test_three_clusters(self):
        rng = np.random.default_rng(11)
        means = rng.normal(size=(3, 8)) * 3
        pool = np.vstack([m + 0.2 * rng.normal(size=(40, 8)) for m in means])
        mem = build_memory(pool, 3)
        for m in means:
            cos = mem.vectors @ (m / np.linalg.norm(m))
            assert 1.0 - cos.max() < 0.05

    def test_pool_too_small(self):
        with pytest.raises(InputError):
            build_memory(np.ones((2, 3)), 3)

    def test_kmeans_inertia_monotone_and_seeded(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(60, 3))
        a = kmeans(x, 4, n_init=5, seed=1)
        b = kmeans(x, 4, n_init=5, seed=1)
        np.testing.assert_array_equal(a[0], b[0])

    def test_file_round_trip(self, tmp_path):
        v = np.eye(3, 5)
        MemoryBank(v).save(tmp_path / "m.mem")
        assert (tmp_path / "m.mem").read_bytes()[:7] == b"MS2SMEM"
        np.testing.assert_array_equal(MemoryBank.load(tmp_path / "m.mem").vectors, v)


def test_embedding_csv_round_trip(tmp_path):
    embs = [SegmentEmbedding(0.0, 1.0, np.array([0.5, -1.25])), SegmentEmbedding(1.0, 2.5, np.array([3.0, 4.0]))]
    write_embeddings_csv(tmp_path / "e.csv", embs)
    back = read_embeddings_csv(tmp_path / "e.csv")
    assert [(e.start_s, e.end_s) for e in back] == [(0.0, 1.0), (1.0, 2.5)]
    np.testing.assert_array_equal(back[1].vector, [3.0, 4.0])

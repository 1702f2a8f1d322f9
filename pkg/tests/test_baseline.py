"""BoW-HOG baseline tests: HOG oracle, k-means behavior, ranking exactness."""

import numpy as np
import pytest

from sketchsearch.baseline import (
    BLOCK,
    BaselineConfig,
    Codebook,
    baseline_rank,
    block_patches,
    bow_encode,
    cell_histograms,
    fit_codebook,
    hog,
    kmeans_fit,
    load_codebook,
    save_codebook,
    screenshot_descriptor,
    sketch_descriptor,
)


def oracle_cell_hists(img, cell, bins, background=0.0):
    """Per-pixel HOG accumulation with explicit loops."""
    img = np.asarray(img, dtype=np.float64)
    unit = cell * BLOCK
    h, w = img.shape
    ph = (unit - h % unit) % unit
    pw = (unit - w % unit) % unit
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), constant_values=background)
        h, w = img.shape
    cy, cx = h // cell, w // cell
    hist = np.zeros((cy, cx, bins))
    for r in range(h):
        for c in range(w):
            rm = img[r, max(c - 1, 0)] if c - 1 >= 0 else img[r, 0]
            rp = img[r, min(c + 1, w - 1)]
            cm = img[max(r - 1, 0), c]
            cp = img[min(r + 1, h - 1), c]
            gx = rp - rm
            gy = cp - cm
            mag = np.hypot(gx, gy)
            theta = np.arctan2(gy, gx) % np.pi
            pos = theta / (np.pi / bins)
            b0 = int(np.floor(pos))
            frac = pos - b0
            b0 %= bins
            hist[r // cell, c // cell, b0] += mag * (1 - frac)
            hist[r // cell, c // cell, (b0 + 1) % bins] += mag * frac
    return hist


class TestHog:
    def test_constant_image_zero_descriptor(self):
        desc = hog(np.full((16, 16), 0.5), cell=8, bins=9)
        np.testing.assert_array_equal(desc, np.zeros_like(desc))

    def test_descriptor_length_64x64(self):
        desc = hog(np.random.default_rng(0).uniform(0, 1, (64, 64)), cell=8, bins=9)
        assert desc.shape == (8, 8, 9)
        assert desc.size == 576

    def test_vertical_step_mass_in_bin_zero(self):
        # 8x8 instance, cell 4: block-aligned, so no padding artifacts
        img = np.zeros((8, 8))
        img[:, 4:] = 1.0
        raw = cell_histograms(img, cell=4, bins=9)
        total = raw.sum()
        assert total > 0
        assert raw[..., 0].sum() == pytest.approx(total)  # horizontal gradient folds to 0

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(3):
            img = rng.uniform(0, 1, (12, 20))
            got = cell_histograms(img, cell=4, bins=6, background=0.3)
            want = oracle_cell_hists(img, cell=4, bins=6, background=0.3)
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_block_norms_at_most_one(self):
        rng = np.random.default_rng(8)
        desc = hog(rng.uniform(0, 1, (32, 32)), cell=8, bins=9)
        for by in range(0, 4, 2):
            for bx in range(0, 4, 2):
                norm = np.linalg.norm(desc[by : by + 2, bx : bx + 2])
                assert norm <= 1 + 1e-6

    def test_raw_histograms_shift_by_one_cell(self):
        rng = np.random.default_rng(9)
        img = rng.uniform(0, 1, (64, 64))
        shifted = np.full_like(img, 0.5)
        shifted[:, 8:] = img[:, :-8]
        a = cell_histograms(img, cell=8, bins=9)
        b = cell_histograms(shifted, cell=8, bins=9)
        np.testing.assert_allclose(b[:, 2:6], a[:, 1:5], atol=1e-10)

    def test_normalized_descriptor_shifts_by_one_block(self):
        rng = np.random.default_rng(10)
        img = rng.uniform(0, 1, (64, 64))
        shifted = np.full_like(img, 0.5)
        shifted[:, 16:] = img[:, :-16]
        a = hog(img, cell=8, bins=9)
        b = hog(shifted, cell=8, bins=9)
        np.testing.assert_allclose(b[:, 4:6], a[:, 2:4], atol=1e-10)

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError):
            hog(np.zeros((0, 4)))

    def test_padding_to_block_multiple(self):
        desc = hog(np.random.default_rng(1).uniform(0, 1, (20, 28)), cell=8, bins=9)
        assert desc.shape == (4, 4, 9)  # padded up to 32x32


class TestKmeans:
    def test_k_distinct_points_recovered(self):
        pts = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        samples = np.repeat(pts, 4, axis=0)
        book = kmeans_fit(samples, k=3, iters=20, seed=1)
        got = sorted(map(tuple, np.round(book.centroids, 6)))
        want = sorted(map(tuple, pts))
        assert got == want

    def test_1d_two_clusters(self):
        samples = np.array([[0.0], [0.0], [10.0], [10.0]])
        book = kmeans_fit(samples, k=2, iters=10, seed=0)
        assert sorted(book.centroids.ravel().tolist()) == [0.0, 10.0]

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(3)
        samples = rng.uniform(0, 1, (50, 4))
        a = kmeans_fit(samples, k=5, iters=25, seed=42)
        b = kmeans_fit(samples, k=5, iters=25, seed=42)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_objective_monotone_nonincreasing(self):
        rng = np.random.default_rng(4)
        samples = rng.uniform(0, 1, (120, 6))
        objectives = []
        kmeans_fit(samples, k=8, iters=30, seed=7, objectives=objectives)
        assert len(objectives) >= 2
        diffs = np.diff(objectives)
        assert np.all(diffs <= 1e-9)

    def test_fewer_samples_than_k(self):
        with pytest.raises(ValueError):
            kmeans_fit(np.zeros((3, 2)), k=4)

    def test_no_duplicate_centroids_on_distinct_data(self):
        rng = np.random.default_rng(5)
        samples = rng.uniform(0, 1, (40, 3))
        book = kmeans_fit(samples, k=6, iters=30, seed=2)
        uniq = np.unique(np.round(book.centroids, 8), axis=0)
        assert uniq.shape[0] == 6


class TestBow:
    def _book(self):
        centroids = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]], dtype=np.float32)
        return Codebook(centroids=centroids, seed=0)

    def test_one_hot_when_all_patches_match_one_centroid(self):
        desc = np.zeros((2, 4, 1))  # 2 blocks -> patches of dim 4
        book = Codebook(centroids=np.array([[1.0] * 4, [0.0] * 4, [5.0] * 4], dtype=np.float32), seed=0)
        desc[:, :, 0] = 0.0  # both patches at origin -> centroid index 1
        hist = bow_encode(desc, book)
        np.testing.assert_allclose(hist, [0.0, 1.0, 0.0])

    def test_hand_counts_two_thirds(self):
        # 3 patches nearest centroids {0, 0, 2} of k=3 -> (2/3, 0, 1/3)
        book = Codebook(
            centroids=np.array([[0.0, 0.0, 0.0, 0.0], [50.0] * 4, [10.0] * 4], dtype=np.float32), seed=0
        )
        desc = np.zeros((2, 6, 1))  # grid 2x6 bins 1 -> 3 blocks of dim 4
        grid = desc.reshape(2, 6)
        grid[:, 0:2] = 0.1  # block 0 -> centroid 0
        grid[:, 2:4] = 0.2  # block 1 -> centroid 0
        grid[:, 4:6] = 9.9  # block 2 -> centroid 2
        hist = bow_encode(desc, book)
        np.testing.assert_allclose(hist, [2 / 3, 0.0, 1 / 3])

    def test_sums_to_one(self):
        rng = np.random.default_rng(6)
        book = Codebook(centroids=rng.uniform(0, 1, (5, 36)).astype(np.float32), seed=0)
        desc = rng.uniform(0, 1, (4, 4, 9))
        assert bow_encode(desc, book).sum() == pytest.approx(1.0)

    def test_dimension_mismatch(self):
        book = Codebook(centroids=np.zeros((3, 8), dtype=np.float32), seed=0)
        with pytest.raises(ValueError, match="dim"):
            bow_encode(np.zeros((2, 2, 9)), book)

    def test_tie_goes_to_lowest_index(self):
        book = Codebook(centroids=np.array([[1.0], [1.0]], dtype=np.float32).repeat(4, axis=1), seed=0)
        desc = np.ones((2, 2, 1))
        hist = bow_encode(desc, book)
        np.testing.assert_allclose(hist, [1.0, 0.0])


class TestRank:
    def test_query_in_corpus_first_distance_zero(self):
        q = np.array([0.2, 0.8])
        corpus = [("b", np.array([0.9, 0.1])), ("a", q.copy())]
        ranked = baseline_rank(q, corpus)
        assert ranked[0] == ("a", 0.0)

    def test_two_items_ordered(self):
        q = np.zeros(2)
        ranked = baseline_rank(q, [("far", np.array([2.0, 0.0])), ("near", np.array([1.0, 0.0]))])
        assert [r[0] for r in ranked] == ["near", "far"]

    def test_matches_bruteforce_sort_oracle(self):
        rng = np.random.default_rng(12)
        corpus = [(f"item{i:03d}", rng.uniform(0, 1, 16)) for i in range(50)]
        q = rng.uniform(0, 1, 16)
        ranked = baseline_rank(q, corpus)
        oracle = sorted(
            ((iid, float(np.linalg.norm(h - q))) for iid, h in corpus), key=lambda p: (p[1], p[0])
        )
        assert ranked == oracle

    def test_permutation_and_nondecreasing(self):
        rng = np.random.default_rng(13)
        corpus = [(f"i{i}", rng.uniform(0, 1, 8)) for i in range(20)]
        ranked = baseline_rank(rng.uniform(0, 1, 8), corpus)
        assert sorted(r[0] for r in ranked) == sorted(c[0] for c in corpus)
        dists = [r[1] for r in ranked]
        assert all(a <= b for a, b in zip(dists, dists[1:]))

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            baseline_rank(np.zeros(4), [])


class TestCodebookIo:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(14)
        book = Codebook(centroids=rng.uniform(-1, 1, (7, 12)).astype(np.float32), seed=99)
        path = tmp_path / "book.swbow"
        save_codebook(book, path)
        back = load_codebook(path)
        assert back.seed == 99
        np.testing.assert_array_equal(back.centroids, book.centroids)

    def test_magic_and_truncation(self, tmp_path):
        path = tmp_path / "book.swbow"
        book = Codebook(centroids=np.zeros((2, 3), dtype=np.float32), seed=0)
        save_codebook(book, path)
        blob = path.read_bytes()
        (tmp_path / "bad.swbow").write_bytes(b"NOPE" + blob[4:])
        with pytest.raises(ValueError, match="codebook"):
            load_codebook(tmp_path / "bad.swbow")
        (tmp_path / "trunc.swbow").write_bytes(blob[:-5])
        with pytest.raises(ValueError, match="truncated"):
            load_codebook(tmp_path / "trunc.swbow")


class TestPipeline:
    def test_end_to_end_shapes(self):
        rng = np.random.default_rng(15)
        cfg = BaselineConfig(image_size=32, vocab_size=4, kmeans_iters=5)
        shots = [rng.uniform(0, 1, (48, 48)).astype(np.float32) for _ in range(3)]
        sketches = [(rng.uniform(0, 1, (48, 48)) > 0.8).astype(np.float32) for _ in range(3)]
        descs = [screenshot_descriptor(s, cfg) for s in shots]
        descs += [sketch_descriptor(s, cfg) for s in sketches]
        book = fit_codebook(descs, cfg)
        assert book.k == 4
        hist = bow_encode(descs[0], book)
        assert hist.shape == (4,)
        assert hist.sum() == pytest.approx(1.0)

    def test_patch_layout(self):
        desc = np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3)
        patches = block_patches(desc)
        assert patches.shape == (1, 12)
        np.testing.assert_array_equal(patches[0], desc.reshape(-1))

"""Codebook fitting: assignment, EMA updates, expiry, and the rate formula."""

import numpy as np
import pytest

from vqgrid import (KEPT, PRUNED, VQ, Codebook, DenseGrid, GridDims,
                    ImportanceField, VoxelClassMask, VQConfig, assign,
                    build_vq_model, compression_rate, ema_update,
                    expand_vq_model, expire_codes, init_codebook,
                    weighted_wcss)

from _oracles import clustering_trial, weighted_lloyd_wcss


class TestVQConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="K must be at least 2"):
            VQConfig(K=1)
        with pytest.raises(ValueError, match=r"lambda_d must lie in \(0, 1\)"):
            VQConfig(lambda_d=1.0)
        with pytest.raises(ValueError, match=r"expire_J must lie in \[0, K\)"):
            VQConfig(K=4, expire_J=4)
        with pytest.raises(ValueError, match="batch_voxels >= 1"):
            VQConfig(batch_voxels=0)


class TestCompressionRate:
    def test_closed_form(self):
        assert compression_rate(10**6, 12, 4096) == pytest.approx(
            192000000.0 / 12786432.0)

    @pytest.mark.parametrize("C,expected", [(12, 16.0), (48, 64.0), (27, 36.0)])
    def test_asymptote(self, C, expected):
        # r -> 16*C/log2(K) as N grows; at K=4096 the divisor is 12
        assert compression_rate(10**9, C, 4096) == pytest.approx(expected,
                                                                 rel=1e-3)
        assert compression_rate(10**7, C, 4096) < expected

    def test_monotone_in_population(self):
        rates = [compression_rate(n, 27, 256) for n in (10**3, 10**4, 10**5)]
        assert rates[0] < rates[1] < rates[2]

    def test_validation(self):
        with pytest.raises(ValueError, match="N and C must be positive"):
            compression_rate(0, 12, 16)
        with pytest.raises(ValueError, match="K must be at least 2"):
            compression_rate(10, 12, 1)


class TestAssign:
    def test_nearest_code(self):
        book = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]), np.zeros(2))
        got = assign(np.array([[0.1, 0.0], [0.9, 1.2], [0.2, 0.3]]), book)
        np.testing.assert_array_equal(got, [0, 1, 0])
        assert got.dtype == np.uint32

    def test_ties_resolve_to_lowest_index(self):
        book = Codebook(np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]),
                        np.zeros(3))
        np.testing.assert_array_equal(assign(np.array([[5.0, 5.0]]), book), [0])

    def test_empty_batch(self):
        book = Codebook(np.zeros((2, 3)), np.zeros(2))
        assert assign(np.zeros((0, 3)), book).size == 0

    def test_width_mismatch(self):
        book = Codebook(np.zeros((2, 3)), np.zeros(2))
        with pytest.raises(ValueError, match="feature width must match"):
            assign(np.zeros((4, 2)), book)


class TestEmaUpdate:
    def test_single_step_hand_computed(self):
        book = Codebook(np.array([[0.0, 0.0], [10.0, 10.0]]),
                        np.array([1.0, 2.0]))
        feats = np.array([[2.0, 0.0], [4.0, 0.0]])
        imps = np.array([1.0, 3.0])
        out = ema_update(book, feats, imps, np.array([0, 0]), lambda_d=0.5)
        # weighted mean of cluster 0 is (2*1 + 4*3)/4 = 3.5
        np.testing.assert_allclose(out.codes[0], [0.5 * 0.0 + 0.5 * 3.5, 0.0])
        # cluster 1 saw nothing: code frozen, capacity decays toward zero
        np.testing.assert_allclose(out.codes[1], [10.0, 10.0])
        np.testing.assert_allclose(out.capacity, [0.5 * 1.0 + 0.5 * 4.0,
                                                  0.5 * 2.0])

    def test_zero_importance_cluster_keeps_its_code(self):
        book = Codebook(np.array([[1.0], [2.0]]), np.array([5.0, 5.0]))
        out = ema_update(book, np.array([[9.0]]), np.array([0.0]),
                         np.array([0]), lambda_d=0.5)
        np.testing.assert_allclose(out.codes, book.codes)
        np.testing.assert_allclose(out.capacity, [2.5, 2.5])

    def test_rejects_out_of_range_assignment(self):
        book = Codebook(np.zeros((2, 1)), np.zeros(2))
        with pytest.raises(ValueError, match="assignment out of codebook"):
            ema_update(book, np.zeros((1, 1)), np.ones(1), np.array([2]), 0.5)

    def test_full_batch_lambda_zero_is_lloyd(self):
        """lambda_d = 0 turns the EMA step into an exact Lloyd update, so the
        weighted quantization error must be non-increasing round over round."""
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(400, 3))
        imps = rng.uniform(0.1, 2.0, 400)
        book = Codebook(feats[rng.choice(400, 6, replace=False)].copy(),
                        np.zeros(6))
        prev = np.inf
        for _ in range(12):
            a = assign(feats, book)
            book = ema_update(book, feats, imps, a, lambda_d=0.0)
            wcss = weighted_wcss(feats, imps, book)
            assert wcss <= prev + 1e-9
            prev = wcss


class TestExpireCodes:
    def test_pairing_order(self):
        book = Codebook(np.zeros((4, 2)), np.array([5.0, 1.0, 1.0, 9.0]))
        feats = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        imps = np.array([0.5, 8.0, 8.0])
        out = expire_codes(book, feats, imps, J=2)
        # victims: capacity ties 1 and 2 resolve low-index first -> [1, 2]
        # donors: importance ties resolve low voxel index first -> [1, 2]
        np.testing.assert_allclose(out.codes[1], [2.0, 2.0])
        np.testing.assert_allclose(out.codes[2], [3.0, 3.0])
        np.testing.assert_allclose(out.capacity, [5.0, 8.0, 8.0, 9.0])
        np.testing.assert_allclose(out.codes[0], [0.0, 0.0])

    def test_j_zero_is_identity_copy(self):
        book = Codebook(np.ones((3, 2)), np.ones(3))
        out = expire_codes(book, np.zeros((1, 2)), np.ones(1), J=0)
        np.testing.assert_array_equal(out.codes, book.codes)
        out.codes[0, 0] = 5.0
        assert book.codes[0, 0] == 1.0

    def test_validation(self):
        book = Codebook(np.ones((3, 2)), np.ones(3))
        with pytest.raises(ValueError, match=r"J must lie in \[0, K\)"):
            expire_codes(book, np.zeros((4, 2)), np.ones(4), J=3)
        with pytest.raises(ValueError, match="batch smaller than J"):
            expire_codes(book, np.zeros((1, 2)), np.ones(1), J=2)


class TestWeightedWCSS:
    def test_hand_computed(self):
        book = Codebook(np.array([[0.0], [10.0]]), np.zeros(2))
        feats = np.array([[1.0], [9.0]])
        imps = np.array([2.0, 3.0])
        assert weighted_wcss(feats, imps, book) == pytest.approx(2.0 + 3.0)

    def test_empty_population(self):
        book = Codebook(np.zeros((2, 3)), np.zeros(2))
        assert weighted_wcss(np.zeros((0, 3)), np.zeros(0), book) == 0.0


def all_vq_grid(feats):
    """Wrap an (M, 3) float32 feature cloud as an all-VQ degree-0 grid."""
    m = feats.shape[0]
    dims_by_m = {8: (2, 2, 2), 64: (4, 4, 4)}
    dims = GridDims(*dims_by_m[m], (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    grid = DenseGrid(dims, 0, np.ones(m, np.float32),
                     feats.reshape(-1).astype(np.float32))
    return grid, VoxelClassMask(np.full(m, VQ, np.uint8))


class TestInitCodebook:
    def test_population_smaller_than_codebook(self):
        grid, mask = all_vq_grid(np.zeros((8, 3), np.float32))
        field = ImportanceField.from_scores(np.ones(8))
        with pytest.raises(ValueError, match="codebook larger than population"):
            init_codebook(grid, field, mask, VQConfig(K=16))

    def test_k_distinct_points_recover_exactly(self):
        """With K voxels and K codes the codebook converges onto the points."""
        rng = np.random.default_rng(11)
        feats = rng.uniform(-0.25, 0.25, (8, 3)).astype(np.float32)
        grid, mask = all_vq_grid(feats)
        field = ImportanceField.from_scores(np.ones(8))
        book = init_codebook(grid, field, mask,
                             VQConfig(K=8, init_iters=50, batch_voxels=64,
                                      expire_J=0, seed=5))
        d = np.linalg.norm(book.codes[:, None, :] - feats[None], axis=2)
        nearest = d.argmin(axis=1)
        assert sorted(nearest.tolist()) == list(range(8))
        assert d.min(axis=1).max() < 1e-4

    def test_deterministic_for_fixed_seed(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(0.0, 0.3, (64, 3)).astype(np.float32)
        grid, mask = all_vq_grid(feats)
        field = ImportanceField.from_scores(rng.uniform(0.1, 1.0, 64))
        cfg = VQConfig(K=4, init_iters=30, batch_voxels=128, expire_J=1, seed=9)
        a = init_codebook(grid, field, mask, cfg)
        b = init_codebook(grid, field, mask, cfg)
        np.testing.assert_array_equal(a.codes, b.codes)
        np.testing.assert_array_equal(a.capacity, b.capacity)

    def test_codes_are_binary16_representable(self):
        rng = np.random.default_rng(2)
        feats = rng.normal(0.0, 0.5, (64, 3)).astype(np.float32)
        grid, mask = all_vq_grid(feats)
        field = ImportanceField.from_scores(rng.uniform(0.1, 1.0, 64))
        book = init_codebook(grid, field, mask,
                             VQConfig(K=8, init_iters=10, batch_voxels=64,
                                      expire_J=2, seed=3))
        np.testing.assert_array_equal(
            book.codes, book.codes.astype(np.float16).astype(np.float32))

    def test_competitive_with_lloyd_restarts(self):
        """One randomized population from the benchmark family: the streaming
        fit should land within 1.5x of a 10-restart exact Lloyd baseline."""
        cloud, imps, K, tseed = clustering_trial(101, 0)
        m = cloud.shape[0]
        dims = GridDims(16, 16, 8, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        feats = np.zeros((dims.n, 3), np.float32)
        feats[:m] = cloud.astype(np.float32)
        grid = DenseGrid(dims, 0, np.ones(dims.n, np.float32), feats.reshape(-1))
        labels = np.full(dims.n, PRUNED, np.uint8)
        labels[:m] = VQ
        scores = np.zeros(dims.n)
        scores[:m] = imps
        book = init_codebook(grid, ImportanceField.from_scores(scores),
                             VoxelClassMask(labels),
                             VQConfig(K=K, init_iters=100,
                                      batch_voxels=max(4096, 2 * m),
                                      lambda_d=0.8, expire_J=0, seed=tseed))
        ours = weighted_wcss(cloud, imps, book)
        oracle = weighted_lloyd_wcss(cloud, imps, K, restarts=10, seed=tseed + 1)
        assert ours <= 1.5 * oracle


class TestBuildVQModel:
    def test_streams_follow_the_mask(self):
        rng = np.random.default_rng(7)
        dims = GridDims(2, 2, 2)
        grid = DenseGrid(dims, 0,
                         rng.uniform(0.5, 2.0, 8).astype(np.float32),
                         rng.normal(0.0, 0.5, 24).astype(np.float32))
        labels = np.array([PRUNED, VQ, KEPT, VQ, KEPT, PRUNED, VQ, PRUNED],
                          np.uint8)
        mask = VoxelClassMask(labels)
        book = Codebook(rng.normal(0.0, 0.5, (4, 3)).astype(np.float32),
                        np.zeros(4))
        model = build_vq_model(grid, mask, book)
        assert model.indices.shape == (3,)
        assert model.kept_features.shape == (6,)
        assert model.density.shape == (5,)
        np.testing.assert_array_equal(model.density,
                                      grid.density[labels != PRUNED])
        np.testing.assert_array_equal(
            model.kept_features.reshape(2, 3), grid.features_2d[labels == KEPT])
        # the stored codebook is rounded to its serialized (binary16) values
        np.testing.assert_array_equal(
            model.codebook.codes,
            book.codes.astype(np.float16).astype(np.float32))

    def test_expand_reconstructs_by_class(self):
        rng = np.random.default_rng(8)
        dims = GridDims(2, 2, 2)
        grid = DenseGrid(dims, 0,
                         rng.uniform(0.5, 2.0, 8).astype(np.float32),
                         rng.normal(0.0, 0.5, 24).astype(np.float32))
        labels = np.array([PRUNED, VQ, KEPT, VQ, KEPT, PRUNED, VQ, PRUNED],
                          np.uint8)
        mask = VoxelClassMask(labels)
        book = Codebook(rng.normal(0.0, 0.5, (4, 3)).astype(np.float32),
                        np.zeros(4))
        back = expand_vq_model(build_vq_model(grid, mask, book))
        np.testing.assert_array_equal(back.density[labels == PRUNED], 0.0)
        np.testing.assert_array_equal(back.density[labels != PRUNED],
                                      grid.density[labels != PRUNED])
        np.testing.assert_array_equal(back.features_2d[labels == KEPT],
                                      grid.features_2d[labels == KEPT])
        # vq voxels decode to their nearest (rounded) code rows
        rounded = book.codes.astype(np.float16).astype(np.float32)
        book16 = Codebook(rounded, np.zeros(4))
        expect = rounded[assign(grid.features_2d[labels == VQ], book16)]
        np.testing.assert_array_equal(back.features_2d[labels == VQ], expect)

    def test_all_kept_mask_round_trips_features_exactly(self):
        rng = np.random.default_rng(9)
        dims = GridDims(2, 2, 2)
        grid = DenseGrid(dims, 1,
                         rng.uniform(0.5, 2.0, 8).astype(np.float32),
                         rng.normal(0.0, 0.5, 96).astype(np.float32))
        mask = VoxelClassMask(np.full(8, KEPT, np.uint8))
        book = Codebook(np.zeros((2, 12), np.float32), np.zeros(2))
        model = build_vq_model(grid, mask, book)
        assert model.indices.size == 0
        back = expand_vq_model(model)
        np.testing.assert_array_equal(back.features, grid.features)
        np.testing.assert_array_equal(back.density, grid.density)

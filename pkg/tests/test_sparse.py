import numpy as np
import pytest

from snlblock.dense import NlParams, nl_forward
from snlblock.sparse import (GridSpec, Shape2D, SnlParams, apply_offsets,
                             base_grid, bilinear_sample,
                             bilinear_sample_backward, full_coverage_grid,
                             most_square_grid, offset_head, snl_backward,
                             snl_forward, sparse_affinity,
                             sparse_aggregate_fuse)
from snlblock.tensor import (ConfigError, DimensionError, MultiplyCounter,
                             NumericError, conv1x1)


def dense_params_from(sp: SnlParams) -> NlParams:
    return NlParams(sp.w_theta, sp.w_phi, sp.w_g, sp.w_gamma,
                    sp.b_theta, sp.b_phi, sp.b_g, sp.b_gamma)


class TestBaseGrid:
    def test_centered_3x3_window(self):
        grid = base_grid(Shape2D(8, 8), GridSpec(3, 3))
        i = 5 * 8 + 5  # query (5, 5)
        assert sorted(set(grid[i, :, 0])) == [4.0, 5.0, 6.0]
        assert sorted(set(grid[i, :, 1])) == [4.0, 5.0, 6.0]
        assert grid.shape == (64, 9, 2)

    def test_degenerate_1x1_window(self):
        grid = base_grid(Shape2D(3, 4), GridSpec(1, 1))
        for y in range(3):
            for x in range(4):
                assert tuple(grid[y * 4 + x, 0]) == (x, y)

    def test_operating_point_9x9(self):
        grid = base_grid(Shape2D(49, 49), GridSpec(9, 9))
        assert grid.shape == (2401, 81, 2)

    def test_even_window_fractional_centers(self):
        grid = base_grid(Shape2D(6, 6), GridSpec(2, 2))
        i = 3 * 6 + 3
        assert sorted(set(grid[i, :, 0])) == [2.5, 3.5]

    def test_k_exceeding_n_rejected(self):
        with pytest.raises(ConfigError):
            base_grid(Shape2D(2, 2), GridSpec(3, 3))


def test_most_square_grid():
    assert most_square_grid(99) == GridSpec(9, 11)
    assert most_square_grid(81) == GridSpec(9, 9)
    assert most_square_grid(49) == GridSpec(7, 7)
    assert most_square_grid(6) == GridSpec(2, 3)


class TestOffsetHead:
    def test_zero_everything_gives_regular_grid(self):
        x = np.random.default_rng(0).standard_normal((4, 10))
        out = offset_head(x, np.zeros((18, 4)), np.zeros(18))
        assert not out.any()

    def test_constant_bias_shifts_right(self):
        x = np.random.default_rng(1).standard_normal((4, 10))
        bias = np.tile([1.0, 0.0], 9)
        p = offset_head(x, np.zeros((18, 4)), bias)
        base = base_grid(Shape2D(2, 5), GridSpec(3, 3))
        coords = apply_offsets(base, p)
        np.testing.assert_allclose(coords[..., 0], base[..., 0] + 1.0)
        np.testing.assert_allclose(coords[..., 1], base[..., 1])

    def test_equals_conv1x1(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 10))
        w = rng.standard_normal((18, 4))
        b = rng.standard_normal(18)
        assert np.array_equal(offset_head(x, w, b), conv1x1(x, w, b))

    def test_odd_channel_count_rejected(self):
        with pytest.raises(DimensionError):
            offset_head(np.zeros((4, 10)), np.zeros((17, 4)))


class TestApplyOffsets:
    def test_zero_offsets_bit_exact(self):
        base = base_grid(Shape2D(4, 4), GridSpec(3, 3))
        coords = apply_offsets(base, np.zeros((18, 16)))
        assert np.array_equal(coords, base)

    def test_direct_addition(self):
        base = np.array([[[4.0, 4.0]]])
        p = np.array([[0.5], [-0.25]])
        coords = apply_offsets(base, p)
        np.testing.assert_allclose(coords, [[[4.5, 3.75]]])

    def test_elementwise_add_oracle(self):
        rng = np.random.default_rng(3)
        base = base_grid(Shape2D(3, 3), GridSpec(2, 2))
        p = rng.standard_normal((8, 9))
        coords = apply_offsets(base, p)
        for i in range(9):
            for k in range(4):
                assert coords[i, k, 0] == base[i, k, 0] + p[2 * k, i]
                assert coords[i, k, 1] == base[i, k, 1] + p[2 * k + 1, i]


class TestBilinearSample:
    def test_integer_coords_exact(self):
        rng = np.random.default_rng(4)
        f = rng.standard_normal((3, 5, 7))
        coords = np.array([[[2.0, 3.0], [6.0, 4.0], [0.0, 0.0]]])
        out = bilinear_sample(f, coords)
        assert np.array_equal(out[0, :, 0], f[:, 3, 2])
        assert np.array_equal(out[0, :, 1], f[:, 4, 6])
        assert np.array_equal(out[0, :, 2], f[:, 0, 0])

    def test_midpoint_is_four_pixel_average(self):
        f = np.array([[[0.0, 1.0], [2.0, 3.0]]])
        out = bilinear_sample(f, np.array([[[0.5, 0.5]]]))
        assert out[0, 0, 0] == 1.5

    def test_fully_out_of_bounds_is_zero(self):
        f = np.ones((2, 3, 3))
        out = bilinear_sample(f, np.array([[[-1.0, -1.0]]]))
        assert not out.any()

    def test_partial_out_of_bounds(self):
        f = np.ones((1, 3, 3))
        # halfway off the left edge: only two in-bounds corners, each 0.25
        out = bilinear_sample(f, np.array([[[-0.5, 0.5]]]))
        np.testing.assert_allclose(out[0, 0, 0], 0.5)

    def test_nan_coordinate_rejected(self):
        with pytest.raises(NumericError):
            bilinear_sample(np.ones((1, 3, 3)), np.array([[[np.nan, 0.0]]]))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        f = rng.standard_normal((2, 4, 4))
        coords = rng.uniform(0.3, 2.7, size=(3, 2, 2))
        grad_out = rng.standard_normal((3, 2, 2))
        gf, gc = bilinear_sample_backward(f, coords, grad_out)
        eps = 1e-6

        def loss(f_, coords_):
            return float((bilinear_sample(f_, coords_) * grad_out).sum())

        for idx in np.ndindex(f.shape):
            fp = f.copy(); fp[idx] += eps
            fm = f.copy(); fm[idx] -= eps
            np.testing.assert_allclose(gf[idx], (loss(fp, coords) - loss(fm, coords)) / (2 * eps),
                                       atol=1e-7)
        for idx in np.ndindex(coords.shape):
            cp = coords.copy(); cp[idx] += eps
            cm = coords.copy(); cm[idx] -= eps
            np.testing.assert_allclose(gc[idx], (loss(f, cp) - loss(f, cm)) / (2 * eps),
                                       atol=1e-6)


class TestSparseAffinity:
    def test_equal_keys_uniform(self):
        rng = np.random.default_rng(6)
        q = rng.standard_normal((3, 5))
        sampled = np.tile(rng.standard_normal((1, 3, 1)), (5, 1, 4))
        s = sparse_affinity(q, sampled)
        np.testing.assert_allclose(s, 0.25, atol=1e-12)

    def test_scalar_softmax_oracle(self):
        # one query, dot products (1, 0)
        q = np.array([[1.0]])
        sampled = np.array([[[1.0, 0.0]]])
        s = sparse_affinity(q, sampled)
        p = np.e / (np.e + 1)
        np.testing.assert_allclose(s, [[p, 1 - p]], atol=1e-4)

    def test_operating_point_row_length(self):
        rng = np.random.default_rng(7)
        q = rng.standard_normal((2, 50)).astype(np.float32)
        sampled = rng.standard_normal((50, 2, 81)).astype(np.float32)
        s = sparse_affinity(q, sampled)
        assert s.shape == (50, 81)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            sparse_affinity(np.zeros((3, 5)), np.zeros((5, 2, 4)))


class TestSparseAggregateFuse:
    def test_one_hot_selection(self):
        rng = np.random.default_rng(8)
        sampled_v = rng.standard_normal((4, 3, 5))
        s = np.zeros((4, 5))
        s[:, 2] = 1.0
        x = np.zeros((3, 4))
        out = sparse_aggregate_fuse(sampled_v, s, np.eye(3), x)
        np.testing.assert_allclose(out, sampled_v[:, :, 2].T, atol=1e-12)

    def test_zero_gamma_returns_x(self):
        rng = np.random.default_rng(9)
        sampled_v = rng.standard_normal((4, 3, 5))
        s = np.full((4, 5), 0.2)
        x = rng.standard_normal((3, 4))
        out = sparse_aggregate_fuse(sampled_v, s, np.zeros((3, 3)), x)
        assert np.array_equal(out, x)

    def test_loop_oracle(self):
        rng = np.random.default_rng(10)
        sampled_v = rng.standard_normal((4, 3, 5)).astype(np.float32)
        from snlblock.tensor import softmax_rows
        s = softmax_rows(rng.standard_normal((4, 5)).astype(np.float32))
        w = rng.standard_normal((3, 3)).astype(np.float32)
        x = rng.standard_normal((3, 4)).astype(np.float32)
        out = sparse_aggregate_fuse(sampled_v, s, w, x)
        for i in range(4):
            y_i = sum(s[i, j] * sampled_v[i, :, j] for j in range(5))
            np.testing.assert_allclose(out[:, i], w @ y_i + x[:, i], atol=1e-5)


class TestSnlForward:
    def test_zero_gamma_is_identity(self):
        rng = np.random.default_rng(11)
        p = SnlParams.random(rng, 4, 9, dtype=np.float64, zero_gamma=True,
                             zero_offset=False)
        x = rng.standard_normal((4, 6, 6))
        z, _ = snl_forward(x, p, GridSpec(3, 3))
        assert np.array_equal(z, x)

    def test_zero_offsets_keep_base_grid_bit_exact(self):
        rng = np.random.default_rng(12)
        p = SnlParams.random(rng, 4, 9, dtype=np.float64, zero_offset=True)
        x = rng.standard_normal((4, 6, 6))
        _, acts = snl_forward(x, p, GridSpec(3, 3))
        base = base_grid(Shape2D(6, 6), GridSpec(3, 3))
        assert np.array_equal(acts.field.coords, base)

    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-5)])
    def test_dense_equivalence(self, dtype, tol):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            c, h, w = 4, 5, 5
            n = h * w
            sp = SnlParams.random(rng, c, n, dtype=dtype, zero_gamma=False,
                                  zero_offset=True)
            x = rng.standard_normal((c, h, w)).astype(dtype)
            z_sparse, _ = snl_forward(x, sp, base=full_coverage_grid(Shape2D(h, w),
                                                                     dtype=dtype))
            z_dense, _ = nl_forward(x.reshape(c, n), dense_params_from(sp))
            assert np.abs(z_sparse.reshape(c, n) - z_dense).max() < tol

    def test_paper_operating_point_shapes(self):
        rng = np.random.default_rng(13)
        p = SnlParams.random(rng, 4, 81, dtype=np.float32, zero_offset=False)
        x = rng.standard_normal((4, 49, 49)).astype(np.float32)
        z, acts = snl_forward(x, p, GridSpec(9, 9))
        assert z.shape == (4, 49, 49)
        assert acts.affinity.shape == (2401, 81)
        np.testing.assert_allclose(acts.affinity.sum(axis=1), 1.0, atol=1e-6)

    def test_multiply_counts(self):
        rng = np.random.default_rng(14)
        c, h, w, k = 4, 6, 6, 9
        n = h * w
        p = SnlParams.random(rng, c, k, dtype=np.float64, zero_offset=False)
        x = rng.standard_normal((c, h, w))
        with MultiplyCounter() as mc:
            snl_forward(x, p, GridSpec(3, 3))
        assert mc.count == n * k * (c // 2) + n * k * c


class TestSnlBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(15)
        p = SnlParams.random(rng, 4, 9, dtype=np.float64, zero_gamma=False,
                             zero_offset=False)
        x = rng.standard_normal((4, 5, 5))
        z, acts = snl_forward(x, p, GridSpec(3, 3))
        gx, grads = snl_backward(acts, p, x, np.zeros_like(z))
        assert not gx.any()
        assert all(not g.any() for g in grads.values())

    def test_frozen_offsets_gradcheck(self):
        # zero offset head: remaining parameter gradients match finite
        # differences at the dense threshold
        from snlblock.gradcheck import central_diff, relative_errors
        rng = np.random.default_rng(16)
        g = GridSpec(3, 3)
        p = SnlParams.random(rng, 4, 9, dtype=np.float64, scale=0.4,
                             zero_gamma=False, zero_offset=True)
        x = rng.standard_normal((4, 5, 5))

        def loss(x_):
            z, _ = snl_forward(x_, p, g)
            return 0.5 * float((z * z).sum())

        z, acts = snl_forward(x, p, g)
        gx, _ = snl_backward(acts, p, x, z)
        numeric = central_diff(loss, x, 1e-5)
        assert relative_errors(gx, numeric).max() < 1e-6

    def test_full_gradcheck_kink_avoided(self):
        from snlblock.gradcheck import check_block
        reports = check_block("snl", seed=0)
        assert all(r.passed for r in reports), [r.line() for r in reports]

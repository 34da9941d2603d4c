"""Ray marching, interpolation, SH shading, compositing, and gradients."""

import hashlib
import types

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqgrid import (DenseGrid, GridDims, Ray, RenderConfig, composite, eval_sh,
                    intersect_aabb, render_image, render_ray, render_rays,
                    trilerp)
from vqgrid.render import camera_rays, sh_basis
from vqgrid.scenes import generate_cameras

from _oracles import fd_check_ray, random_grid, random_ray, trilinear_stencil

UNIT_CUBE = GridDims(2, 2, 2, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


class TestRay:
    def test_validation(self):
        with pytest.raises(ValueError, match="3-vectors"):
            Ray(np.zeros(2), np.array([1.0, 0.0, 0.0]))
        with pytest.raises(ValueError, match="unit length"):
            Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))
        with pytest.raises(ValueError, match="t_near must be below"):
            Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), t_near=2.0, t_far=1.0)


class TestIntersectAABB:
    def test_axis_aligned_entry_and_exit(self):
        ray = Ray((-1.0, 0.5, 0.5), (1.0, 0.0, 0.0))
        assert intersect_aabb(ray, UNIT_CUBE) == pytest.approx((1.0, 2.0))

    def test_diagonal(self):
        ray = Ray((-1.0, -1.0, -1.0), np.ones(3) / np.sqrt(3.0))
        t0, t1 = intersect_aabb(ray, UNIT_CUBE)
        assert t0 == pytest.approx(np.sqrt(3.0))
        assert t1 == pytest.approx(2.0 * np.sqrt(3.0))

    def test_miss_parallel_outside_slab(self):
        ray = Ray((-1.0, 2.0, 0.5), (1.0, 0.0, 0.0))
        assert intersect_aabb(ray, UNIT_CUBE) is None

    def test_miss_pointing_away(self):
        ray = Ray((-1.0, 0.5, 0.5), (-1.0, 0.0, 0.0))
        assert intersect_aabb(ray, UNIT_CUBE) is None

    def test_clips_to_ray_interval(self):
        ray = Ray((-1.0, 0.5, 0.5), (1.0, 0.0, 0.0), t_near=1.5, t_far=1.8)
        assert intersect_aabb(ray, UNIT_CUBE) == pytest.approx((1.5, 1.8))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_interior_aim_always_hits(self, seed):
        rng = np.random.default_rng(seed)
        dims = GridDims(3, 4, 5, (-2.0, -1.0, 0.0), (1.0, 2.0, 3.0))
        ray = random_ray(dims, rng)
        hit = intersect_aabb(ray, dims)
        assert hit is not None
        t0, t1 = hit
        assert t0 < t1
        mid = ray.origin + 0.5 * (t0 + t1) * ray.direction
        assert np.all(mid >= dims.lower - 1e-9)
        assert np.all(mid <= dims.upper + 1e-9)


class TestTrilerp:
    def test_exact_at_voxel_centers(self):
        rng = np.random.default_rng(1)
        dims = GridDims(3, 4, 5, (-1.0, 0.0, 2.0), (1.0, 2.0, 4.0))
        values = rng.normal(size=dims.n)
        from vqgrid import voxel_center
        centers = voxel_center(dims, np.arange(dims.n))
        np.testing.assert_allclose(trilerp(values, dims, centers), values,
                                   atol=1e-12)

    def test_matches_reference_stencil(self):
        rng = np.random.default_rng(2)
        dims = GridDims(4, 3, 5, (-1.0, -2.0, 0.0), (2.0, 1.0, 1.0))
        values = rng.normal(size=dims.n)
        pts = dims.lower + rng.uniform(0.0, 1.0, (64, 3)) * (dims.upper - dims.lower)
        got = trilerp(values, dims, pts)
        for p, v in zip(pts, got):
            idx, w = trilinear_stencil(dims, p)
            assert v == pytest.approx(float(w @ values[idx]), abs=1e-12)
        # vector-valued variant agrees channel by channel
        vec = rng.normal(size=(dims.n, 2))
        got2 = trilerp(vec, dims, pts)
        np.testing.assert_allclose(got2[:, 0], trilerp(vec[:, 0], dims, pts))

    def test_border_band_clamps_to_edge_voxels(self):
        dims = GridDims(2, 2, 2, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        values = np.arange(8, dtype=np.float64)
        assert trilerp(values, dims, np.zeros(3)) == pytest.approx(0.0)
        assert trilerp(values, dims, np.ones(3)) == pytest.approx(7.0)

    def test_rejects_outside_points(self):
        with pytest.raises(ValueError, match="sample outside grid"):
            trilerp(np.zeros(8), UNIT_CUBE, (1.5, 0.5, 0.5))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_convex_combination(self, seed):
        rng = np.random.default_rng(seed)
        dims = GridDims(*rng.integers(2, 6, size=3))
        values = rng.normal(size=dims.n)
        p = dims.lower + rng.uniform(0.0, 1.0, 3) * (dims.upper - dims.lower)
        v = trilerp(values, dims, p)
        assert values.min() - 1e-12 <= v <= values.max() + 1e-12


class TestSphericalHarmonics:
    def test_constant_term(self):
        b = sh_basis((0.0, 0.0, 1.0), 0)
        assert b[0] == pytest.approx(0.28209479177387814)

    def test_degree_one_values(self):
        b = sh_basis((0.0, 1.0, 0.0), 1)
        assert b[1] == pytest.approx(-0.4886025119029199)
        assert b[2] == 0.0 and b[3] == 0.0
        b = sh_basis((0.0, 0.0, 1.0), 1)
        assert b[2] == pytest.approx(0.4886025119029199)

    def test_degree_two_diagonal_direction(self):
        d = np.ones(3) / np.sqrt(3.0)
        b = sh_basis(d, 2)
        assert b[4] == pytest.approx(1.0925484305920792 / 3.0)
        assert b[6] == pytest.approx(0.0, abs=1e-15)  # 2z^2 - x^2 - y^2 = 0
        assert b[8] == pytest.approx(0.0, abs=1e-15)

    def test_eval_sh_picks_channels(self):
        # one-hot DC coefficient on the green channel
        coeffs = np.zeros(12)
        coeffs[4] = 2.0  # channel layout: [r x 4, g x 4, b x 4] for degree 1
        rgb = eval_sh(coeffs, (0.0, 0.0, 1.0))
        assert rgb[1] == pytest.approx(2.0 * 0.28209479177387814)
        assert rgb[0] == 0.0 and rgb[2] == 0.0

    def test_eval_sh_rejects_bad_length(self):
        with pytest.raises(ValueError, match=r"3\*\(degree\+1\)\^2"):
            eval_sh(np.zeros(10), (0.0, 0.0, 1.0))


class TestComposite:
    def test_two_sample_weights(self):
        c = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        pixel, weights, t_final = composite([0.5, 0.5], c)
        np.testing.assert_allclose(weights, [0.5, 0.25])
        assert t_final == pytest.approx(0.25)
        np.testing.assert_allclose(pixel, [0.5, 0.25, 0.0])

    def test_opaque_sample_blocks_background(self):
        pixel, weights, t_final = composite([1.0], [[0.2, 0.4, 0.6]],
                                            background=(1.0, 1.0, 1.0))
        assert t_final == 0.0
        np.testing.assert_allclose(pixel, [0.2, 0.4, 0.6])

    def test_background_passthrough(self):
        pixel, weights, t_final = composite([], np.zeros((0, 3)),
                                            background=(0.3, 0.2, 0.1))
        assert t_final == 1.0
        np.testing.assert_allclose(pixel, [0.3, 0.2, 0.1])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=0, max_size=12))
    def test_energy_conservation(self, alphas):
        colors = np.ones((len(alphas), 3))
        _, weights, t_final = composite(alphas, colors)
        assert weights.sum() + t_final == pytest.approx(1.0)
        assert np.all(weights >= 0.0) and 0.0 <= t_final <= 1.0 + 1e-12


class TestRenderRay:
    def test_miss_returns_background(self):
        grid = DenseGrid.zeros(GridDims(4, 4, 4), sh_degree=0)
        cfg = RenderConfig(background=(0.1, 0.2, 0.3))
        pixel, trace = render_ray(grid, Ray((5.0, 5.0, 5.0), (1.0, 0.0, 0.0)), cfg)
        np.testing.assert_allclose(pixel, [0.1, 0.2, 0.3])
        assert trace == []

    def test_uniform_medium_matches_closed_form(self):
        """Constant density + constant color has an exact transmittance.

        With identical per-sample alphas the product telescopes:
        T_final = exp(-sigma * L / diagonal) independent of step count.
        """
        dims = GridDims(8, 8, 8, (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
        sigma = 2.7
        grid = DenseGrid(dims, 0,
                         np.full(dims.n, sigma, np.float32),
                         np.zeros(dims.n * 3, np.float32))
        cfg = RenderConfig(step_size=0.37, early_stop_T=0.0,
                           background=(1.0, 1.0, 1.0))
        ray = Ray((-3.0, 0.123, -0.456), (1.0, 0.0, 0.0))
        t0, t1 = intersect_aabb(ray, dims)
        expected_T = np.exp(-sigma * (t1 - t0) / dims.voxel_diagonal)
        pixel, trace = render_ray(grid, ray, cfg)
        got_T = trace[-1].transmittance * (1.0 - trace[-1].alpha)
        assert got_T == pytest.approx(expected_T, rel=1e-10)
        # zero SH features shade to sigmoid(0) = 0.5 gray
        expected = 0.5 * (1.0 - expected_T) + 1.0 * expected_T
        np.testing.assert_allclose(pixel, expected, rtol=1e-10)

    def test_trace_bookkeeping(self):
        rng = np.random.default_rng(4)
        grid = random_grid(GridDims(6, 6, 6), 1, rng)
        cfg = RenderConfig(early_stop_T=0.0)
        ray = random_ray(grid.dims, rng)
        pixel, trace = render_ray(grid, ray, cfg)
        assert trace[0].transmittance == 1.0
        ts = [s.t for s in trace]
        assert all(a < b for a, b in zip(ts, ts[1:]))
        t_run = 1.0
        for s in trace:
            assert s.alpha == pytest.approx(1.0 - np.exp(-max(s.sigma, 0.0) * s.delta))
            assert s.transmittance == pytest.approx(t_run, rel=1e-12)
            assert s.point_importance == pytest.approx(s.transmittance * s.alpha)
            t_run *= 1.0 - s.alpha
        # recompositing the trace reproduces the pixel
        recomposed, _, t_final = composite([s.alpha for s in trace],
                                           [s.color for s in trace],
                                           cfg.background)
        np.testing.assert_allclose(recomposed, pixel, rtol=1e-10)

    def test_uniform_step_covers_interval(self):
        rng = np.random.default_rng(5)
        grid = random_grid(GridDims(5, 5, 5), 0, rng)
        ray = random_ray(grid.dims, rng)
        cfg = RenderConfig(step_size=0.9, early_stop_T=0.0)
        _, trace = render_ray(grid, ray, cfg)
        t0, t1 = intersect_aabb(ray, grid.dims)
        n = len(trace)
        dt = (t1 - t0) / n
        assert dt <= cfg.step_size * grid.dims.voxel_diagonal + 1e-12
        for i, s in enumerate(trace):
            assert s.t == pytest.approx(t0 + (i + 0.5) * dt, rel=1e-9)
            assert s.delta == pytest.approx(dt / grid.dims.voxel_diagonal)

    def test_early_stop_shortens_march(self):
        dims = GridDims(8, 8, 8)
        grid = DenseGrid(dims, 0, np.full(dims.n, 500.0, np.float32),
                         np.zeros(dims.n * 3, np.float32))
        ray = Ray((-3.0, 0.0, 0.0), (1.0, 0.0, 0.0))
        _, full = render_ray(grid, ray, RenderConfig(early_stop_T=0.0))
        _, stopped = render_ray(grid, ray, RenderConfig(early_stop_T=1e-4))
        assert 0 < len(stopped) < len(full)
        assert stopped[-1].transmittance * (1.0 - stopped[-1].alpha) < 1e-4

    def test_batch_matches_single_rays(self):
        rng = np.random.default_rng(6)
        grid = random_grid(GridDims(5, 6, 7), 1, rng)
        cfg = RenderConfig()
        rays = [random_ray(grid.dims, rng) for _ in range(10)]
        batch = render_rays(grid,
                            np.stack([r.origin for r in rays]),
                            np.stack([r.direction for r in rays]), cfg)
        for ray, pixel in zip(rays, batch):
            single, _ = render_ray(grid, ray, cfg)
            np.testing.assert_array_equal(single, pixel)


class TestRenderConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="step_size must be positive"):
            RenderConfig(step_size=0.0)
        with pytest.raises(ValueError, match=r"early_stop_T must lie in \[0, 1\)"):
            RenderConfig(early_stop_T=1.0)
        with pytest.raises(ValueError, match="background must be a 3-vector"):
            RenderConfig(background=(1.0, 1.0))
        with pytest.raises(ValueError, match="only relu density and sigmoid"):
            RenderConfig(sigma_activation="exp")

    def test_step_world(self):
        dims = GridDims(4, 4, 4, (0.0, 0.0, 0.0), (4.0, 4.0, 4.0))
        assert RenderConfig(step_size=0.5).step_world(dims) == pytest.approx(
            0.5 * np.sqrt(3.0))


class TestRenderImage:
    def test_shape_and_dtype(self):
        grid = DenseGrid.zeros(GridDims(4, 4, 4), 0)
        cam = generate_cameras(1, 3.0, width=9, height=7, focal=5.0)[0]
        img = render_image(grid, cam)
        assert img.shape == (7, 9, 3) and img.dtype == np.float32

    def test_rejects_empty_resolution(self):
        grid = DenseGrid.zeros(GridDims(4, 4, 4), 0)
        fake = types.SimpleNamespace(width=0, height=7, focal=5.0, pose=None)
        with pytest.raises(ValueError, match="camera resolution"):
            render_image(grid, fake)

    def test_camera_rays_through_pixel_centers(self):
        cam = generate_cameras(1, 3.0, width=4, height=2, focal=3.0, seed=0)[0]
        origins, dirs = camera_rays(cam)
        assert origins.shape == (8, 3) and dirs.shape == (8, 3)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0)
        np.testing.assert_allclose(origins, np.tile(cam.pose[:, 3], (8, 1)))
        # the image-center offset is symmetric: outer columns mirror in x
        grid_x = dirs.reshape(2, 4, 3)
        np.testing.assert_allclose(grid_x[:, 0, 0], -grid_x[:, 3, 0], atol=1e-12)

    def test_deterministic_golden_image(self):
        rng = np.random.default_rng(3)
        dims = GridDims(16, 16, 16, (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
        grid = DenseGrid(dims, 1,
                         rng.uniform(-1.0, 6.0, dims.n).astype(np.float32),
                         rng.normal(0.0, 0.5, dims.n * 12).astype(np.float32))
        cam = generate_cameras(1, 2.8, width=20, height=20, focal=16.0, seed=5)[0]
        img = render_image(grid, cam, RenderConfig())
        assert float(img.mean()) == pytest.approx(0.6306442618370056, abs=1e-9)
        digest = hashlib.sha256(np.ascontiguousarray(img, np.float32).tobytes())
        assert digest.hexdigest() == ("987d35fcf22651ab361d8b4f0339a1af"
                                      "48674ae28819aa39aaf26acdb43326f4")


class TestGradients:
    def test_finite_difference_agreement(self):
        rng = np.random.default_rng(7)
        dims = GridDims(5, 5, 5, (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
        grid = DenseGrid(dims, 1,
                         rng.uniform(0.5, 3.0, dims.n),
                         rng.normal(0.0, 0.5, dims.n * 12))
        cfg = RenderConfig(early_stop_T=0.0)
        checked = 0
        for _ in range(6):
            ray = random_ray(dims, rng)
            upstream = rng.normal(size=3)
            checked += fd_check_ray(grid, ray, cfg, upstream, rng, max_checks=3)
        assert checked >= 20

    def test_gradients_respect_relu_gate(self):
        """Voxels whose density is far below zero get no density gradient."""
        rng = np.random.default_rng(8)
        dims = GridDims(4, 4, 4)
        grid = DenseGrid(dims, 0,
                         np.full(dims.n, -5.0),
                         rng.normal(0.0, 0.5, dims.n * 3))
        from vqgrid import render_ray_backward
        grads = render_ray_backward(grid, random_ray(dims, rng),
                                    RenderConfig(early_stop_T=0.0),
                                    np.ones(3))
        assert grads.density_index.size == 0

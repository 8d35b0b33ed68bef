"""Multi-resolution grid: interpolation and closed-form derivative checks."""

import numpy as np
import pytest

from gridsurf import diffcore as dc
from gridsurf import feature_grid as fg
from gridsurf.camera import Intrinsics
from gridsurf.diffcore import GridBoundsError, GridGeom


def unit_level(width=1, dims=(3, 3, 3), lo=(0.0, 0.0, 0.0), voxel=1.0):
    geom = GridGeom(np.array(lo, dtype=np.float64), voxel, dims)
    feats = np.zeros((geom.n_vertices, width), dtype=np.float64)
    return fg.GridLevel(geom, dc.leaf(feats))


def set_corner(level, ijk, channel, value):
    nx, ny, nz = level.geom.dims
    flat = (ijk[0] * ny + ijk[1]) * nz + ijk[2]
    level.features.data[flat, channel] = value


def interior_points(level, n, rng, margin=0.05):
    geom = level.geom
    lo = geom.origin + margin * geom.voxel_size
    hi = geom.origin + (np.array(geom.dims) - 1 - margin) * geom.voxel_size
    return rng.uniform(lo, hi, size=(n, 3))


class TestSample:
    def test_vertex_value_recovered(self):
        level = unit_level()
        set_corner(level, (1, 2, 1), 0, 5.0)
        out = fg.sample(level, np.array([[1.0, 2.0, 1.0]]))
        assert out.data[0, 0] == pytest.approx(5.0, abs=1e-12)

    def test_cell_center_averages_corners(self):
        rng = np.random.default_rng(3)
        level = unit_level()
        level.features.data[:] = rng.normal(size=level.features.data.shape)
        nx, ny, nz = level.geom.dims
        corners = []
        for di in (0, 1):
            for dj in (0, 1):
                for dk in (0, 1):
                    corners.append(level.features.data[((1 + di) * ny + dj) * nz + dk, 0])
        out = fg.sample(level, np.array([[1.5, 0.5, 0.5]]))
        assert out.data[0, 0] == pytest.approx(np.mean(corners), rel=1e-12)

    def test_linearity_in_features(self):
        rng = np.random.default_rng(4)
        a = unit_level(width=2)
        b = unit_level(width=2)
        a.features.data[:] = rng.normal(size=a.features.data.shape)
        b.features.data[:] = rng.normal(size=b.features.data.shape)
        combo = unit_level(width=2)
        combo.features.data[:] = a.features.data + 2.0 * b.features.data
        x = interior_points(a, 50, rng)
        got = fg.sample(combo, x).data
        want = fg.sample(a, x).data + 2.0 * fg.sample(b, x).data
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-13)

    def test_continuity_across_interior_face(self):
        rng = np.random.default_rng(5)
        level = unit_level()
        level.features.data[:] = rng.normal(size=level.features.data.shape)
        # straddle the x=1 face between cells 0 and 1
        eps = 1e-10
        y, z = 0.3, 0.7
        lo_side = fg.sample(level, np.array([[1.0 - eps, y, z]])).data[0, 0]
        hi_side = fg.sample(level, np.array([[1.0 + eps, y, z]])).data[0, 0]
        assert abs(lo_side - hi_side) < 1e-8

    def test_out_of_box_raises(self):
        level = unit_level()
        with pytest.raises(GridBoundsError):
            fg.sample(level, np.array([[-0.1, 0.5, 0.5]]))
        with pytest.raises(GridBoundsError):
            fg.sample(level, np.array([[0.5, 0.5, 2.1]]))

    def test_weights_nonnegative_sum_one(self):
        rng = np.random.default_rng(6)
        frac = rng.uniform(0, 1, size=(200, 3))
        w = dc._corner_weights(frac)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-14)


class TestJacobian:
    def test_single_corner_axis_aligned(self):
        # one active corner at the cell origin: f = (1-x)(1-y)(1-z), so at
        # y = z = 0 the x-derivative is exactly -1 in a unit voxel
        level = unit_level()
        set_corner(level, (0, 0, 0), 0, 1.0)
        J = fg.sample_jacobian(level, np.array([[0.37, 0.0, 0.0]]))
        assert J.shape == (1, 1, 3)
        assert J[0, 0, 0] == pytest.approx(-1.0, abs=1e-14)

    def test_constant_features_zero_jacobian(self):
        level = unit_level(width=3)
        level.features.data[:] = 0.8
        rng = np.random.default_rng(7)
        J = fg.sample_jacobian(level, interior_points(level, 40, rng))
        np.testing.assert_allclose(J, 0.0, atol=1e-13)

    def test_world_scaling(self):
        # same lattice values, half the voxel size: derivative doubles
        fine = unit_level(voxel=0.5)
        coarse = unit_level(voxel=1.0)
        rng = np.random.default_rng(8)
        vals = rng.normal(size=fine.features.data.shape)
        fine.features.data[:] = vals
        coarse.features.data[:] = vals
        Jf = fg.sample_jacobian(fine, np.array([[0.25, 0.25, 0.25]]))
        Jc = fg.sample_jacobian(coarse, np.array([[0.5, 0.5, 0.5]]))
        np.testing.assert_allclose(Jf, 2.0 * Jc, rtol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        level = unit_level(width=2, voxel=0.25, lo=(-0.3, 0.1, 0.0))
        level.features.data[:] = rng.normal(size=level.features.data.shape)
        x = interior_points(level, 30, rng, margin=0.2)
        J = fg.sample_jacobian(level, x)
        h = 1e-7
        for a in range(3):
            step = np.zeros(3)
            step[a] = h
            fp = fg.sample(level, x + step).data
            fm = fg.sample(level, x - step).data
            fd = (fp - fm) / (2 * h)
            np.testing.assert_allclose(J[:, :, a], fd, rtol=1e-6, atol=1e-9)


class TestHessianXX:
    def test_pair_formula_example(self):
        # corners (0,0,0) and (1,1,0) active, query at local z=0:
        # d2f/dxdy = (1-z) * (f000 + f110 - f010 - f100) = 2
        level = unit_level()
        set_corner(level, (0, 0, 0), 0, 1.0)
        set_corner(level, (1, 1, 0), 0, 1.0)
        H = fg.sample_hessian_xx(level, np.array([[0.4, 0.6, 0.0]]), 0)
        assert H.shape == (1, 3, 3)
        assert H[0, 0, 1] == pytest.approx(2.0, abs=1e-14)
        assert H[0, 1, 0] == pytest.approx(2.0, abs=1e-14)

    def test_diagonal_is_exactly_zero(self):
        rng = np.random.default_rng(10)
        level = unit_level(width=3, voxel=0.5)
        level.features.data[:] = rng.normal(size=level.features.data.shape)
        x = interior_points(level, 60, rng)
        for c in range(3):
            H = fg.sample_hessian_xx(level, x, c)
            assert np.all(H[:, 0, 0] == 0.0)
            assert np.all(H[:, 1, 1] == 0.0)
            assert np.all(H[:, 2, 2] == 0.0)
            np.testing.assert_allclose(H, np.swapaxes(H, 1, 2), rtol=0, atol=0)

    def test_constant_features_zero_hessian(self):
        level = unit_level()
        level.features.data[:] = -2.4
        rng = np.random.default_rng(11)
        H = fg.sample_hessian_xx(level, interior_points(level, 20, rng), 0)
        np.testing.assert_allclose(H, 0.0, atol=1e-13)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        level = unit_level(voxel=0.25, lo=(0.2, -0.1, 0.4))
        level.features.data[:] = rng.normal(size=level.features.data.shape)
        x = interior_points(level, 25, rng, margin=0.25)
        H = fg.sample_hessian_xx(level, x, 0)
        h = 1e-5
        for a in range(3):
            for b in range(3):
                if a == b:
                    continue
                sa = np.zeros(3)
                sb = np.zeros(3)
                sa[a] = h
                sb[b] = h

                def f(p):
                    return fg.sample(level, p).data[:, 0]

                fd = (f(x + sa + sb) - f(x + sa - sb) - f(x - sa + sb) + f(x - sa - sb)) / (4 * h * h)
                np.testing.assert_allclose(H[:, a, b], fd, rtol=1e-5, atol=1e-7)


class TestHessianXTheta:
    def test_cell_center_entries(self):
        # at the cell center every dw_k/dx has magnitude 1/4, sign set by
        # whether the corner sits on the + side of that axis
        level = unit_level()
        M = fg.sample_hessian_xtheta(level, np.array([[0.5, 0.5, 0.5]]))
        assert M.shape == (1, 3, 8)
        np.testing.assert_allclose(np.abs(M[0]), 0.25, rtol=0, atol=1e-14)
        for k in range(8):
            bits = ((k >> 2) & 1, (k >> 1) & 1, k & 1)
            for a in range(3):
                want = 0.25 if bits[a] == 1 else -0.25
                assert M[0, a, k] == pytest.approx(want, abs=1e-14)

    def test_same_for_all_channels_and_feature_values(self):
        rng = np.random.default_rng(13)
        a = unit_level(width=4)
        a.features.data[:] = rng.normal(size=a.features.data.shape)
        b = unit_level(width=4)
        x = interior_points(a, 10, rng)
        np.testing.assert_allclose(
            fg.sample_hessian_xtheta(a, x), fg.sample_hessian_xtheta(b, x), rtol=0, atol=0
        )

    def test_transpose_of_coefficient_jacobian(self):
        # d/dtheta_k (df/dx) must equal d/dx (df/dtheta_k); the latter is
        # the corner-weight jacobian, so the block is its transpose
        rng = np.random.default_rng(14)
        level = unit_level(voxel=0.5)
        x = interior_points(level, 20, rng)
        M = fg.sample_hessian_xtheta(level, x)
        _, frac = dc._locate(x, level.geom)
        Jw = dc._corner_jacobian(frac) / level.geom.voxel_size  # (N, 8, 3)
        np.testing.assert_allclose(M, np.swapaxes(Jw, 1, 2), rtol=0, atol=0)

    def test_matches_feature_perturbation(self):
        # exact for FD in theta: the jacobian is linear in features
        rng = np.random.default_rng(15)
        level = unit_level(voxel=0.5, lo=(-1.0, -1.0, -1.0))
        level.features.data[:] = rng.normal(size=level.features.data.shape)
        x = interior_points(level, 8, rng, margin=0.3)
        M = fg.sample_hessian_xtheta(level, x)
        cell, _ = dc._locate(x, level.geom)
        idx8 = dc._flat_corner_index(cell, level.geom)
        h = 1e-3
        for n in range(x.shape[0]):
            for k in range(8):
                flat = idx8[n, k]
                level.features.data[flat, 0] += h
                Jp = fg.sample_jacobian(level, x[n : n + 1])[0, 0]
                level.features.data[flat, 0] -= 2 * h
                Jm = fg.sample_jacobian(level, x[n : n + 1])[0, 0]
                level.features.data[flat, 0] += h
                np.testing.assert_allclose(M[n, :, k], (Jp - Jm) / (2 * h), rtol=1e-6, atol=1e-10)


class TestMultiGrid:
    def make(self, rng, lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0)):
        return fg.MultiGrid.create(lo, hi, rng, voxel_sizes=(0.8, 0.4), geom_width=3,
                                   color_width=2)

    def test_levels_ordered_coarse_to_fine(self):
        rng = np.random.default_rng(16)
        grid = fg.MultiGrid.create((-1, -1, -1), (1, 1, 1), rng, voxel_sizes=(0.1, 0.9, 0.3))
        sizes = [l.geom.voxel_size for l in grid.levels]
        assert sizes == sorted(sizes, reverse=True)
        assert grid.finest_voxel == pytest.approx(0.1)
        assert grid.color.geom.voxel_size == pytest.approx(0.1)

    def test_sample_multi_is_per_level_concat(self):
        rng = np.random.default_rng(17)
        grid = self.make(rng)
        x = rng.uniform(-0.8, 0.8, size=(30, 3))
        out = fg.sample_multi(grid, x).data
        assert out.shape == (30, grid.geom_width)
        parts = [fg.sample(l, x).data for l in grid.levels]
        np.testing.assert_allclose(out, np.concatenate(parts, axis=1), rtol=0, atol=0)

    def test_zeroed_level_zeroes_its_slice(self):
        rng = np.random.default_rng(18)
        grid = self.make(rng)
        grid.levels[1].features.data[:] = 0.0
        x = rng.uniform(-0.5, 0.5, size=(10, 3))
        out = fg.sample_multi(grid, x).data
        w0 = grid.levels[0].width
        assert np.all(out[:, w0:] == 0.0)
        assert np.any(out[:, :w0] != 0.0)

    def test_lattice_covers_requested_box(self):
        rng = np.random.default_rng(19)
        grid = self.make(rng, lo=(-1.05, -0.3, 0.0), hi=(0.95, 0.31, 2.0))
        for level in grid.levels + [grid.color]:
            g = level.geom
            top = g.origin + (np.array(g.dims) - 1) * g.voxel_size
            assert np.all(g.origin <= np.array([-1.05, -0.3, 0.0]) + 1e-12)
            assert np.all(top >= np.array([0.95, 0.31, 2.0]) - 1e-12)

    def test_init_scale_and_param_list(self):
        rng = np.random.default_rng(20)
        grid = self.make(rng)
        params = grid.parameters()
        assert len(params) == len(grid.levels) + 1
        for p in params:
            assert p.requires_grad
            assert np.max(np.abs(p.data)) <= fg.FEATURE_INIT_SCALE
        assert grid.geom_width == sum(l.width for l in grid.levels)

    def test_clamp_points_respects_margin(self):
        rng = np.random.default_rng(21)
        grid = self.make(rng)
        pts = np.array([[-5.0, 0.0, 0.0], [0.0, 5.0, 0.2], [0.1, 0.2, 0.3]])
        clamped = grid.clamp_points(pts)
        m = 0.5 * grid.finest_voxel
        assert clamped[0, 0] == pytest.approx(-1.0 + m)
        assert clamped[1, 1] == pytest.approx(1.0 - m)
        np.testing.assert_allclose(clamped[2], pts[2])
        fg.sample_multi(grid, clamped)  # must be sampleable

    def test_astype_casts_all_levels(self):
        rng = np.random.default_rng(22)
        grid = self.make(rng).astype(np.float32)
        for level in grid.levels + [grid.color]:
            assert level.features.data.dtype == np.float32

    def test_degenerate_box_rejected(self):
        rng = np.random.default_rng(23)
        with pytest.raises(ValueError):
            fg.GridLevel.create((0, 0, 0), (1, -1, 1), 0.5, 2, rng)

    def test_feature_row_mismatch_rejected(self):
        geom = GridGeom(np.zeros(3), 1.0, (3, 3, 3))
        with pytest.raises(ValueError):
            fg.GridLevel(geom, np.zeros((5, 2)))


class TestWorldBoxFromFrusta:
    def test_contains_centers_and_far_corners(self):
        intr = Intrinsics(60.0, 60.0, 40.0, 30.0, 80, 60)
        poses = np.tile(np.eye(4), (2, 1, 1))
        poses[1, :3, 3] = [0.5, -0.2, 0.1]
        lo, hi = fg.world_box_from_frusta(poses, intr, 2.0, padding=0.0)
        # identity camera looks down +z: far plane corners reach
        # x = +-(40/60)*2, y = +-(30/60)*2, z = 2 (then shifted for pose 1)
        assert lo[0] == pytest.approx(-40.0 / 60.0 * 2.0)
        assert hi[2] == pytest.approx(2.1)
        assert np.all(lo <= 0.0) and np.all(hi >= 0.0)

    def test_padding_and_per_frame_far(self):
        intr = Intrinsics(60.0, 60.0, 40.0, 30.0, 80, 60)
        poses = np.tile(np.eye(4), (2, 1, 1))
        lo1, hi1 = fg.world_box_from_frusta(poses, intr, [1.0, 3.0], padding=0.0)
        lo2, hi2 = fg.world_box_from_frusta(poses, intr, [1.0, 3.0], padding=0.5)
        assert hi1[2] == pytest.approx(3.0)
        np.testing.assert_allclose(lo2, lo1 - 0.5)
        np.testing.assert_allclose(hi2, hi1 + 0.5)

"""Pinhole model, rotation parameterization, pose files."""

import numpy as np
import pytest

from gridsurf import camera, diffcore as dc
from gridsurf.camera import Intrinsics, PoseParam


INTR = Intrinsics(fx=100.0, fy=100.0, cx=40.0, cy=30.0, width=80, height=60)


def rot_data(nu):
    return camera.exp_so3_data(np.asarray(nu, dtype=np.float64))


class TestExpSO3:
    def test_zero_is_identity(self):
        np.testing.assert_allclose(rot_data([0, 0, 0]), np.eye(3), atol=1e-16)

    def test_quarter_turn_about_x(self):
        R = rot_data([np.pi / 2, 0.0, 0.0])
        np.testing.assert_allclose(R @ [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], atol=1e-15)

    def test_inverse_is_negated_tangent(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            nu = rng.normal(size=3)
            np.testing.assert_allclose(rot_data(nu) @ rot_data(-nu), np.eye(3), atol=1e-12)

    def test_orthonormal_det_one(self):
        rng = np.random.default_rng(2)
        for scale in (1e-9, 1e-5, 1e-2, 1.0, 3.0):
            nu = scale * rng.normal(size=3)
            R = rot_data(nu)
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    def test_series_and_closed_form_agree_at_switch(self):
        axis = np.array([0.6, -0.64, 0.48])
        axis /= np.linalg.norm(axis)
        below = rot_data(axis * 1e-4 * (1.0 - 1e-12))
        above = rot_data(axis * 1e-4 * (1.0 + 1e-12))
        # straddling the crossover angle, the series and the closed form
        # must agree to machine precision
        np.testing.assert_allclose(below, above, atol=1e-14)

    def test_graph_matches_plain_array(self):
        rng = np.random.default_rng(3)
        for scale in (1e-6, 0.3, 2.0):
            nu = scale * rng.normal(size=3)
            R = camera.exp_so3(dc.constant(nu))
            np.testing.assert_allclose(R.data, rot_data(nu), atol=1e-15)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(3, 3))
        for nu0 in (np.zeros(3), rng.normal(size=3) * 0.5):
            nu = dc.leaf(nu0.copy())
            loss = dc.sum_(dc.mul(camera.exp_so3(nu), dc.constant(w)))
            (g,) = dc.grad(loss, [nu])
            h = 1e-7
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                fp = np.sum(rot_data(nu0 + e) * w)
                fm = np.sum(rot_data(nu0 - e) * w)
                assert g.data[k] == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-10)


class TestRays:
    def test_principal_ray(self):
        d = camera.pixel_rays(INTR, [[INTR.cx, INTR.cy]])
        np.testing.assert_allclose(d, [[0.0, 0.0, 1.0]], atol=1e-15)

    def test_unit_norm_and_bounds(self):
        rng = np.random.default_rng(5)
        px = np.stack([rng.uniform(0, INTR.width - 1e-9, 50),
                       rng.uniform(0, INTR.height - 1e-9, 50)], axis=1)
        d = camera.pixel_rays(INTR, px)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-14)
        for bad in ([[-1.0, 5.0]], [[5.0, 60.0]], [[80.0, 5.0]]):
            with pytest.raises(ValueError):
                camera.pixel_rays(INTR, bad)

    def test_z_scale_converts_depth_to_range(self):
        px = np.array([[INTR.cx, INTR.cy], [0.0, 0.0], [70.0, 10.0]])
        s = camera.ray_to_z_scale(INTR, px)
        assert s[0] == pytest.approx(1.0, abs=1e-15)
        d = camera.pixel_rays(INTR, px)
        z = 2.37
        pts = d * (z * s)[:, None]  # travel z/cos(angle) along the unit ray
        np.testing.assert_allclose(pts[:, 2], z, atol=1e-12)

    def test_backproject_identity_and_translation(self):
        o, d = camera.backproject(INTR, np.eye(4), [[INTR.cx, INTR.cy]])
        np.testing.assert_allclose(o.data, 0.0, atol=1e-15)
        np.testing.assert_allclose(d.data, [[0.0, 0.0, 1.0]], atol=1e-15)
        m = np.eye(4)
        m[:3, 3] = [1.0, -2.0, 0.5]
        o2, d2 = camera.backproject(INTR, m, [[INTR.cx, INTR.cy], [10.0, 50.0]])
        np.testing.assert_allclose(o2.data, [[1.0, -2.0, 0.5]] * 2)
        _, d_id = camera.backproject(INTR, np.eye(4), [[INTR.cx, INTR.cy], [10.0, 50.0]])
        np.testing.assert_allclose(d2.data, d_id.data, atol=1e-15)

    def test_project_backproject_round_trip(self):
        rng = np.random.default_rng(6)
        pose = np.eye(4)
        pose[:3, :3] = rot_data(rng.normal(size=3))
        pose[:3, 3] = rng.normal(size=3)
        px = np.stack([rng.uniform(1, INTR.width - 1, 40),
                       rng.uniform(1, INTR.height - 1, 40)], axis=1)
        o, d = camera.backproject(INTR, pose, px)
        z = rng.uniform(0.5, 4.0, size=40)
        scale = camera.ray_to_z_scale(INTR, px)
        pts = o.data + d.data * (z * scale)[:, None]
        u, v, z_out = camera.project(INTR, pose, pts)
        np.testing.assert_allclose(u, px[:, 0], atol=1e-6)
        np.testing.assert_allclose(v, px[:, 1], atol=1e-6)
        np.testing.assert_allclose(z_out, z, atol=1e-9)

    def test_project_flags_points_behind_camera(self):
        _, _, z = camera.project(INTR, np.eye(4), np.array([[0.0, 0.0, -1.0]]))
        assert z[0] < 0


class TestPoseParam:
    def test_rotation_composes_reference_and_update(self):
        rng = np.random.default_rng(7)
        R0 = rot_data(rng.normal(size=3))
        p = PoseParam(R0, np.zeros(3))
        p.nu.data[:] = [0.01, -0.02, 0.03]
        np.testing.assert_allclose(p.rotation().data, R0 @ rot_data(p.nu.data), atol=1e-15)
        np.testing.assert_allclose(p.rotation_data(), p.rotation().data, atol=1e-15)

    def test_refresh_preserves_value_and_zeros_tangent(self):
        rng = np.random.default_rng(8)
        p = PoseParam(rot_data(rng.normal(size=3)), rng.normal(size=3))
        p.nu.data[:] = 0.05 * rng.normal(size=3)
        before = p.matrix()
        p.refresh()
        np.testing.assert_allclose(p.nu.data, 0.0)
        np.testing.assert_allclose(p.matrix(), before, atol=1e-14)

    def test_orthonormal_after_many_refreshes(self):
        rng = np.random.default_rng(9)
        p = PoseParam(np.eye(3), np.zeros(3))
        for _ in range(200):
            p.nu.data[:] = 0.02 * rng.normal(size=3)
            p.refresh()
        R = p.rotation_data()
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-10
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)

    def test_frozen_pose_has_no_parameters(self):
        p = PoseParam(np.eye(3), np.zeros(3), trainable=False)
        assert p.parameters() == []
        assert not p.nu.requires_grad and not p.t.requires_grad
        before = p.matrix()
        p.refresh()  # no-op on frozen poses
        np.testing.assert_allclose(p.matrix(), before)

    def test_pose_gradient_matches_finite_differences(self):
        # loss through backproject as the renderer uses it, probed at nu=0
        rng = np.random.default_rng(10)
        pose = PoseParam(rot_data(rng.normal(size=3)), rng.normal(size=3))
        px = np.array([[12.0, 40.0], [70.0, 5.0], [33.0, 22.0]])
        w_o = rng.normal(size=(3, 3))
        w_d = rng.normal(size=(3, 3))

        def loss_value():
            o, d = camera.backproject(INTR, pose, px)
            return dc.sum_(dc.mul(o, dc.constant(w_o))) + dc.sum_(
                dc.mul(d, dc.constant(w_d)))

        g_nu, g_t = dc.grad(loss_value(), [pose.nu, pose.t])
        h = 1e-6
        for park, grad in ((pose.nu, g_nu), (pose.t, g_t)):
            for k in range(3):
                old = park.data[k]
                park.data[k] = old + h
                fp = float(loss_value().data)
                park.data[k] = old - h
                fm = float(loss_value().data)
                park.data[k] = old
                fd = (fp - fm) / (2 * h)
                assert grad.data[k] == pytest.approx(fd, rel=1e-4, abs=1e-9)


class TestPoseErrors:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(11)
        poses = np.stack([np.eye(4) for _ in range(5)])
        for f in range(5):
            poses[f, :3, :3] = rot_data(rng.normal(size=3))
            poses[f, :3, 3] = rng.normal(size=3)
        dt, dr = camera.pose_errors(poses, poses)
        assert dt == pytest.approx(0.0, abs=1e-12)
        assert dr == pytest.approx(0.0, abs=1e-5)

    def test_uniform_offset(self):
        poses = np.stack([np.eye(4) for _ in range(4)])
        moved = poses.copy()
        moved[:, 0, 3] += 0.05
        dt, dr = camera.pose_errors(moved, poses)
        assert dt == pytest.approx(0.05, abs=1e-12)
        assert dr == pytest.approx(0.0, abs=1e-6)

    def test_pure_rotation(self):
        poses = np.stack([np.eye(4) for _ in range(3)])
        rot = poses.copy()
        axis = np.array([1.0, 2.0, -1.0])
        axis /= np.linalg.norm(axis)
        rot[:, :3, :3] = rot_data(axis * np.radians(7.5))
        dt, dr = camera.pose_errors(rot, poses)
        assert dt == pytest.approx(0.0, abs=1e-12)
        assert dr == pytest.approx(7.5, abs=1e-9)

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            camera.pose_errors(np.stack([np.eye(4)] * 2), np.stack([np.eye(4)] * 3))

    def test_perturbation_has_exact_magnitudes(self):
        rng = np.random.default_rng(12)
        base = np.eye(4)
        base[:3, :3] = rot_data(rng.normal(size=3))
        base[:3, 3] = [0.3, -0.2, 0.9]
        for _ in range(10):
            pert = camera.perturb_pose(base, 0.02, 1.0, rng)
            dt, dr = camera.pose_errors(pert[None], base[None])
            assert dt == pytest.approx(0.02, rel=1e-10)
            assert dr == pytest.approx(1.0, rel=1e-7)


class TestFiles:
    def test_pose_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        poses = np.stack([np.eye(4) for _ in range(6)])
        for f in range(6):
            poses[f, :3, :3] = rot_data(rng.normal(size=3))
            poses[f, :3, 3] = rng.normal(size=3)
        path = tmp_path / "poses.txt"
        camera.save_poses(path, poses)
        np.testing.assert_array_equal(camera.load_poses(path), poses)

    def test_single_pose_file(self, tmp_path):
        path = tmp_path / "one.txt"
        camera.save_poses(path, np.eye(4)[None])
        assert camera.load_poses(path).shape == (1, 4, 4)

    def test_malformed_pose_file(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2 3\n")
        with pytest.raises(ValueError):
            camera.load_poses(path)

    def test_intrinsics_round_trip(self, tmp_path):
        path = tmp_path / "intr.txt"
        camera.save_intrinsics(path, INTR)
        back = camera.load_intrinsics(path)
        assert back == INTR

    def test_malformed_intrinsics(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2 3 4\n")
        with pytest.raises(ValueError):
            camera.load_intrinsics(path)

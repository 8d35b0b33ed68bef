"""Decoder networks and the sphere pre-fit."""

import numpy as np
import pytest

from gridsurf import decoders, diffcore as dc, feature_grid as fg


def zero_net(in_width, out_width, hidden=8, n_hidden=2):
    rng = np.random.default_rng(0)
    net = decoders.DecoderNet.create(in_width, out_width, rng, hidden=hidden, n_hidden=n_hidden)
    for W, b in net.layers:
        W.data[:] = 0.0
        b.data[:] = 0.0
    return net


class TestDecoderNet:
    def test_shapes_and_parameter_count(self):
        rng = np.random.default_rng(1)
        net = decoders.DecoderNet.create(16, 1, rng)
        assert net.in_width == 16
        dims = [(W.data.shape, b.data.shape) for W, b in net.layers]
        assert dims == [((16, 32), (32,)), ((32, 32), (32,)), ((32, 1), (1,))]
        assert len(net.parameters()) == 6
        assert all(p.requires_grad for p in net.parameters())

    def test_zero_net_outputs_output_bias(self):
        net = zero_net(4, 2)
        net.layers[-1][1].data[:] = [0.3, -0.7]
        out = net.forward(dc.constant(np.random.default_rng(2).normal(size=(5, 4))))
        np.testing.assert_allclose(out.data, np.tile([0.3, -0.7], (5, 1)))

    def test_forward_matches_numpy_reference(self):
        rng = np.random.default_rng(3)
        net = decoders.DecoderNet.create(6, 2, rng, hidden=5, n_hidden=2)
        x = rng.normal(size=(11, 6))
        h = x
        for i, (W, b) in enumerate(net.layers):
            h = h @ W.data + b.data
            if i < len(net.layers) - 1:
                h = np.maximum(h, 0.0)
        out = net.forward(dc.constant(x))
        np.testing.assert_allclose(out.data, h, rtol=1e-14)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        net = decoders.DecoderNet.create(3, 1, rng, hidden=4, n_hidden=1)
        x = rng.normal(size=(7, 3)) + 0.05  # keep preactivations off the relu kink
        params = net.parameters()
        loss = dc.sum_(net.forward(dc.constant(x)))
        grads = dc.grad(loss, params)
        h = 1e-6
        for p, g in zip(params, grads):
            flat = p.data.reshape(-1)
            for idx in range(flat.size):
                old = flat[idx]
                flat[idx] = old + h
                fp = float(dc.sum_(net.forward(dc.constant(x))).data)
                flat[idx] = old - h
                fm = float(dc.sum_(net.forward(dc.constant(x))).data)
                flat[idx] = old
                fd = (fp - fm) / (2 * h)
                assert g.data.reshape(-1)[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_astype(self):
        rng = np.random.default_rng(5)
        net = decoders.DecoderNet.create(4, 1, rng).astype(np.float32)
        assert all(W.data.dtype == np.float32 and b.data.dtype == np.float32
                   for W, b in net.layers)


class TestDecodeHeads:
    def test_decode_sdf_passthrough(self):
        net = zero_net(16, 1)
        net.layers[-1][1].data[:] = 0.25
        out = decoders.decode_sdf(net, dc.constant(np.zeros((3, 16))))
        np.testing.assert_allclose(out.data, 0.25)

    def test_decode_sdf_rejects_nonfinite(self):
        net = zero_net(4, 1)
        net.layers[-1][1].data[:] = np.nan
        with pytest.raises(FloatingPointError):
            decoders.decode_sdf(net, dc.constant(np.zeros((2, 4))))

    def test_decode_color_range_and_midpoint(self):
        net = zero_net(6 + 3, 3)
        dirs = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        out = decoders.decode_color(net, dc.constant(np.zeros((2, 6))), dirs)
        np.testing.assert_allclose(out.data, 0.5)  # sigmoid(0)
        rng = np.random.default_rng(6)
        net2 = decoders.DecoderNet.create(9, 3, rng, hidden=8)
        feat = rng.normal(size=(40, 6))
        d = rng.normal(size=(40, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        out2 = decoders.decode_color(net2, dc.constant(feat), d)
        assert np.all(out2.data > 0.0) and np.all(out2.data < 1.0)

    def test_decode_color_rejects_nonunit_directions(self):
        net = zero_net(9, 3)
        with pytest.raises(ValueError):
            decoders.decode_color(net, dc.constant(np.zeros((1, 6))),
                                  np.array([[0.0, 0.0, 2.0]]))


class TestGeometricInit:
    def small_setup(self, seed=7):
        rng = np.random.default_rng(seed)
        grid = fg.MultiGrid.create((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), rng,
                                   voxel_sizes=(0.4, 0.1), geom_width=4, color_width=2)
        net = decoders.DecoderNet.create(grid.geom_width, 1, rng)
        return grid, net

    def test_prefit_reaches_sphere_sdf(self):
        grid, net = self.small_setup()
        center = np.zeros(3)
        radius = 0.3
        final = decoders.geometric_init(grid, net, center, radius, seed=7)
        assert final < 0.01  # meters, on fresh held-out points

        def phi(pts):
            with dc.pause_grad():
                return decoders.decode_sdf(net, fg.sample_multi(grid, pts)).data[:, 0]

        rng = np.random.default_rng(8)
        d = rng.normal(size=(64, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        surf = center + radius * d
        assert np.max(np.abs(phi(surf))) < 0.03
        assert phi(center[None, :])[0] == pytest.approx(-radius, abs=0.01)
        two_r = center + np.array([[2 * radius, 0.0, 0.0]])
        assert phi(two_r)[0] == pytest.approx(radius, abs=0.02)

    def test_sphere_must_fit_in_box(self):
        grid, net = self.small_setup()
        with pytest.raises(ValueError):
            decoders.geometric_init(grid, net, (0.9, 0.0, 0.0), 0.3)

    def test_budget_exhaustion_raises(self):
        grid, net = self.small_setup()
        with pytest.raises(decoders.InitError):
            decoders.geometric_init(grid, net, np.zeros(3), 0.3, max_steps=0)

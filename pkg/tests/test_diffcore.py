"""Tape core: op semantics, finite-difference oracles, replay, grid sampling."""

import numpy as np
import pytest

import gridsurf.diffcore as dc
from gridsurf import gradcheck


# ---------------------------------------------------------------------------
# basic op semantics


def test_affine_relu_path():
    W = dc.constant(np.eye(2))
    x = dc.leaf(np.array([-1.0, 2.0]))
    y = dc.relu(dc.matmul(dc.reshape(x, (1, 2)), W))
    np.testing.assert_array_equal(y.data, [[0.0, 2.0]])


def test_concat_shapes():
    a = dc.constant(np.zeros((1, 2)))
    b = dc.constant(np.zeros((1, 3)))
    assert dc.concat([a, b], axis=1).shape == (1, 5)


def test_linear_backward_is_transpose():
    rng = np.random.default_rng(0)
    W = dc.leaf(rng.normal(size=(3, 4)))
    x = dc.leaf(rng.normal(size=(1, 3)))
    g = rng.normal(size=(1, 4))
    y = dc.matmul(x, W)
    gx = dc.grad(y, x, grad_output=g)
    np.testing.assert_allclose(gx.data, g @ W.data.T, rtol=1e-12)


def test_sigmoid_slope_at_zero():
    x = dc.leaf(np.array([0.0]))
    y = dc.sigmoid(x)
    g = dc.grad(dc.sum_(y), x)
    np.testing.assert_allclose(g.data, [0.25], rtol=1e-12)


def test_constant_has_no_grad():
    c = dc.constant(np.ones(3))
    x = dc.leaf(np.ones(3))
    y = dc.sum_(dc.mul(c, x))
    gc_, gx = dc.grad(y, [c, x])
    np.testing.assert_array_equal(gc_.data, np.zeros(3))
    np.testing.assert_array_equal(gx.data, np.ones(3))


def test_track_marks_root_and_passes_through():
    # untracked chain: grad w.r.t. a plain constant is zero
    c = dc.constant(np.array([1.0, 2.0]))
    y = dc.sum_(dc.mul(c, c))
    assert np.all(dc.grad(y, c).data == 0.0)
    # tracked root receives the gradient
    t = dc.track(dc.constant(np.array([1.0, 2.0])))
    y2 = dc.sum_(dc.mul(t, t))
    np.testing.assert_allclose(dc.grad(y2, t).data, [2.0, 4.0])
    # and still forwards into a live upstream chain
    x = dc.leaf(np.array([3.0]))
    t2 = dc.track(dc.mul(x, 2.0))
    y3 = dc.sum_(dc.mul(t2, t2))
    np.testing.assert_allclose(dc.grad(y3, x).data, [24.0])


def test_grad_output_shape_mismatch_raises():
    x = dc.leaf(np.ones(3))
    y = dc.mul(x, 2.0)
    with pytest.raises(ValueError):
        dc.grad(y, x, grad_output=np.ones(4))


def test_pause_grad_suppresses_graph():
    x = dc.leaf(np.ones(3))
    with dc.pause_grad():
        y = dc.mul(x, 3.0)
    assert not y.requires_grad and y.parents == ()


# ---------------------------------------------------------------------------
# finite-difference oracles (acceptance criterion 1 runs these at full count;
# here a fast smoke pass keeps unit runs quick)


def test_first_order_ops_match_fd():
    results = gradcheck.first_order_suite(seed=11, cases_per_op=4)
    bad = [r for r in results if not r.ok]
    assert not bad, "\n" + "\n".join(f"{r.name}: {r.max_err:.3e}" for r in bad)


def test_second_order_ops_match_fd():
    results = gradcheck.second_order_suite(seed=12, cases_per_op=2)
    bad = [r for r in results if not r.ok]
    assert not bad, "\n" + "\n".join(f"{r.name}: {r.max_err:.3e}" for r in bad)


def test_double_backward_quadratic():
    # f(x) = x.x, d/dx of ||grad f||^2 at (1,0,0) is (8,0,0)
    x = dc.leaf(np.array([1.0, 0.0, 0.0]))
    f = dc.sum_(dc.mul(x, x))
    g = dc.grad(f, x, create_graph=True)
    n2 = dc.sum_(dc.mul(g, g))
    h = dc.grad(n2, x)
    np.testing.assert_allclose(h.data, [8.0, 0.0, 0.0], rtol=1e-12)


def test_double_backward_constant_fn_is_zero():
    x = dc.leaf(np.array([0.3, -0.4]))
    f = dc.sum_(dc.mul(x, 0.0)) + 5.0
    g = dc.grad(f, x, create_graph=True)
    h = dc.grad(dc.sum_(dc.mul(g, dc.constant(np.ones(2)))), x)
    np.testing.assert_array_equal(h.data, np.zeros(2))


# ---------------------------------------------------------------------------
# tape replay


def test_tape_replay_bit_identical():
    rng = np.random.default_rng(5)
    with dc.Tape() as tape:
        x = dc.leaf(rng.normal(size=(4, 3)))
        tape.watch(x, "x")
        y = dc.sigmoid(dc.matmul(x, dc.constant(rng.normal(size=(3, 2)))))
        z = dc.sum_(dc.mul(y, y), axis=1)
    out = tape.replay(outputs=[z])[0]
    np.testing.assert_array_equal(out, z.data)


def test_tape_replay_with_feed():
    with dc.Tape() as tape:
        x = dc.leaf(np.array([1.0, 2.0]))
        tape.watch(x, "x")
        y = dc.exp(x)
    new = np.array([0.5, -0.5])
    out = tape.replay(feeds={"x": new}, outputs=[y])[0]
    np.testing.assert_array_equal(out, np.exp(new))


# ---------------------------------------------------------------------------
# trilinear grid sampling


def _unit_geom(n=4):
    return dc.GridGeom(origin=np.zeros(3), voxel_size=1.0, dims=(n, n, n))


def _rand_features(rng, n=4, c=2):
    return dc.leaf(rng.normal(size=(n * n * n, c)))


def test_grid_sample_vertex_one_hot():
    geom = _unit_geom()
    f = np.zeros((64, 1))
    f[0, 0] = 1.0
    feats = dc.leaf(f)
    # interior vertex hit exactly: weights become one-hot
    pts = dc.constant(np.array([[1.0, 1.0, 1.0]]))
    out = dc.grid_sample(feats, pts, geom)
    v = np.zeros((64, 1))
    v[21, 0] = 3.0  # corner index of (1,1,1) with x-major flat layout
    out2 = dc.grid_sample(dc.leaf(v), pts, geom)
    np.testing.assert_allclose(out2.data, [[3.0]])


def test_grid_sample_cell_center_mean():
    geom = _unit_geom()
    rng = np.random.default_rng(2)
    feats = _rand_features(rng)
    pts = dc.constant(np.array([[0.5, 0.5, 0.5]]))
    out = dc.grid_sample(feats, pts, geom)
    corners = [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    idx = [16 * i + 4 * j + k for i, j, k in corners]
    np.testing.assert_allclose(out.data[0], feats.data[idx].mean(axis=0), rtol=1e-12)


def test_grid_sample_scalar_rederivation():
    # independent scalar trilinear interpolation
    geom = _unit_geom()
    rng = np.random.default_rng(3)
    feats = _rand_features(rng, c=1)
    p = rng.uniform(0.2, 2.8, size=(10, 3))
    out = dc.grid_sample(feats, dc.constant(p), geom).data[:, 0]
    f3 = feats.data[:, 0].reshape(4, 4, 4)
    for n in range(10):
        c = np.floor(p[n]).astype(int)
        t = p[n] - c
        acc = 0.0
        for i in (0, 1):
            for j in (0, 1):
                for k in (0, 1):
                    w = ((t[0] if i else 1 - t[0]) * (t[1] if j else 1 - t[1])
                         * (t[2] if k else 1 - t[2]))
                    acc += w * f3[c[0] + i, c[1] + j, c[2] + k]
        np.testing.assert_allclose(out[n], acc, rtol=1e-12)


def test_grid_sample_linear_in_features():
    geom = _unit_geom()
    rng = np.random.default_rng(4)
    f1 = rng.normal(size=(64, 2))
    f2 = rng.normal(size=(64, 2))
    pts = dc.constant(rng.uniform(0.2, 2.8, size=(7, 3)))
    a, b = 0.7, -1.3
    lhs = dc.grid_sample(dc.leaf(a * f1 + b * f2), pts, geom).data
    rhs = (a * dc.grid_sample(dc.leaf(f1), pts, geom).data
           + b * dc.grid_sample(dc.leaf(f2), pts, geom).data)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-11, atol=1e-13)


def test_grid_sample_continuity_across_faces():
    geom = _unit_geom()
    rng = np.random.default_rng(5)
    feats = _rand_features(rng)
    # approach the shared face x=1 from both sides
    base = np.array([[1.0, 0.6, 1.7]])
    left = dc.grid_sample(feats, dc.constant(base - [[1e-10, 0, 0]]), geom).data
    right = dc.grid_sample(feats, dc.constant(base + [[1e-10, 0, 0]]), geom).data
    np.testing.assert_allclose(left, right, atol=1e-8)


def test_grid_sample_out_of_bounds_raises():
    geom = _unit_geom()
    feats = dc.leaf(np.zeros((64, 1)))
    with pytest.raises(dc.GridBoundsError):
        dc.grid_sample(feats, dc.constant(np.array([[3.5, 0.5, 0.5]])), geom)
    with pytest.raises(dc.GridBoundsError):
        dc.grid_sample(feats, dc.constant(np.array([[-0.1, 0.5, 0.5]])), geom)


def test_grid_gradients_match_fd():
    results = gradcheck.grid_suite(seed=13, cases=20)
    bad = [r for r in results if not r.ok]
    assert not bad, "\n" + "\n".join(f"{r.name}: {r.max_err:.3e}" for r in bad)


def test_grid_third_order_raises():
    geom = _unit_geom()
    rng = np.random.default_rng(6)
    feats = _rand_features(rng)
    pts = dc.track(dc.constant(rng.uniform(0.2, 2.8, size=(3, 3))))
    y = dc.grid_sample(feats, pts, geom)
    g = dc.grad(dc.sum_(y), pts, create_graph=True)       # 1st in x
    s = dc.sum_(dc.mul(g, g))
    h = dc.grad(s, pts, create_graph=True)                # 2nd in x
    with pytest.raises(dc.GradOrderError):
        dc.grad(dc.sum_(dc.mul(h, h)), pts)               # 3rd: out of contract


def test_backward_accumulates_shared_subexpression():
    x = dc.leaf(np.array([2.0]))
    y = dc.mul(x, x)          # x^2
    z = dc.add(y, y)          # 2 x^2 -> dz/dx = 4x = 8
    g = dc.grad(dc.sum_(z), x)
    np.testing.assert_allclose(g.data, [8.0])


def test_grad_unreachable_is_zeros():
    x = dc.leaf(np.ones(2))
    y = dc.leaf(np.ones(3))
    g = dc.grad(dc.sum_(dc.mul(x, 2.0)), y)
    np.testing.assert_array_equal(g.data, np.zeros(3))

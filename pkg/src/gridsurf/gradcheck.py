"""Finite-difference verification of every differentiable building block.

Each case draws random inputs, computes a scalar through the tape, and
compares reverse-mode gradients against central differences at step
1e-5 in double precision.  First derivatives must match to relative
error 1e-6, second derivatives (gradient-of-gradient contractions) to
1e-5.  Nondifferentiable kinks (relu, abs, max ties, clip edges) are
sampled away from by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camera
from . import decoders
from . import diffcore as dc
from . import feature_grid as fg
from . import renderer
from . import seeds

__all__ = ["CheckResult", "fd_gradient", "rel_error", "check_case",
           "first_order_suite", "second_order_suite", "grid_suite",
           "model_suite", "run_all", "FIRST_ORDER_TOL", "SECOND_ORDER_TOL",
           "FD_STEP"]

FD_STEP = 1e-5
FIRST_ORDER_TOL = 1e-6
SECOND_ORDER_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    cases: int
    max_err: float
    tol: float

    @property
    def ok(self):
        return self.max_err <= self.tol


def fd_gradient(f, xs, h=FD_STEP):
    """Central-difference gradient of scalar f w.r.t. a list of arrays."""
    grads = []
    for i, x in enumerate(xs):
        g = np.zeros_like(x, dtype=np.float64)
        flat = x.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            fp = f(xs)
            flat[j] = keep - h
            fm = f(xs)
            flat[j] = keep
            gf[j] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    """Worst elementwise error scaled by max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float((np.abs(a - b) / scale).max()) if a.size else 0.0


def check_case(build, xs):
    """Compare tape gradients of build(tensors) against finite differences.

    build maps a list of leaf Tensors to a scalar Tensor; xs are the
    matching float64 arrays.  Returns the worst relative error.
    """
    leaves = [dc.leaf(x.copy()) for x in xs]
    out = build(leaves)
    ad = dc.grad(out, leaves)
    ad = [g.data for g in ad]

    def func(arrs):
        # keep the tape alive: builds may contain inner grad() calls whose
        # values feed the objective, so constants would change the function
        return float(build([dc.leaf(a) for a in arrs]).data)

    fd = fd_gradient(func, [x.copy() for x in xs])
    return max(rel_error(a, f) for a, f in zip(ad, fd))


def _second_order_case(build, xs, rng):
    """FD-check the gradient of (grad . u) for a random direction u."""
    us = [rng.uniform(-1, 1, size=x.shape) for x in xs]

    def grad_dot_u(leaves):
        out = build(leaves)
        gs = dc.grad(out, leaves, create_graph=True)
        total = None
        for g, u in zip(gs, us):
            term = dc.sum_(g * dc.constant(u))
            total = term if total is None else total + term
        return total

    return check_case(grad_dot_u, xs)


def _away_from(rng, shape, lo, hi, avoid=(), gap=0.05):
    x = rng.uniform(lo, hi, size=shape)
    if avoid:
        for _ in range(64):
            bad = np.zeros(x.shape, dtype=bool)
            for a in avoid:
                bad |= np.abs(x - a) < gap
            if not bad.any():
                break
            x[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
    return x


def _pair_separated(rng, shape, gap=0.05):
    a = rng.uniform(-2, 2, size=shape)
    b = rng.uniform(-2, 2, size=shape)
    near = np.abs(a - b) < gap
    b[near] += np.where(b[near] >= a[near], gap, -gap)
    return a, b


def _with_weight(rng, fn):
    """Project the op output with a fixed random vector so every output
    element receives a distinct adjoint."""
    def build(leaves, w_cache={}):
        y = fn(leaves)
        key = tuple(y.data.shape)
        if key not in w_cache:
            w_cache[key] = rng.uniform(0.5, 1.5, size=y.data.shape)
        return dc.sum_(y * dc.constant(w_cache[key]))
    return build


def _op_specs(rng):
    """(name, sampler, fn) triples covering the elementwise/structural ops."""
    u = lambda *s: rng.uniform(-2, 2, size=s)
    pos = lambda *s: rng.uniform(0.1, 3.0, size=s)

    def sep_pair():
        return list(_pair_separated(rng, (5,)))

    specs = [
        ("add", lambda: [u(5), u(5)], lambda t: t[0] + t[1]),
        ("add_broadcast", lambda: [u(3, 1), u(1, 4)], lambda t: t[0] + t[1]),
        ("sub", lambda: [u(5), u(5)], lambda t: t[0] - t[1]),
        ("mul", lambda: [u(5), u(5)], lambda t: t[0] * t[1]),
        ("mul_broadcast", lambda: [u(4, 3), u(3)], lambda t: t[0] * t[1]),
        ("div", lambda: [u(5), np.where(u(5) >= 0, 1.0, -1.0) * rng.uniform(0.5, 2.5, size=5)],
         lambda t: t[0] / t[1]),
        ("neg", lambda: [u(5)], lambda t: -t[0]),
        ("power2", lambda: [u(5)], lambda t: t[0] ** 2),
        ("power3", lambda: [u(5)], lambda t: t[0] ** 3),
        ("power_frac", lambda: [pos(5)], lambda t: t[0] ** 1.7),
        ("exp", lambda: [u(5)], lambda t: dc.exp(t[0])),
        ("log", lambda: [pos(5)], lambda t: dc.log(t[0])),
        ("sqrt", lambda: [pos(5)], lambda t: dc.sqrt(t[0])),
        ("sin", lambda: [u(5)], lambda t: dc.sin(t[0])),
        ("cos", lambda: [u(5)], lambda t: dc.cos(t[0])),
        ("sigmoid", lambda: [u(5)], lambda t: dc.sigmoid(t[0])),
        ("softplus", lambda: [u(5)], lambda t: dc.softplus(t[0])),
        ("relu", lambda: [_away_from(rng, (6,), -2, 2, avoid=(0.0,))],
         lambda t: dc.relu(t[0])),
        ("abs", lambda: [_away_from(rng, (6,), -2, 2, avoid=(0.0,))],
         lambda t: dc.absolute(t[0])),
        ("maximum", sep_pair, lambda t: dc.maximum(t[0], t[1])),
        ("minimum", sep_pair, lambda t: dc.minimum(t[0], t[1])),
        ("clip", lambda: [_away_from(rng, (6,), -2, 2, avoid=(-0.5, 0.5))],
         lambda t: dc.clip(t[0], -0.5, 0.5)),
        ("where", lambda: [u(6), u(6)],
         lambda t: dc.where(np.arange(6) % 2 == 0, t[0], t[1])),
        ("sum", lambda: [u(3, 4)], lambda t: dc.sum_(t[0], axis=0)),
        ("sum_keepdims", lambda: [u(3, 4)], lambda t: dc.sum_(t[0], axis=1, keepdims=True)),
        ("mean", lambda: [u(3, 4)], lambda t: dc.mean(t[0], axis=1)),
        ("matmul", lambda: [u(3, 4), u(4, 2)], lambda t: dc.matmul(t[0], t[1])),
        ("matmul_batched", lambda: [u(2, 3, 4), u(2, 4, 2)], lambda t: dc.matmul(t[0], t[1])),
        ("reshape", lambda: [u(3, 4)], lambda t: dc.reshape(t[0], (2, 6))),
        ("swapaxes", lambda: [u(3, 4)], lambda t: dc.swapaxes(t[0], 0, 1)),
        ("concat", lambda: [u(2, 3), u(4, 3)], lambda t: dc.concat([t[0], t[1]], axis=0)),
        ("stack", lambda: [u(4), u(4)], lambda t: dc.stack([t[0], t[1]], axis=1)),
        ("getitem", lambda: [u(6, 3)], lambda t: t[0][1:5]),
        ("index_select", lambda: [u(6, 3)],
         lambda t: dc.index_select(t[0], np.array([0, 2, 2, 5]))),
        ("cumsum", lambda: [u(2, 5)], lambda t: dc.cumsum(t[0], axis=1)),
        ("flip", lambda: [u(2, 5)], lambda t: dc.flip(t[0], axis=1)),
        ("broadcast_to", lambda: [u(1, 4)], lambda t: dc.broadcast_to(t[0], (3, 4))),
        ("chain_mixed", lambda: [u(5), pos(5)],
         lambda t: dc.exp(dc.sin(t[0])) / dc.sqrt(t[1]) + dc.sigmoid(t[0] * t[1])),
    ]
    return specs


def first_order_suite(seed=0, cases_per_op=30):
    rng = seeds.substream(seed, seeds.GRADCHECK, 1)
    results = []
    for name, sampler, fn in _op_specs(rng):
        worst = 0.0
        build = _with_weight(rng, fn)
        for _ in range(cases_per_op):
            worst = max(worst, check_case(build, sampler()))
        results.append(CheckResult(f"op/{name}", cases_per_op, worst, FIRST_ORDER_TOL))
    return results


def second_order_suite(seed=0, cases_per_op=8):
    rng = seeds.substream(seed, seeds.GRADCHECK, 2)
    results = []
    for name, sampler, fn in _op_specs(rng):
        build = _with_weight(rng, fn)
        worst = 0.0
        for _ in range(cases_per_op):
            worst = max(worst, _second_order_case(build, sampler(), rng))
        results.append(CheckResult(f"grad2/{name}", cases_per_op, worst, SECOND_ORDER_TOL))
    return results


def _random_grid(rng, channels=3):
    geom = fg.GridGeom(origin=np.zeros(3), voxel_size=0.25, dims=(4, 4, 4))
    feats = rng.uniform(-1, 1, size=(64, channels))
    return geom, feats


def _interior_points(rng, geom, n):
    # keep fractional offsets in [0.1, 0.9] so FD never crosses a cell wall
    cells = rng.integers(0, np.asarray(geom.dims) - 1, size=(n, 3))
    frac = rng.uniform(0.1, 0.9, size=(n, 3))
    return geom.origin + (cells + frac) * geom.voxel_size


def grid_suite(seed=0, cases=25):
    rng = seeds.substream(seed, seeds.GRADCHECK, 3)
    results = []
    w_feat, w_pts, w_second = 0.0, 0.0, 0.0
    for _ in range(cases):
        geom, feats = _random_grid(rng)
        pts = _interior_points(rng, geom, 6)
        proj = rng.uniform(0.5, 1.5, size=(6, 3))

        def build(leaves):
            y = dc.grid_sample(leaves[0], leaves[1], geom)
            return dc.sum_(y * dc.constant(proj))

        w_feat = max(w_feat, check_case(lambda ls: build([ls[0], dc.constant(pts)]), [feats]))
        w_pts = max(w_pts, check_case(lambda ls: build([dc.constant(feats), ls[0]]), [pts]))
        w_second = max(w_second, _second_order_case(build, [feats, pts], rng))
    results.append(CheckResult("grid/features", cases, w_feat, FIRST_ORDER_TOL))
    results.append(CheckResult("grid/points", cases, w_pts, FIRST_ORDER_TOL))
    results.append(CheckResult("grid/second_order", cases, w_second, SECOND_ORDER_TOL))
    return results


def model_suite(seed=0, cases=10):
    """Derivatives through decoders, pose rotation, and the render chain."""
    rng = seeds.substream(seed, seeds.GRADCHECK, 4)
    results = []

    worst = 0.0
    for _ in range(cases):
        net = decoders.DecoderNet.create(
            5, 2, seeds.substream(int(rng.integers(1 << 31)), seeds.NET_INIT))
        x = rng.uniform(-1, 1, size=(4, 5))
        proj = rng.uniform(0.5, 1.5, size=(4, 2))
        params = [p.data.copy() for p in net.parameters()]

        def build(leaves):
            saved = net.layers
            net.layers = [(leaves[2 * i], leaves[2 * i + 1]) for i in range(len(saved))]
            try:
                y = net.forward(dc.constant(x))
            finally:
                net.layers = saved
            return dc.sum_(y * dc.constant(proj))

        worst = max(worst, check_case(build, params))
    results.append(CheckResult("decoder/params", cases, worst, FIRST_ORDER_TOL))

    worst = 0.0
    for _ in range(cases):
        nu = rng.uniform(-0.5, 0.5, size=3)
        proj = rng.uniform(0.5, 1.5, size=(3, 3))

        def build(leaves):
            return dc.sum_(camera.exp_so3(leaves[0]) * dc.constant(proj))

        worst = max(worst, check_case(build, [nu]))
        worst = max(worst, check_case(build, [np.zeros(3)]))
        tiny = rng.uniform(-1e-5, 1e-5, size=3)
        worst = max(worst, check_case(build, [tiny]))
    results.append(CheckResult("pose/exp_so3", cases * 3, worst, FIRST_ORDER_TOL))

    worst = 0.0
    for _ in range(cases):
        n_ray, n_s = 3, 6
        phis = np.sort(rng.uniform(-0.4, 0.4, size=(n_ray, n_s)))[:, ::-1].copy()
        phis += rng.uniform(-0.01, 0.01, size=phis.shape)
        cols = rng.uniform(0.1, 0.9, size=(n_ray, n_s, 3))
        depths = np.sort(rng.uniform(0.5, 3.0, size=(n_ray, n_s)), axis=1)
        s0 = np.array([rng.uniform(2.0, 8.0)])

        def build(leaves):
            al = renderer.alphas(leaves[0], dc.exp(leaves[2]))
            chat, dhat, w = renderer.composite(al, leaves[1], dc.constant(depths))
            return dc.sum_(chat) + dc.sum_(dhat) + dc.sum_(w * w)

        worst = max(worst, check_case(build, [phis, cols, np.log(s0)]))
    results.append(CheckResult("render/alpha_composite", cases, worst, FIRST_ORDER_TOL))

    worst = 0.0
    for _ in range(cases):
        g = rng.uniform(-1.5, 1.5, size=(8, 3))
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 0.3)
        g *= rng.uniform(0.5, 1.5, size=(8, 1))

        def build(leaves):
            return dc.mean(renderer.loss_eikonal(leaves[0]))

        worst = max(worst, check_case(build, [g]))
    results.append(CheckResult("render/eikonal", cases, worst, FIRST_ORDER_TOL))

    return results


def run_all(seed=0, cases_per_op=30, second_order_cases=8):
    results = []
    results += first_order_suite(seed, cases_per_op)
    results += second_order_suite(seed, second_order_cases)
    results += grid_suite(seed)
    results += model_suite(seed)
    return results


def report(results):
    lines = []
    total = 0
    for r in results:
        status = "pass" if r.ok else "FAIL"
        total += r.cases
        lines.append(f"{status}  {r.name:<26} cases={r.cases:<5d} max_rel_err={r.max_err:.3e}  tol={r.tol:g}")
    ok = all(r.ok for r in results)
    lines.append(f"{'pass' if ok else 'FAIL'}  total cases: {total}")
    return "\n".join(lines), ok

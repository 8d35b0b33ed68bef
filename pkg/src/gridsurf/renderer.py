"""SDF volume rendering and the training objective.

Rendering follows the unbiased occlusion-aware weighting for SDFs: the
opacity of sample i is the positive part of the relative drop of a
sigmoid of the SDF between consecutive samples, alpha-composited into
weights.  Depth is the weight-averaged sample distance along the unit
ray, so observed z-depth is converted to along-ray distance once at
batch assembly.

The objective combines color, depth, truncation-region SDF supervision,
free-space relaxation, an eikonal penalty on free-space samples, and a
gradient-smoothness penalty on a global near-surface point set.  SDF
gradients come from the autodiff graph itself (not finite differences),
built with create_graph so the whole objective stays differentiable
w.r.t. grids, decoders, sharpness, and camera poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import camera
from . import decoders
from . import diffcore as dc
from . import feature_grid as fg
from . import sampler
from . import seeds

__all__ = [
    "LossWeights",
    "ModelState",
    "alphas",
    "composite",
    "loss_rgb_depth",
    "loss_sdf_fs",
    "loss_eikonal",
    "train_objective",
]

SIGMA_FLOOR = 1e-12  # denominator clamp in the opacity ratio
TRANS_FLOOR = 1e-15  # transmittance log clamp


@dataclass
class LossWeights:
    """Objective term weights and the geometric constants they use."""

    rgb: float = 10.0
    depth: float = 1.0
    sdf: float = 10.0
    fs: float = 1.0
    eik: float = 1.0
    smooth: float = 1.0
    truncation: float = 0.16  # meters
    freespace_alpha: float = 5.0
    smooth_delta: float = 0.004  # meters, perturbation radius
    smooth_count: int = 1024

    def __post_init__(self):
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")
        for name in ("rgb", "depth", "sdf", "fs", "eik", "smooth"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


class ModelState:
    """Everything the objective optimizes, in a fixed parameter order."""

    def __init__(self, grid, geom_net, color_net, log_s, poses):
        self.grid = grid
        self.geom_net = geom_net
        self.color_net = color_net
        self.log_s = log_s  # sharpness s = exp(log_s) > 0 by construction
        self.poses = poses  # list[camera.PoseParam]

    @property
    def dtype(self):
        return self.grid.levels[0].features.dtype

    def s_tensor(self):
        return dc.exp(self.log_s)

    def s_value(self):
        return float(np.exp(self.log_s.data))

    def grid_params(self):
        return [l.features for l in self.grid.levels] + [self.grid.color.features]

    def decoder_params(self):
        return self.geom_net.parameters() + self.color_net.parameters() + [self.log_s]

    def pose_params(self):
        out = []
        for p in self.poses:
            out.extend(p.parameters())
        return out

    def parameters(self):
        return self.grid_params() + self.decoder_params() + self.pose_params()

    def pose_matrices(self):
        return np.stack([p.matrix() for p in self.poses], axis=0)


# ---------------------------------------------------------------------------
# rendering ops


def alphas(phis, s):
    """Per-sample opacity from SDFs along each ray.

    alpha_i = max((sig(s phi_i) - sig(s phi_{i+1})) / sig(s phi_i), 0),
    with the final sample's alpha fixed to 0 (it has no successor).

    Args:
        phis: Tensor (M, S), S >= 2.
        s: positive sharpness, scalar Tensor or float.

    Returns:
        Tensor (M, S) in [0, 1].
    """
    if not isinstance(s, dc.Tensor):
        s = dc.constant(np.asarray(s, dtype=phis.dtype))
    m, n = phis.shape
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    sig = dc.sigmoid(dc.mul(phis, s))
    ratio = dc.div(sig[:, 1:], dc.maximum(sig[:, :-1], SIGMA_FLOOR))
    head = 1.0 - dc.minimum(ratio, 1.0)
    tail = dc.constant(np.zeros((m, 1), dtype=phis.dtype))
    return dc.concat([head, tail], axis=1)


def composite(al, colors, depths):
    """Alpha-composite per-sample colors and depths.

    Args:
        al: Tensor (M, S) opacities.
        colors: Tensor (M, S, 3).
        depths: Tensor or array (M, S).

    Returns:
        (color (M, 3), depth (M,), weights (M, S)) Tensors, where
        weights_i = T_i alpha_i and T is accumulated transmittance.
    """
    if not isinstance(depths, dc.Tensor):
        depths = dc.constant(np.asarray(depths, dtype=al.dtype))
    m, n = al.shape
    om = 1.0 - al
    logt = dc.cumsum(dc.log(dc.maximum(om, TRANS_FLOOR)), axis=1)
    zero = dc.constant(np.zeros((m, 1), dtype=al.dtype))
    trans = dc.exp(dc.concat([zero, logt[:, : n - 1]], axis=1))
    w = dc.mul(trans, al)
    chat = dc.sum_(dc.mul(dc.reshape(w, (m, n, 1)), colors), axis=1)
    dhat = dc.sum_(dc.mul(w, depths), axis=1)
    return chat, dhat, w


def render_weights_data(phi, s):
    """Plain-array rendering weights, for importance sampling passes."""
    sig = dc._sigmoid_raw(s * phi)
    ratio = sig[:, 1:] / np.maximum(sig[:, :-1], SIGMA_FLOOR)
    om = np.concatenate(
        [np.minimum(ratio, 1.0), np.ones((phi.shape[0], 1), dtype=phi.dtype)], axis=1
    )
    trans = np.cumprod(
        np.concatenate([np.ones((phi.shape[0], 1), dtype=phi.dtype), om[:, :-1]], axis=1),
        axis=1,
    )
    return trans * (1.0 - om)


# ---------------------------------------------------------------------------
# loss terms (single-ray forms used directly by tests; the batched
# objective below inlines the same math)


def loss_rgb_depth(chat, dhat, observed_color, observed_depth=None):
    """Per-ray photometric and depth losses (L2 over channels, L1 depth)."""
    err = dc.sub(chat, dc.constant(np.asarray(observed_color, dtype=chat.dtype)))
    l_rgb = dc.sqrt(dc.sum_(dc.mul(err, err), axis=-1) + 1e-24)
    if observed_depth is None:
        return l_rgb, None
    l_d = dc.absolute(dc.sub(dhat, dc.constant(np.asarray(observed_depth, dtype=chat.dtype))))
    return l_rgb, l_d


def loss_sdf_fs(phi, bound, truncation, freespace_alpha=5.0):
    """Per-point SDF / free-space loss and the subset tag.

    Returns (loss Tensor, tag) with tag "tr" when |bound| <= truncation
    (the sample lies in the truncation region near the observed surface)
    else "fs".
    """
    b = float(bound)
    if abs(b) <= truncation:
        return dc.absolute(dc.sub(phi, b)), "tr"
    val = dc.maximum(
        dc.maximum(0.0, dc.exp(dc.mul(phi, -freespace_alpha)) - 1.0), dc.sub(phi, b)
    )
    return val, "fs"


def loss_eikonal(grad_phi):
    """(1 - ||grad phi||)^2 per point; grad_phi Tensor (N, 3)."""
    norm = dc.sqrt(dc.sum_(dc.mul(grad_phi, grad_phi), axis=-1) + 1e-20)
    diff = dc.sub(1.0, norm)
    return dc.mul(diff, diff)


# ---------------------------------------------------------------------------
# batched objective


def realized_pose_arrays(model, frames):
    """Graph rotation/translation rows for the given frame ids: (U,9),(U,3)."""
    rows_r, rows_t = [], []
    for f in frames:
        p = model.poses[int(f)]
        rows_r.append(dc.reshape(p.rotation(), (1, 9)))
        rows_t.append(dc.reshape(p.t, (1, 3)))
    return dc.concat(rows_r, axis=0), dc.concat(rows_t, axis=0)


def _box_exit(origins, dirs, lo, hi):
    """Distance to the last box plane along each ray (arrays)."""
    r = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t1 = (lo - origins) / r
    t2 = (hi - origins) / r
    return np.min(np.maximum(t1, t2), axis=1)


def _phi_data(model, pts):
    """Inference-only SDF evaluation at (N, 3) points (already clamped)."""
    with dc.pause_grad():
        feat = fg.sample_multi(model.grid, pts)
        return decoders.decode_sdf(model.geom_net, feat).data[:, 0]


def draw_smooth_points(model, dataset, count, truncation, delta, rng):
    """Global near-surface set: random valid-depth pixels, jittered along
    the ray within +-truncation, each paired with a point offset by a
    uniform random direction of length delta.

    Returns (x, x_eps) arrays (count, 3), clamped into the grid box.
    Sample locations use current pose values but are not differentiated
    through; they define where the smoothness penalty is measured.
    """
    frames, vs, us = dataset.valid_pixels
    if frames.size == 0:
        return None
    pick = rng.integers(0, frames.size, size=count)
    f, v, u = frames[pick], vs[pick], us[pick]
    pixels = np.stack([u, v], axis=1).astype(np.float64)
    intr = dataset.intrinsics
    d_cam = camera.pixel_rays(intr, pixels)
    scale = camera.ray_to_z_scale(intr, pixels)
    depth_ray = dataset.depths[f, v, u] * scale + rng.uniform(-truncation, truncation, size=count)
    mats = model.pose_matrices()[f]
    dirs = np.einsum("nij,nj->ni", mats[:, :3, :3], d_cam)
    x = mats[:, :3, 3] + depth_ray[:, None] * dirs
    x = model.grid.clamp_points(x)
    # perturbation: retry directions that leave the box, then clamp
    margin = 0.5 * model.grid.finest_voxel
    lo, hi = model.grid.lo + margin, model.grid.hi - margin
    eps_dir = rng.normal(size=(count, 8, 3))
    eps_dir /= np.linalg.norm(eps_dir, axis=2, keepdims=True)
    cand = x[:, None, :] + delta * eps_dir
    ok = ((cand >= lo) & (cand <= hi)).all(axis=2)
    first = np.argmax(ok, axis=1)  # 0 if none ok; clamp handles that case
    xe = cand[np.arange(count), first]
    xe = np.clip(xe, lo, hi)
    return x, xe


def train_objective(model, dataset, batch, iteration, cfg, smooth_override=None):
    """Evaluate the full training objective for one ray batch.

    Args:
        model: ModelState.
        dataset: training data handle (colors/depths/valid_pixels).
        batch: sampler.RayBatch.
        iteration: int, keys the iteration-local random substreams.
        cfg: TrainConfig-like object (coarse_samples, importance_rounds,
            importance_add, seed, fixed_far, weights, near/max_depth
            already baked into the batch bounds).
        smooth_override: optional precomputed (x, x_eps) arrays; used by
            gradient tests to freeze the stochastic point set.

    Returns:
        (total Tensor scalar, parts dict of plain floats, extras dict).
    """
    lw = cfg.weights
    dt = model.dtype
    m = len(batch)
    margin = 0.5 * model.grid.finest_voxel
    lo_c, hi_c = model.grid.lo + margin, model.grid.hi - margin

    # rays (graph) and sampling bounds (plain arrays)
    uniq, inv = np.unique(batch.frame_ids, return_inverse=True)
    R9, T3 = realized_pose_arrays(model, uniq)
    r_sel = dc.reshape(dc.index_select(R9, inv), (m, 3, 3))
    o = dc.index_select(T3, inv)
    r = dc.reshape(
        dc.matmul(r_sel, dc.constant(batch.dir_cam[:, :, None].astype(dt))), (m, 3)
    )
    o_data, r_data = o.data.astype(np.float64), r.data.astype(np.float64)
    if cfg.fixed_far is not None:
        far = np.full(m, float(cfg.fixed_far))
    else:
        exit_t = _box_exit(o_data, r_data, lo_c, hi_c)
        far = np.minimum(exit_t, batch.far)
    near = batch.near
    far = np.maximum(far, near + 0.05)

    # stratified + importance sampling (inference only, pre-drawn draws)
    u0 = seeds.substream(cfg.seed, seeds.STRATIFY, iteration).random((m, cfg.coarse_samples))
    depths = sampler.stratified_coarse(near, far, cfg.coarse_samples, u0)

    def phi_at(dep_rows, rows):
        pts = o_data[rows] + dep_rows[:, None] * r_data[rows]
        pts = np.clip(pts, lo_c, hi_c).astype(dt)
        return _phi_data(model, pts).reshape(-1).astype(np.float64)

    phi_cache = None
    for rnd in range(cfg.importance_rounds):
        if phi_cache is None:
            rows = np.repeat(np.arange(m), depths.shape[1])
            phi_cache = phi_at(depths.reshape(-1), rows).reshape(m, -1)
        w = render_weights_data(phi_cache, model.s_value())
        ui = seeds.substream(cfg.seed, seeds.IMPORTANCE, iteration, rnd).random(
            (m, cfg.importance_add)
        )
        depths, src = sampler.importance_refine_with_sources(depths, w, near, far, ui)
        nxt = np.take_along_axis(phi_cache, np.maximum(src, 0), axis=1)
        need_r, need_c = np.nonzero(src < 0)
        if need_r.size:
            nxt[need_r, need_c] = phi_at(depths[need_r, need_c], need_r)
        phi_cache = nxt
    n_samples = depths.shape[1]
    expected = cfg.coarse_samples + cfg.importance_rounds * cfg.importance_add
    if n_samples != expected:
        raise AssertionError(f"sample count {n_samples} != expected {expected}")

    # taped rendering pass
    d_const = dc.constant(depths[:, :, None].astype(dt))
    x = dc.reshape(o, (m, 1, 3)) + dc.mul(d_const, dc.reshape(r, (m, 1, 3)))
    xf = dc.track(dc.clip(
        dc.reshape(x, (m * n_samples, 3)),
        dc.constant(lo_c.astype(dt)),
        dc.constant(hi_c.astype(dt)),
    ))
    geom_feat = fg.sample_multi(model.grid, xf)
    phi_flat = decoders.decode_sdf(model.geom_net, geom_feat)  # (N, 1)
    grad_phi = dc.grad(dc.sum_(phi_flat), xf, create_graph=True)  # (N, 3)

    color_feat = fg.sample(model.grid.color, xf)
    vdir = dc.reshape(
        dc.broadcast_to(dc.reshape(r, (m, 1, 3)), (m, n_samples, 3)),
        (m * n_samples, 3),
    )
    c_flat = decoders.decode_color(model.color_net, color_feat, vdir)

    phis = dc.reshape(phi_flat, (m, n_samples))
    colors = dc.reshape(c_flat, (m, n_samples, 3))
    al = alphas(phis, model.s_tensor())
    chat, dhat, w = composite(al, colors, dc.constant(depths.astype(dt)))

    # photometric + depth
    err = dc.sub(chat, dc.constant(batch.color.astype(dt)))
    l_rgb = dc.div(dc.sum_(dc.sqrt(dc.sum_(dc.mul(err, err), axis=1) + 1e-24)), float(m))
    vmask = batch.valid.astype(dt)
    n_valid = int(batch.valid.sum())
    d_err = dc.absolute(dc.sub(dhat, dc.constant(batch.depth_ray.astype(dt))))
    l_d = dc.div(dc.sum_(dc.mul(d_err, dc.constant(vmask))), float(max(n_valid, 1)))

    # truncation / free-space partition (bounds are observation constants).
    # Free space is the stretch between camera and surface (b > t); samples
    # past the surface (b < -t) are occluded, their bound says nothing about
    # phi there, so they get only the eikonal term below.
    b = batch.depth_ray[:, None] - depths  # (M, S)
    tr_mask = (batch.valid[:, None] & (np.abs(b) <= lw.truncation)).astype(dt)
    fs_mask = (batch.valid[:, None] & (b > lw.truncation)).astype(dt)
    behind_mask = (batch.valid[:, None] & (b < -lw.truncation)).astype(dt)
    b_c = dc.constant(b.astype(dt))

    tr_cnt = tr_mask.sum(axis=1)
    sdf_val = dc.mul(dc.absolute(dc.sub(phis, b_c)), dc.constant(tr_mask))
    per_ray_sdf = dc.div(
        dc.sum_(sdf_val, axis=1), dc.constant(np.maximum(tr_cnt, 1.0).astype(dt))
    )
    l_sdf = dc.div(dc.sum_(per_ray_sdf), float(m))

    fs_cnt = fs_mask.sum(axis=1)
    fs_raw = dc.maximum(
        dc.maximum(0.0, dc.exp(dc.mul(phis, -lw.freespace_alpha)) - 1.0),
        dc.sub(phis, b_c),
    )
    fs_val = dc.mul(fs_raw, dc.constant(fs_mask))
    per_ray_fs = dc.div(
        dc.sum_(fs_val, axis=1), dc.constant(np.maximum(fs_cnt, 1.0).astype(dt))
    )
    l_fs = dc.div(dc.sum_(per_ray_fs), float(m))

    # eikonal on every sample without a usable bound: free space, occluded
    # space, and all samples of rays lacking depth
    eik_mask = (fs_mask + behind_mask + (~batch.valid[:, None]).astype(dt)).clip(0, 1)
    eik_flat = eik_mask.reshape(-1)
    n_eik = float(max(eik_flat.sum(), 1.0))
    eik_val = loss_eikonal(grad_phi)  # (N,)
    l_eik = dc.div(dc.sum_(dc.mul(eik_val, dc.constant(eik_flat.astype(dt)))), n_eik)

    # smoothness on the global near-surface set
    if smooth_override is not None:
        smooth_pts = smooth_override
    else:
        rng = seeds.substream(cfg.seed, seeds.SMOOTH, iteration)
        smooth_pts = draw_smooth_points(
            model, dataset, lw.smooth_count, lw.truncation, lw.smooth_delta, rng
        )
    if smooth_pts is None or lw.smooth == 0.0:
        l_smooth = dc.constant(np.asarray(0.0, dtype=dt))
        n_smooth = 0
    else:
        xs, xe = smooth_pts
        n_smooth = xs.shape[0]
        both = dc.track(dc.constant(np.concatenate([xs, xe], axis=0).astype(dt)))
        phi_s = decoders.decode_sdf(model.geom_net, fg.sample_multi(model.grid, both))
        g_s = dc.grad(dc.sum_(phi_s), both, create_graph=True)
        diff = dc.sub(g_s[:n_smooth, :], g_s[n_smooth:, :])
        l_smooth = dc.div(dc.sum_(dc.mul(diff, diff)), float(n_smooth))

    total = (
        dc.mul(l_rgb, lw.rgb)
        + dc.mul(l_d, lw.depth)
        + dc.mul(l_sdf, lw.sdf)
        + dc.mul(l_fs, lw.fs)
        + dc.mul(l_eik, lw.eik)
        + dc.mul(l_smooth, lw.smooth)
    )
    dc.check_finite(total.data, "total loss")

    parts = {
        "total": float(total.data),
        "rgb": float(l_rgb.data),
        "depth": float(l_d.data),
        "sdf": float(l_sdf.data),
        "fs": float(l_fs.data),
        "eik": float(l_eik.data),
        "smooth": float(l_smooth.data),
        "s": model.s_value(),
    }
    extras = {
        "samples_per_ray": n_samples,
        "n_valid_rays": n_valid,
        "n_tr": int(tr_cnt.sum()),
        "n_fs": int(fs_cnt.sum()),
        "n_eik": int(eik_flat.sum()),
        "n_smooth": n_smooth,
        "empty_tr": bool(tr_cnt.sum() == 0),
        "empty_fs": bool(fs_cnt.sum() == 0),
        "depths": depths,
        "weights": w,
    }
    return total, parts, extras

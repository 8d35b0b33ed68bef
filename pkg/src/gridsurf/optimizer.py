"""Adam optimization of the reconstruction objective.

Parameters fall into three learning-rate groups: feature grids (1e-2),
decoders plus sharpness (1e-3), and camera poses (5e-4).  The loop is
deterministic by construction: every random draw is keyed by
(seed, stream, iteration), so reruns and resumed runs reproduce the same
checkpoints bit for bit in double precision.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from numba import njit

from . import camera
from . import checkpoint as ckpt
from . import decoders
from . import diffcore as dc
from . import feature_grid as fg
from . import renderer
from . import sampler
from . import seeds

__all__ = ["Adam", "TrainConfig", "DivergenceError", "train", "build_model",
           "save_model", "load_model"]

log = logging.getLogger("gridsurf")


class DivergenceError(RuntimeError):
    pass


@njit(cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, t):
    """Fused in-place Adam update on flat arrays; returns the number of
    non-finite gradient entries that were treated as zero."""
    bad = 0
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i in range(p.size):
        gi = g[i]
        if not np.isfinite(gi):
            gi = 0.0
            bad += 1
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
    return bad


class Adam:
    """Standard bias-corrected Adam with a per-parameter learning rate.

    Non-finite gradient entries are zeroed (skipping that scalar's
    update), counted, and reported via a warning rather than poisoning
    the parameters.
    """

    def __init__(self, params, lrs, beta1=0.9, beta2=0.999, eps=1e-8):
        if len(params) != len(lrs):
            raise ValueError("one learning rate per parameter")
        self.params = list(params)
        self.lrs = [float(l) for l in lrs]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)
        self.skipped = 0

    def step(self, grads):
        for i, (p, g) in enumerate(zip(self.params, grads)):
            garr = g.data if isinstance(g, dc.Tensor) else np.asarray(g)
            if garr.dtype != p.data.dtype:
                garr = garr.astype(p.data.dtype)
            self.t[i] += 1
            bad = _adam_kernel(
                p.data.reshape(-1), np.ascontiguousarray(garr).reshape(-1),
                self.m[i].reshape(-1), self.v[i].reshape(-1),
                self.lrs[i], self.beta1, self.beta2, self.eps,
                float(self.t[i]),
            )
            if bad:
                self.skipped += bad
                log.warning("zeroed %d non-finite gradient entries", bad)


@dataclass
class TrainConfig:
    """All knobs of a reconstruction run (mirrors the flat config file)."""

    iterations: int = 10000
    batch_rays: int = 6144
    coarse_samples: int = sampler.N_COARSE
    importance_rounds: int = sampler.N_IMPORTANCE_ROUNDS
    importance_add: int = sampler.N_IMPORTANCE_ADD
    seed: int = 0
    precision: str = "double"
    refine_poses: bool = False
    freeze_first_pose: bool = True
    lr_grids: float = 1e-2
    lr_decoders: float = 1e-3
    lr_poses: float = 5e-4
    pose_refresh_every: int = 100
    checkpoint_every: int = 1000
    near: float = 0.01
    max_depth: float = 8.0
    bounds: tuple | None = None  # ((x0,y0,z0),(x1,y1,z1)) or None to derive
    bounds_padding: float = 0.5
    voxel_sizes: tuple = fg.DEFAULT_GEOM_VOXELS
    color_voxel: float | None = None
    geom_feat_dim: int = fg.GEOM_FEATURE_WIDTH
    color_feat_dim: int = fg.COLOR_FEATURE_WIDTH
    init_steps: int = 2000
    init_tol: float = 0.01
    sphere_radius_scale: float = 0.5  # radius = scale * min box extent
    divergence_threshold: float = 1e6
    fixed_far: float | None = None
    weights: renderer.LossWeights = field(default_factory=renderer.LossWeights)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.precision not in ("double", "single"):
            raise ValueError("precision must be 'double' or 'single'")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def echo(self):
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        for k, v in list(d.items()):
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def derive_bounds(dataset, cfg):
    """World box from the data: observed surface points plus camera
    centers, padded.  Falls back to frusta when no depth is valid."""
    if cfg.bounds is not None:
        lo = np.asarray(cfg.bounds[0], dtype=np.float64)
        hi = np.asarray(cfg.bounds[1], dtype=np.float64)
        return lo, hi
    intr = dataset.intrinsics
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    any_depth = False
    step = 4  # pixel subsampling; bounds only need the envelope
    for f in range(len(dataset)):
        d = dataset.depths[f][::step, ::step]
        v, u = np.nonzero(d > 0)
        if not v.size:
            continue
        any_depth = True
        pix = np.stack([u * step, v * step], axis=1).astype(np.float64)
        dirs_c = camera.pixel_rays(intr, pix)
        scale = camera.ray_to_z_scale(intr, pix)
        R, t = dataset.poses[f, :3, :3], dataset.poses[f, :3, 3]
        pts = t + (dirs_c * (d[v, u] * scale)[:, None]) @ R.T
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
    if not any_depth:
        far = np.full(len(dataset), cfg.max_depth)
        return fg.world_box_from_frusta(dataset.poses, intr, far,
                                        padding=cfg.bounds_padding)
    centers = dataset.poses[:, :3, 3]
    lo = np.minimum(lo, centers.min(axis=0)) - cfg.bounds_padding
    hi = np.maximum(hi, centers.max(axis=0)) + cfg.bounds_padding
    return lo, hi


def build_model(dataset, cfg, initial_poses=None, skip_init=False):
    """Construct grids, decoders, sharpness, and poses for a dataset.

    Runs the sphere pre-fit unless skip_init; returns a ModelState.
    """
    dt = cfg.dtype
    lo, hi = derive_bounds(dataset, cfg)
    grid = fg.MultiGrid.create(
        lo, hi, seeds.substream(cfg.seed, seeds.GRID_INIT),
        voxel_sizes=cfg.voxel_sizes, geom_width=cfg.geom_feat_dim,
        color_voxel=cfg.color_voxel, color_width=cfg.color_feat_dim, dtype=dt,
    )
    geom_net = decoders.DecoderNet.create(
        grid.geom_width, 1, seeds.substream(cfg.seed, seeds.NET_INIT, 0), dtype=dt
    )
    color_net = decoders.DecoderNet.create(
        cfg.color_feat_dim + 3, 3, seeds.substream(cfg.seed, seeds.NET_INIT, 1), dtype=dt
    )
    log_s = dc.leaf(np.asarray(np.log(1.0 / cfg.weights.truncation), dtype=dt))
    pose_mats = dataset.poses if initial_poses is None else np.asarray(initial_poses)
    poses = []
    for i in range(pose_mats.shape[0]):
        trainable = cfg.refine_poses and not (cfg.freeze_first_pose and i == 0)
        poses.append(camera.PoseParam.from_matrix(pose_mats[i], trainable=trainable, dtype=dt))
    model = renderer.ModelState(grid, geom_net, color_net, log_s, poses)
    if not skip_init:
        center = 0.5 * (lo + hi)
        radius = cfg.sphere_radius_scale * float(np.min(hi - lo))
        rmse = decoders.geometric_init(
            grid, geom_net, center, radius, seed=cfg.seed,
            max_steps=cfg.init_steps, tol=cfg.init_tol,
        )
        log.info("sphere pre-fit RMSE %.4f m", rmse)
    return model


def _param_names(model):
    names = [f"level{i}" for i in range(len(model.grid.levels))] + ["colorgrid"]
    for tag, net in (("geom", model.geom_net), ("color", model.color_net)):
        for i in range(len(net.layers)):
            names += [f"{tag}_w{i}", f"{tag}_b{i}"]
    names.append("log_s")
    for i, p in enumerate(model.poses):
        if p.trainable:
            names += [f"nu{i}", f"t{i}"]
    return names


def make_optimizer(model, cfg):
    params = model.parameters()
    lrs = (
        [cfg.lr_grids] * len(model.grid_params())
        + [cfg.lr_decoders] * len(model.decoder_params())
        + [cfg.lr_poses] * len(model.pose_params())
    )
    return Adam(params, lrs)


# ---------------------------------------------------------------------------
# checkpoint assembly


def save_model(path, model, cfg, iteration, opt=None):
    arrays = {}
    names = _param_names(model)
    for name, p in zip(names, model.parameters()):
        arrays[name] = p.data
    order = list(names)
    arrays["R0"] = np.stack([p.R0 for p in model.poses], axis=0)
    arrays["pose_nu"] = np.stack([np.asarray(p.nu.data, dtype=np.float64) for p in model.poses], axis=0)
    arrays["pose_t"] = np.stack([np.asarray(p.t.data, dtype=np.float64) for p in model.poses], axis=0)
    order += ["R0", "pose_nu", "pose_t"]
    if opt is not None:
        for name, m, v, t in zip(names, opt.m, opt.v, opt.t):
            arrays[f"adam_m_{name}"] = m
            arrays[f"adam_v_{name}"] = v
            arrays[f"adam_t_{name}"] = np.array([t], dtype=np.int64)
            order += [f"adam_m_{name}", f"adam_v_{name}", f"adam_t_{name}"]
    header = {
        "kind": "gridsurf-model",
        "iteration": int(iteration),
        "config": cfg.echo(),
        "grid": {
            "lo": list(map(float, model.grid.lo)),
            "hi": list(map(float, model.grid.hi)),
            "levels": [
                {
                    "origin": list(map(float, l.geom.origin)),
                    "voxel_size": l.geom.voxel_size,
                    "dims": list(l.geom.dims),
                    "width": int(l.width),
                }
                for l in model.grid.levels + [model.grid.color]
            ],
        },
        "pose_trainable": [bool(p.trainable) for p in model.poses],
        "has_adam": opt is not None,
        "array_order": order,
    }
    ckpt.write_container(path, header, arrays)


def load_model(path):
    """Rebuild (model, cfg, iteration, opt-or-None) from a checkpoint."""
    header, arrays = ckpt.read_container(path)
    cfg_d = dict(header["config"])
    w = cfg_d.pop("weights")
    cfg = TrainConfig(**{**cfg_d,
                         "bounds": tuple(map(tuple, cfg_d["bounds"])) if cfg_d.get("bounds") else None,
                         "voxel_sizes": tuple(cfg_d["voxel_sizes"]),
                         "weights": renderer.LossWeights(**w)})
    gmeta = header["grid"]
    level_meta = gmeta["levels"]
    levels = []
    for i, meta in enumerate(level_meta[:-1]):
        geom = dc.GridGeom(meta["origin"], meta["voxel_size"], meta["dims"])
        levels.append(fg.GridLevel(geom, dc.leaf(arrays[f"level{i}"])))
    cmeta = level_meta[-1]
    color = fg.GridLevel(dc.GridGeom(cmeta["origin"], cmeta["voxel_size"], cmeta["dims"]),
                         dc.leaf(arrays["colorgrid"]))
    grid = fg.MultiGrid(levels, color, gmeta["lo"], gmeta["hi"])

    def load_net(tag, n_layers=3):
        layers = []
        for i in range(n_layers):
            layers.append((dc.leaf(arrays[f"{tag}_w{i}"]), dc.leaf(arrays[f"{tag}_b{i}"])))
        return decoders.DecoderNet(layers)

    geom_net, color_net = load_net("geom"), load_net("color")
    log_s = dc.leaf(arrays["log_s"])
    dt = cfg.dtype
    poses = []
    for i, trainable in enumerate(header["pose_trainable"]):
        p = camera.PoseParam(arrays["R0"][i], arrays["pose_t"][i], trainable=trainable, dtype=dt)
        p.nu.data[...] = arrays["pose_nu"][i].astype(dt)
        poses.append(p)
    model = renderer.ModelState(grid, geom_net, color_net, log_s, poses)
    opt = None
    if header.get("has_adam"):
        opt = Adam(model.parameters(), [0.0] * len(model.parameters()))
        names = _param_names(model)
        opt.m = [arrays[f"adam_m_{n}"] for n in names]
        opt.v = [arrays[f"adam_v_{n}"] for n in names]
        opt.t = [int(arrays[f"adam_t_{n}"][0]) for n in names]
    return model, cfg, int(header["iteration"]), opt


# ---------------------------------------------------------------------------
# training loop

CSV_HEADER = "iter,total,rgb,depth,sdf,fs,eik,smooth,s\n"


def train(dataset, cfg, out_dir, initial_poses=None, resume=None):
    """Optimize a model on a dataset; returns (model, final checkpoint path).

    Writes loss_log.csv and periodic + final checkpoints into out_dir.
    """
    os.makedirs(out_dir, exist_ok=True)
    dc.set_finite_checks(cfg.precision == "double")
    if resume is not None:
        model, cfg_loaded, start_it, opt = load_model(resume)
        cfg = cfg_loaded if cfg is None else cfg
        if opt is None:
            opt = make_optimizer(model, cfg)
            for i, lr in enumerate(_lr_list(model, cfg)):
                opt.lrs[i] = lr
        else:
            opt.lrs = _lr_list(model, cfg)
        csv_mode = "a"
    else:
        model = build_model(dataset, cfg, initial_poses=initial_poses)
        opt = make_optimizer(model, cfg)
        start_it = 0
        csv_mode = "w"

    csv_path = os.path.join(out_dir, "loss_log.csv")
    final_path = os.path.join(out_dir, "ckpt_final.gsck")
    with open(csv_path, csv_mode) as csv:
        if csv_mode == "w":
            csv.write(CSV_HEADER)
        for it in range(start_it, cfg.iterations):
            batch = sampler.draw_ray_batch(
                dataset, seeds.substream(cfg.seed, seeds.RAYS, it), cfg.batch_rays,
                near=cfg.near, far=cfg.max_depth,
            )
            total, parts, extras = renderer.train_objective(model, dataset, batch, it, cfg)
            if not np.isfinite(parts["total"]) or parts["total"] > cfg.divergence_threshold:
                raise DivergenceError(
                    f"loss diverged at iteration {it}: {parts}"
                )
            grads = dc.grad(total, opt.params)
            opt.step(grads)
            if cfg.refine_poses and (it + 1) % cfg.pose_refresh_every == 0:
                for p in model.poses:
                    p.refresh()
            csv.write(
                f"{it},{parts['total']:.10g},{parts['rgb']:.10g},{parts['depth']:.10g},"
                f"{parts['sdf']:.10g},{parts['fs']:.10g},{parts['eik']:.10g},"
                f"{parts['smooth']:.10g},{parts['s']:.10g}\n"
            )
            if (it + 1) % max(cfg.checkpoint_every, 1) == 0:
                save_model(
                    os.path.join(out_dir, f"ckpt_{it + 1:06d}.gsck"), model, cfg, it + 1, opt
                )
            if it % 50 == 0:
                log.info("iter %d total %.5f parts %s", it, parts["total"],
                         {k: round(v, 5) for k, v in parts.items() if k != "total"})
        csv.flush()
    save_model(final_path, model, cfg, cfg.iterations, opt)
    return model, final_path


def _lr_list(model, cfg):
    return (
        [cfg.lr_grids] * len(model.grid_params())
        + [cfg.lr_decoders] * len(model.decoder_params())
        + [cfg.lr_poses] * len(model.pose_params())
    )

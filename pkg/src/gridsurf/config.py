"""Flat key=value run configuration.

Files hold one `key = value` pair per line, `#` starts a comment.
Values are coerced by the type of the default; unknown keys are
rejected so typos fail loudly instead of silently training with
defaults.
"""

from __future__ import annotations

from .renderer import LossWeights
from .optimizer import TrainConfig

__all__ = ["DEFAULTS", "ConfigError", "parse_value", "load_config",
           "apply_overrides", "to_train_config", "format_config"]


class ConfigError(ValueError):
    pass


# (default, help) per key; None defaults carry an explicit type tag
DEFAULTS = {
    "iterations": (10000, "optimization steps"),
    "batch_rays": (6144, "rays per step"),
    "coarse_samples": (96, "stratified samples per ray"),
    "importance_rounds": (3, "importance resampling rounds"),
    "importance_add": (12, "samples added per round"),
    "seed": (0, "master seed"),
    "precision": ("double", "float64 or float32 state: double|single"),
    "refine_poses": (False, "optimize camera poses jointly"),
    "freeze_first_pose": (True, "pin frame 0 pose as gauge"),
    "lr_grids": (1e-2, "learning rate for voxel features"),
    "lr_decoders": (1e-3, "learning rate for decoder weights"),
    "lr_poses": (5e-4, "learning rate for pose corrections"),
    "pose_refresh_every": (100, "fold rotation correction every N steps"),
    "checkpoint_every": (1000, "checkpoint cadence in steps"),
    "near": (0.01, "near bound along rays [m]"),
    "max_depth": (8.0, "far bound / depth validity cap [m]"),
    "bounds": (None, "world box x0,y0,z0,x1,y1,z1 [m]; empty = from frusta"),
    "bounds_padding": (0.5, "padding added around estimated box [m]"),
    "voxel_sizes": ("0.96,0.24,0.06,0.03", "geometry level voxel sizes [m]"),
    "color_voxel": (0.03, "color grid voxel size [m]"),
    "geom_feat_dim": (4, "features per geometry level"),
    "color_feat_dim": (6, "features in the color grid"),
    "init_steps": (2000, "max sphere pre-fit steps"),
    "init_tol": (0.01, "sphere pre-fit RMSE tolerance [m]"),
    "sphere_radius_scale": (0.5, "pre-fit radius vs half min box extent"),
    "divergence_threshold": (1e6, "abort when loss exceeds this"),
    "lambda_rgb": (10.0, "color term weight"),
    "lambda_depth": (1.0, "rendered depth term weight"),
    "lambda_sdf": (10.0, "near-surface SDF term weight"),
    "lambda_fs": (1.0, "free-space term weight"),
    "lambda_eik": (1.0, "unit-gradient term weight"),
    "lambda_smooth": (1.0, "gradient smoothness term weight"),
    "truncation": (0.16, "SDF supervision band [m]"),
    "freespace_alpha": (5.0, "free-space exponential sharpness"),
    "smooth_delta": (0.004, "smoothness probe offset [m]"),
    "smooth_count": (1024, "smoothness points per step"),
}

_NONE_TYPES = {"bounds": str}


def parse_value(key, raw):
    """Coerce a raw string by the default's type for this key."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key: {key!r}")
    default = DEFAULTS[key][0]
    raw = raw.strip()
    ty = _NONE_TYPES[key] if default is None else type(default)
    if default is None and raw == "":
        return None
    if ty is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if ty is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if ty is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def load_config(path):
    """Parse a key=value file into a dict of coerced values."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, raw = body.partition("=")
            key = key.strip()
            try:
                out[key] = parse_value(key, raw)
            except ConfigError as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from None
    return out


def apply_overrides(cfg, pairs):
    """Apply --set key=value overrides on top of a config dict."""
    out = dict(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r}: expected key=value")
        key, _, raw = pair.partition("=")
        out[key.strip()] = parse_value(key.strip(), raw)
    return out


def _parse_floats(key, raw, n=None):
    parts = [p for p in str(raw).replace(",", " ").split() if p]
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {raw!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


def to_train_config(cfg):
    """Build a TrainConfig (with LossWeights) from a config dict."""
    merged = {k: v[0] for k, v in DEFAULTS.items()}
    for k, v in cfg.items():
        if k not in merged:
            raise ConfigError(f"unknown config key: {k!r}")
        merged[k] = v
    if merged["precision"] not in ("double", "single"):
        raise ConfigError("precision must be 'double' or 'single'")
    weights = LossWeights(
        rgb=merged["lambda_rgb"],
        depth=merged["lambda_depth"],
        sdf=merged["lambda_sdf"],
        fs=merged["lambda_fs"],
        eik=merged["lambda_eik"],
        smooth=merged["lambda_smooth"],
        truncation=merged["truncation"],
        freespace_alpha=merged["freespace_alpha"],
        smooth_delta=merged["smooth_delta"],
        smooth_count=int(merged["smooth_count"]),
    )
    bounds = None
    if merged["bounds"]:
        b = _parse_floats("bounds", merged["bounds"], 6)
        bounds = (b[:3], b[3:])
    voxels = _parse_floats("voxel_sizes", merged["voxel_sizes"])
    if not voxels:
        raise ConfigError("voxel_sizes must name at least one level")
    return TrainConfig(
        iterations=merged["iterations"],
        batch_rays=merged["batch_rays"],
        coarse_samples=merged["coarse_samples"],
        importance_rounds=merged["importance_rounds"],
        importance_add=merged["importance_add"],
        seed=merged["seed"],
        precision=merged["precision"],
        refine_poses=merged["refine_poses"],
        freeze_first_pose=merged["freeze_first_pose"],
        lr_grids=merged["lr_grids"],
        lr_decoders=merged["lr_decoders"],
        lr_poses=merged["lr_poses"],
        pose_refresh_every=merged["pose_refresh_every"],
        checkpoint_every=merged["checkpoint_every"],
        near=merged["near"],
        max_depth=merged["max_depth"],
        bounds=bounds,
        bounds_padding=merged["bounds_padding"],
        voxel_sizes=voxels,
        color_voxel=merged["color_voxel"],
        geom_feat_dim=merged["geom_feat_dim"],
        color_feat_dim=merged["color_feat_dim"],
        init_steps=merged["init_steps"],
        init_tol=merged["init_tol"],
        sphere_radius_scale=merged["sphere_radius_scale"],
        divergence_threshold=merged["divergence_threshold"],
        weights=weights,
    )


def format_config(cfg):
    """Render a config dict back to file syntax, defaults filled in."""
    merged = {k: v[0] for k, v in DEFAULTS.items()}
    merged.update(cfg)
    lines = []
    for key, (default, help_text) in DEFAULTS.items():
        val = merged[key]
        shown = "" if val is None else val
        lines.append(f"{key} = {shown}  # {help_text}")
    return "\n".join(lines) + "\n"

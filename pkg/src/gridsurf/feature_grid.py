"""Multi-resolution dense feature voxel grids with analytic derivatives.

A scene is represented by four geometry grid levels (voxel sizes 96, 24,
6, 3 cm by default, coarse to fine) of 4-channel features plus one
6-channel color grid.  Interpolated geometry features from all levels are
concatenated (width 16) and fed to the SDF decoder.

Trilinear interpolation is polynomial inside each cell, so its spatial
Jacobian, its position Hessian (zero diagonal), and the mixed
position/feature second-derivative block all have closed forms; they are
exposed here both as plain-array functions (for tests and analysis) and
through the differentiable ``sample`` path in :mod:`gridsurf.diffcore`.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import GridGeom, GridBoundsError

__all__ = [
    "GridLevel",
    "MultiGrid",
    "sample",
    "sample_multi",
    "sample_jacobian",
    "sample_hessian_xx",
    "sample_hessian_xtheta",
    "world_box_from_frusta",
]

DEFAULT_GEOM_VOXELS = (0.96, 0.24, 0.06, 0.03)  # coarse to fine
GEOM_FEATURE_WIDTH = 4
COLOR_FEATURE_WIDTH = 6
FEATURE_INIT_SCALE = 1e-4


class GridLevel:
    """One dense grid of optimizable per-vertex feature vectors."""

    def __init__(self, geom, features):
        if features.shape[0] != geom.n_vertices:
            raise ValueError("feature row count must equal vertex count")
        self.geom = geom
        self.features = features if isinstance(features, dc.Tensor) else dc.leaf(features)

    @classmethod
    def create(cls, lo, hi, voxel_size, width, rng, dtype=np.float64):
        """Allocate a level whose vertex lattice covers the box [lo, hi]."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if np.any(hi <= lo):
            raise ValueError("degenerate world box")
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        dims = np.maximum(dims, 2)
        geom = GridGeom(lo, voxel_size, dims)
        feats = rng.uniform(-FEATURE_INIT_SCALE, FEATURE_INIT_SCALE,
                            size=(geom.n_vertices, width)).astype(dtype)
        return cls(geom, dc.leaf(feats))

    @property
    def width(self):
        return self.features.shape[1]


class MultiGrid:
    """Four geometry levels plus one color level over a shared world box.

    Attributes:
        levels: geometry GridLevels ordered coarse to fine.
        color: the color-feature GridLevel.
        lo, hi: the shared world box (grids may extend slightly past it to
            land on whole voxels).
    """

    def __init__(self, levels, color, lo, hi):
        self.levels = list(levels)
        self.color = color
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)

    @classmethod
    def create(cls, lo, hi, rng, voxel_sizes=DEFAULT_GEOM_VOXELS,
               geom_width=GEOM_FEATURE_WIDTH, color_voxel=None,
               color_width=COLOR_FEATURE_WIDTH, dtype=np.float64):
        sizes = sorted(voxel_sizes, reverse=True)  # coarse first
        levels = [GridLevel.create(lo, hi, vs, geom_width, rng, dtype) for vs in sizes]
        cv = sizes[-1] if color_voxel is None else color_voxel
        color = GridLevel.create(lo, hi, cv, color_width, rng, dtype)
        return cls(levels, color, lo, hi)

    @property
    def geom_width(self):
        return sum(l.width for l in self.levels)

    @property
    def finest_voxel(self):
        return min(l.geom.voxel_size for l in self.levels)

    def clamp_points(self, x):
        """Clamp world points to the box shrunk by half the finest voxel.

        Sampling requires points inside every level's lattice; rays can
        graze the box boundary, so callers pass sample positions through
        here first.
        """
        margin = 0.5 * self.finest_voxel
        return np.clip(x, self.lo + margin, self.hi - margin)

    def parameters(self):
        return [l.features for l in self.levels] + [self.color.features]

    def astype(self, dtype):
        for l in self.levels + [self.color]:
            l.features = dc.leaf(l.features.data.astype(dtype))
        return self


def sample(level, x):
    """Interpolate one level's features at world points.

    Args:
        level: GridLevel.
        x: Tensor or array (N, 3) strictly inside the level's box.

    Returns:
        Tensor (N, width).
    """
    if not isinstance(x, dc.Tensor):
        x = dc.constant(np.asarray(x))
    return dc.grid_sample(level.features, x, level.geom)


def sample_multi(grid, x):
    """Concatenate per-level geometry features, coarse to fine: (N, 16)."""
    if not isinstance(x, dc.Tensor):
        x = dc.constant(np.asarray(x))
    return dc.concat([sample(l, x) for l in grid.levels], axis=1)


def _prep(level, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cell, frac = dc._locate(x, level.geom)
    idx8 = dc._flat_corner_index(cell, level.geom)
    theta = level.features.data[idx8]  # (N, 8, C)
    return x, frac, theta


def sample_jacobian(level, x):
    """World-space derivative of the interpolated feature: (N, width, 3)."""
    _, frac, theta = _prep(level, x)
    J = dc._corner_jacobian(frac)  # (N, 8, 3)
    return np.einsum("nkc,nka->nca", theta, J) / level.geom.voxel_size


def sample_hessian_xx(level, x, feature_index):
    """Second spatial derivative of one feature channel: (N, 3, 3).

    Symmetric with an exactly zero diagonal: trilinear interpolation is
    affine along each individual axis inside a cell.
    """
    _, frac, theta = _prep(level, x)
    v = theta[:, :, feature_index]
    h12, h13, h23 = dc._pair_hessian(v, frac)
    n = frac.shape[0]
    H = np.zeros((n, 3, 3), dtype=v.dtype)
    s = level.geom.voxel_size ** 2
    H[:, 0, 1] = H[:, 1, 0] = h12 / s
    H[:, 0, 2] = H[:, 2, 0] = h13 / s
    H[:, 1, 2] = H[:, 2, 1] = h23 / s
    return H


def sample_hessian_xtheta(level, x):
    """Mixed second derivative d(df/dx)/dtheta: (N, 3, 8).

    Equal to the transpose of the coefficient Jacobian (the same for every
    feature channel), scaled to world coordinates.
    """
    _, frac, _ = _prep(level, x)
    J = dc._corner_jacobian(frac)  # (N, 8, 3)
    return np.swapaxes(J, 1, 2) / level.geom.voxel_size


def world_box_from_frusta(poses, intrinsics, far_per_frame, padding=0.5):
    """Axis-aligned box containing every camera frustum, padded.

    Args:
        poses: (F, 4, 4) camera-to-world matrices.
        intrinsics: Intrinsics (fx, fy, cx, cy, width, height).
        far_per_frame: scalar or (F,) far plane distance per frame,
            typically each frame's maximum valid depth.
        padding: extra margin in meters on all sides.

    Returns:
        (lo, hi) arrays of shape (3,).
    """
    poses = np.asarray(poses, dtype=np.float64)
    far = np.broadcast_to(np.asarray(far_per_frame, dtype=np.float64), (poses.shape[0],))
    corners_px = np.array(
        [[0.0, 0.0], [intrinsics.width, 0.0], [0.0, intrinsics.height],
         [intrinsics.width, intrinsics.height]]
    )
    dirs = np.stack(
        [
            (corners_px[:, 0] - intrinsics.cx) / intrinsics.fx,
            (corners_px[:, 1] - intrinsics.cy) / intrinsics.fy,
            np.ones(4),
        ],
        axis=1,
    )  # (4, 3) camera-space corner rays at unit depth
    pts = [poses[:, :3, 3]]  # camera centers
    for f in range(poses.shape[0]):
        world_dirs = dirs @ poses[f, :3, :3].T
        pts.append(poses[f, :3, 3] + far[f] * world_dirs)
    allpts = np.concatenate(pts, axis=0)
    return allpts.min(axis=0) - padding, allpts.max(axis=0) + padding

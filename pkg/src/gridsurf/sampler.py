"""Ray batch selection and importance sampling along rays.

Rays are drawn uniformly over all (frame, pixel) pairs, including pixels
with missing depth (those still supervise color and free space).  Each
ray gets stratified coarse depths refined by rounds of inverse-CDF
importance sampling against the current rendering weights.

All randomness comes in as pre-drawn uniform arrays, so the caller
controls determinism and the functions here stay pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camera

__all__ = [
    "RayBatch",
    "draw_ray_batch",
    "stratified_coarse",
    "importance_refine",
    "importance_refine_with_sources",
    "enforce_separation",
]

N_COARSE = 96
N_IMPORTANCE_ROUNDS = 3
N_IMPORTANCE_ADD = 12
MIN_SEPARATION = 1e-9


@dataclass
class RayBatch:
    """One optimization batch of rays.

    depth_ray is the observed z-depth converted to distance along the
    unit ray (0 where the sensor reading is missing); color is float RGB
    in [0, 1].  near/far start at configured bounds; the renderer shrinks
    far to the grid box exit before sampling.
    """

    frame_ids: np.ndarray  # (M,) int64
    pixels: np.ndarray  # (M, 2) float64, integer-valued (u, v)
    color: np.ndarray  # (M, 3)
    depth_ray: np.ndarray  # (M,)
    valid: np.ndarray  # (M,) bool
    dir_cam: np.ndarray  # (M, 3) unit camera-space directions
    near: np.ndarray  # (M,)
    far: np.ndarray  # (M,)

    def __len__(self):
        return self.frame_ids.shape[0]


def draw_ray_batch(dataset, rng, m, near=0.01, far=8.0):
    """Sample M rays uniformly over every (frame, pixel) pair.

    Args:
        dataset: handle exposing colors (F,H,W,3), depths (F,H,W) z-meters
            with 0 = invalid, and intrinsics.
        rng: numpy Generator for this draw.
        m: batch size.
    """
    intr = dataset.intrinsics
    f = dataset.colors.shape[0]
    h, w = intr.height, intr.width
    flat = rng.integers(0, f * h * w, size=m)
    frame = flat // (h * w)
    rem = flat % (h * w)
    v, u = rem // w, rem % w
    pixels = np.stack([u, v], axis=1).astype(np.float64)
    color = dataset.colors[frame, v, u].astype(np.float64)
    depth_z = dataset.depths[frame, v, u].astype(np.float64)
    valid = depth_z > 0
    scale = camera.ray_to_z_scale(intr, pixels)
    return RayBatch(
        frame_ids=frame.astype(np.int64),
        pixels=pixels,
        color=color,
        depth_ray=depth_z * scale,
        valid=valid,
        dir_cam=camera.pixel_rays(intr, pixels),
        near=np.full(m, near),
        far=np.full(m, far),
    )


def stratified_coarse(near, far, n, uniforms):
    """One uniform draw per equal stratum of [near, far], per ray.

    Args:
        near, far: (M,) bounds with near < far.
        n: stratum count.
        uniforms: (M, n) draws in [0, 1).

    Returns:
        (M, n) strictly increasing depths.
    """
    near = np.asarray(near)
    far = np.asarray(far)
    if np.any(far <= near):
        raise ValueError("degenerate ray bounds")
    steps = (np.arange(n) + uniforms) / n
    return near[:, None] + (far - near)[:, None] * steps


def importance_refine(depths, weights, near, far, uniforms):
    """Add samples by inverting the piecewise-constant weight CDF.

    Segment i spans [d_i, d_{i+1}) and carries mass w_i.  Rays whose
    weights sum to zero fall back to uniform draws over [near, far].

    Args:
        depths: (M, K) sorted current sample depths.
        weights: (M, K) non-negative rendering weights.
        near, far: (M,) bounds for the uniform fallback.
        uniforms: (M, A) draws in [0, 1).

    Returns:
        (M, K + A) sorted merged depths with enforced minimum separation.
    """
    return importance_refine_with_sources(depths, weights, near, far, uniforms)[0]


def importance_refine_with_sources(depths, weights, near, far, uniforms):
    """importance_refine plus provenance of each output sample.

    The second return value maps every merged column to the column of
    the input depth it equals, or -1 for freshly drawn (or relocated)
    samples, letting callers reuse values cached at the old depths.
    """
    depths = np.asarray(depths)
    w = np.asarray(weights)[:, :-1].copy()  # mass per segment
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    m, a = uniforms.shape
    k = depths.shape[1]
    total = w.sum(axis=1, keepdims=True)
    dead = total[:, 0] <= 0.0
    w[dead] = 1.0  # uniform over segments as a stand-in; replaced below
    cdf = np.cumsum(w, axis=1)
    cdf /= cdf[:, -1:]
    # segment index: first j with cdf[j] > u
    idx = np.sum(cdf[:, None, :] <= uniforms[:, :, None], axis=2)
    idx = np.minimum(idx, w.shape[1] - 1)
    # gather cdf values bracketing each draw
    cdf_pad = np.concatenate([np.zeros((m, 1)), cdf], axis=1)
    lo = np.take_along_axis(cdf_pad, idx, axis=1)
    hi = np.take_along_axis(cdf_pad, idx + 1, axis=1)
    frac = np.where(hi > lo, (uniforms - lo) / np.maximum(hi - lo, 1e-300), 0.5)
    d_lo = np.take_along_axis(depths, idx, axis=1)
    d_hi = np.take_along_axis(depths, idx + 1, axis=1)
    new = d_lo + frac * (d_hi - d_lo)
    if np.any(dead):
        new[dead] = near[dead, None] + uniforms[dead] * (far - near)[dead, None]
    cat = np.concatenate([depths, new], axis=1)
    src = np.concatenate(
        [np.tile(np.arange(k), (m, 1)), np.full((m, a), -1, dtype=np.int64)], axis=1
    )
    order = np.argsort(cat, axis=1, kind="stable")
    merged = np.take_along_axis(cat, order, axis=1)
    src = np.take_along_axis(src, order, axis=1)
    out = enforce_separation(merged)
    # anything separation moved no longer matches its cached source
    src = np.where(out == merged, src, -1)
    return out, src


def enforce_separation(depths, min_sep=MIN_SEPARATION):
    """Resolve near-duplicate depths while preserving the sample count.

    Duplicates within min_sep are collapsed, then the freed slots are
    re-used by splitting the largest remaining gaps, keeping the output
    sorted, strictly increasing, and the same shape as the input.
    """
    d = np.asarray(depths)
    gaps = np.diff(d, axis=1)
    bad_rows = np.where((gaps < min_sep).any(axis=1))[0]
    if bad_rows.size == 0:
        return d
    d = d.copy()
    k = d.shape[1]
    for r in bad_rows:
        row = list(d[r])
        kept = [row[0]]
        for x in row[1:]:
            if x - kept[-1] >= min_sep:
                kept.append(x)
        while len(kept) < k:
            diffs = np.diff(kept)
            j = int(np.argmax(diffs))
            kept.insert(j + 1, kept[j] + diffs[j] / 2.0)
        d[r] = kept
    return d

"""Synthetic RGB-D oracle scenes and dataset I/O.

Scenes are CSG trees of analytic SDF primitives with exact gradients,
rendered to posed RGB-D frames by sphere tracing.  Because the SDF and
its gradient are exact, these scenes double as ground truth for every
geometric quantity the reconstruction is supposed to recover: depth
images, the SDF bound used by the truncation losses, unit gradient
norms, and meshes for metric evaluation.

Dataset layout on disk:
    root/color/%06d.png   8-bit RGB
    root/depth/%06d.png   16-bit grayscale, millimeters, 0 = missing
    root/poses.txt        one 4x4 row-major camera-to-world matrix per line
    root/intrinsics.txt   fx fy cx cy width height
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import camera
from . import seeds

__all__ = [
    "Sphere", "Box", "Complement", "Union",
    "AnalyticScene", "Frame", "Dataset",
    "sphere_trace", "render_dataset", "load_dataset",
    "sphere_in_box", "thin_slab", "orbit_trajectory", "look_at",
]


# ---------------------------------------------------------------------------
# analytic SDF primitives (1-Lipschitz; exact gradients off the medial axis)


class Sphere:
    def __init__(self, center, radius, albedo=(0.8, 0.3, 0.2)):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.albedo = np.asarray(albedo, dtype=np.float64)

    def sdf(self, x):
        return np.linalg.norm(x - self.center, axis=-1) - self.radius

    def grad(self, x):
        d = x - self.center
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.maximum(n, 1e-300)

    def albedo_at(self, x):
        return np.broadcast_to(self.albedo, x.shape)


class Box:
    """Axis-aligned box; checkered albedo makes walls photometrically busy."""

    def __init__(self, center, half, albedo=(0.7, 0.7, 0.7), checker=0.0,
                 albedo2=(0.35, 0.4, 0.5)):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half, dtype=np.float64)
        self.albedo = np.asarray(albedo, dtype=np.float64)
        self.albedo2 = np.asarray(albedo2, dtype=np.float64)
        self.checker = float(checker)  # checker square size in m; 0 = solid

    def sdf(self, x):
        q = np.abs(x - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def grad(self, x):
        q = np.abs(x - self.center) - self.half
        s = np.sign(x - self.center)
        s[s == 0] = 1.0
        pos = np.maximum(q, 0.0)
        norm = np.linalg.norm(pos, axis=-1, keepdims=True)
        g_out = s * pos / np.maximum(norm, 1e-300)
        # inside: gradient points along the axis closest to a face
        axis = np.argmax(q, axis=-1)
        g_in = np.zeros_like(x)
        np.put_along_axis(g_in, axis[..., None], 1.0, axis=-1)
        g_in = g_in * s
        inside = (q < 0).all(axis=-1)
        return np.where(inside[..., None], g_in, g_out)

    def albedo_at(self, x):
        base = np.broadcast_to(self.albedo, x.shape).copy()
        if self.checker > 0:
            k = np.floor(x / self.checker).sum(axis=-1).astype(np.int64)
            odd = (k % 2).astype(bool)
            base[odd] = self.albedo2
        return base


class Complement:
    """Flips inside and outside (e.g. the interior of a room)."""

    def __init__(self, child):
        self.child = child

    def sdf(self, x):
        return -self.child.sdf(x)

    def grad(self, x):
        return -self.child.grad(x)

    def albedo_at(self, x):
        return self.child.albedo_at(x)


class Union:
    def __init__(self, *children):
        self.children = children

    def _stack(self, x):
        return np.stack([c.sdf(x) for c in self.children], axis=0)

    def sdf(self, x):
        return self._stack(x).min(axis=0)

    def grad(self, x):
        vals = self._stack(x)
        which = vals.argmin(axis=0)
        grads = np.stack([c.grad(x) for c in self.children], axis=0)
        return np.take_along_axis(grads, which[None, ..., None], axis=0)[0]

    def albedo_at(self, x):
        vals = self._stack(x)
        which = vals.argmin(axis=0)
        albs = np.stack([c.albedo_at(x) for c in self.children], axis=0)
        return np.take_along_axis(albs, which[None, ..., None], axis=0)[0]


@dataclass
class AnalyticScene:
    root: object
    light_dir: np.ndarray  # unit, pointing from light toward the scene
    background: np.ndarray  # RGB for rays that miss

    def sdf(self, x):
        return self.root.sdf(np.asarray(x, dtype=np.float64))

    def grad(self, x):
        return self.root.grad(np.asarray(x, dtype=np.float64))

    def shade(self, x):
        n = self.grad(x)
        alb = self.root.albedo_at(x)
        lam = np.maximum(-(n @ self.light_dir), 0.0)
        return np.clip(alb * (0.35 + 0.65 * lam[..., None]), 0.0, 1.0)


def sphere_in_box(room_half=1.0, sphere_radius=0.5, checker=0.25,
                  sphere_center=None):
    """A room interior (2x2x2 m by default) with a sphere resting on the floor."""
    room = Complement(Box((0.0, 0.0, 0.0), (room_half,) * 3,
                          albedo=(0.75, 0.72, 0.65), checker=checker))
    if sphere_center is None:
        sphere_center = (0.0, 0.0, sphere_radius - room_half)
    ball = Sphere(sphere_center, sphere_radius, albedo=(0.8, 0.25, 0.2))
    light = np.array([0.3, 0.5, -0.8])
    return AnalyticScene(Union(room, ball), light / np.linalg.norm(light),
                         np.array([0.1, 0.1, 0.12]))


def thin_slab(room_half=1.0, half_extent=0.4, half_thickness=0.005):
    """A 1 cm thick slab floating in a room; exercises thin-geometry paths."""
    room = Complement(Box((0.0, 0.0, 0.0), (room_half,) * 3,
                          albedo=(0.7, 0.7, 0.72), checker=0.25))
    slab = Box((0.0, 0.0, 0.0), (half_extent, half_extent, half_thickness),
               albedo=(0.2, 0.5, 0.8), checker=0.1)
    light = np.array([0.2, 0.4, -0.9])
    return AnalyticScene(Union(room, slab), light / np.linalg.norm(light),
                         np.array([0.1, 0.1, 0.12]))


# ---------------------------------------------------------------------------
# trajectories


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix: +z toward target, image y pointing down."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    upv = np.asarray(up, dtype=np.float64)
    if abs(f @ upv) > 0.999:
        upv = np.array([1.0, 0.0, 0.0])
    x = np.cross(f, upv)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, f, eye
    return m


def orbit_trajectory(n_frames, target=(0.0, 0.0, -0.45), radius=0.6,
                     height=0.18, height_amp=0.14):
    """Cameras on a circle of the given radius, all looking at target.

    Eye heights wobble as height + height_amp * sin(3 theta + 0.5) so the
    views are not coplanar (degenerate for pose estimation).
    """
    target = np.asarray(target, dtype=np.float64)
    poses = []
    for k in range(n_frames):
        th = 2.0 * np.pi * k / n_frames
        z = height + height_amp * np.sin(3.0 * th + 0.5)
        eye = np.array([radius * np.cos(th), radius * np.sin(th), z])
        poses.append(look_at(eye, target))
    return np.stack(poses, axis=0)


# ---------------------------------------------------------------------------
# sphere tracing


def sphere_trace(scene, origins, dirs, max_t, tol=1e-6, max_steps=256):
    """First surface hit along each ray.

    Args:
        origins, dirs: (N, 3); dirs unit length.
        max_t: scalar march limit.

    Returns:
        (t, hit): distances (N,) and a boolean hit mask; t is undefined
        where hit is False.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = origins.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        x = origins[active] + t[active, None] * dirs[active]
        s = scene.sdf(x)
        conv = np.abs(s) < tol
        idx = np.where(active)[0]
        hit[idx[conv]] = True
        active[idx[conv]] = False
        t[idx[~conv]] += s[~conv]
        over = t > max_t
        active &= ~over
    return t, hit


# ---------------------------------------------------------------------------
# frames and datasets


@dataclass
class Frame:
    color: np.ndarray  # (H, W, 3) uint8
    depth_mm: np.ndarray  # (H, W) uint16, 0 = missing
    pose: np.ndarray  # (4, 4) camera-to-world
    index: int


class Dataset:
    """In-memory posed RGB-D sequence."""

    def __init__(self, colors, depths, poses, intrinsics, root=None):
        self.colors = colors  # (F, H, W, 3) float in [0, 1]
        self.depths = depths  # (F, H, W) float z-meters, 0 = missing
        self.poses = poses  # (F, 4, 4)
        self.intrinsics = intrinsics
        self.root = root
        self._valid_pixels = None

    def __len__(self):
        return self.colors.shape[0]

    @property
    def valid_pixels(self):
        """(frames, vs, us) index arrays of all pixels with valid depth."""
        if self._valid_pixels is None:
            f, v, u = np.nonzero(self.depths > 0)
            self._valid_pixels = (f.astype(np.int64), v.astype(np.int64), u.astype(np.int64))
        return self._valid_pixels


def _render_frame(scene, pose, intr, max_t, noise_sigma0, dropout_rect,
                  dropout_world, dropout_box, rng_noise):
    h, w = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.float64)
    d_cam = camera.pixel_rays(intr, pixels)
    scale = camera.ray_to_z_scale(intr, pixels)
    R, tvec = pose[:3, :3], pose[:3, 3]
    dirs = d_cam @ R.T
    origins = np.broadcast_to(tvec, dirs.shape)
    t, hit = sphere_trace(scene, origins, dirs, max_t)
    xhit = origins + t[:, None] * dirs
    color = np.broadcast_to(scene.background, (h * w, 3)).copy()
    if hit.any():
        color[hit] = scene.shade(xhit[hit])
    depth_z = np.where(hit, t / scale, 0.0)
    if noise_sigma0 > 0:
        noise = rng_noise.normal(0.0, 1.0, size=depth_z.shape)
        depth_z = np.where(hit, depth_z + noise * noise_sigma0 * depth_z**2, 0.0)
        depth_z = np.maximum(depth_z, 0.0)
    if dropout_world is not None:
        c, r = np.asarray(dropout_world[0], dtype=np.float64), float(dropout_world[1])
        inside = hit & (np.linalg.norm(xhit - c, axis=1) < r)
        depth_z[inside] = 0.0
    if dropout_box is not None:
        lo = np.asarray(dropout_box[0], dtype=np.float64)
        hi = np.asarray(dropout_box[1], dtype=np.float64)
        inside = hit & np.all((xhit >= lo) & (xhit <= hi), axis=1)
        depth_z[inside] = 0.0
    depth_mm = np.round(depth_z * 1000.0).astype(np.uint16)
    img = np.round(color * 255.0).astype(np.uint8)
    depth_img = depth_mm.reshape(h, w)
    if dropout_rect is not None:
        x0, y0, x1, y1 = dropout_rect
        depth_img[y0:y1, x0:x1] = 0
    return img.reshape(h, w, 3), depth_img


def render_dataset(scene, trajectory, intrinsics, out_dir=None, max_t=8.0,
                   noise_sigma0=0.0, dropout_rect=None, dropout_world=None,
                   dropout_box=None, seed=0, threads=1):
    """Render a trajectory to frames; optionally persist to out_dir.

    Noise model: Gaussian depth error with sigma = noise_sigma0 * z^2,
    plus optional dropout: a fixed pixel rectangle (x0, y0, x1, y1) per
    frame, a world-space ball (center, radius), or a world-space box
    (lo, hi) applied to the hit surface.  A world-space dropout zeroes
    the depth of every pixel whose surface point falls inside it, in
    every frame, which carves a consistent hole in the observations.
    Returns the in-memory Dataset.
    """
    trajectory = np.asarray(trajectory, dtype=np.float64)
    n = trajectory.shape[0]
    h, w = intrinsics.height, intrinsics.width

    def work(f):
        rngn = seeds.substream(seed, seeds.DEPTH_NOISE, f)
        return _render_frame(scene, trajectory[f], intrinsics, max_t,
                             noise_sigma0, dropout_rect, dropout_world,
                             dropout_box, rngn)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, range(n)))
    else:
        results = [work(f) for f in range(n)]

    colors = np.stack([r[0] for r in results], axis=0).astype(np.float64) / 255.0
    depths = np.stack([r[1] for r in results], axis=0).astype(np.float64) / 1000.0
    ds = Dataset(colors, depths, trajectory.copy(), intrinsics, root=out_dir)
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "color"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
        for f, (img, dep) in enumerate(results):
            Image.fromarray(img).save(os.path.join(out_dir, "color", f"{f:06d}.png"))
            Image.fromarray(dep).save(os.path.join(out_dir, "depth", f"{f:06d}.png"))
        camera.save_poses(os.path.join(out_dir, "poses.txt"), trajectory)
        camera.save_intrinsics(os.path.join(out_dir, "intrinsics.txt"), intrinsics)
    return ds


def load_dataset(root):
    """Load a dataset directory into memory, validating consistency."""
    intr = camera.load_intrinsics(os.path.join(root, "intrinsics.txt"))
    poses = camera.load_poses(os.path.join(root, "poses.txt"))
    cdir, ddir = os.path.join(root, "color"), os.path.join(root, "depth")
    if not os.path.isdir(cdir) or not os.path.isdir(ddir):
        raise FileNotFoundError(f"{root}: expected color/ and depth/ subdirectories")
    cfiles = sorted(f for f in os.listdir(cdir) if f.endswith(".png"))
    dfiles = sorted(f for f in os.listdir(ddir) if f.endswith(".png"))
    if len(cfiles) != len(dfiles):
        raise ValueError(f"{root}: {len(cfiles)} color frames but {len(dfiles)} depth frames")
    if len(cfiles) != poses.shape[0]:
        raise ValueError(f"{root}: {len(cfiles)} frames but {poses.shape[0]} poses")
    colors, depths = [], []
    for cf, df in zip(cfiles, dfiles):
        img = np.asarray(Image.open(os.path.join(cdir, cf)))
        dep = np.asarray(Image.open(os.path.join(ddir, df)))
        if img.shape[:2] != (intr.height, intr.width) or dep.shape != (intr.height, intr.width):
            raise ValueError(f"{root}: frame {cf} dimensions do not match intrinsics")
        colors.append(img.astype(np.float64) / 255.0)
        depths.append(dep.astype(np.float64) / 1000.0)
    return Dataset(np.stack(colors), np.stack(depths), poses, intr, root=root)

"""Pinhole camera model and optimizable per-frame poses.

A pose is stored as a fixed reference rotation R0 plus an optimizable
so(3) tangent vector nu and translation t; the realized rotation is
R = R0 @ exp(hat(nu)), which stays exactly orthonormal regardless of how
many gradient steps are taken.  The optimizer periodically folds exp(nu)
into R0 and re-zeroes nu so the tangent stays small.

Conventions: camera looks down +z, image origin top-left, camera-to-world
matrices.  Depth images store z-depth (distance along the optical axis).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

__all__ = [
    "Intrinsics",
    "PoseParam",
    "exp_so3",
    "exp_so3_data",
    "backproject",
    "project",
    "pose_errors",
    "perturb_pose",
    "load_poses",
    "save_poses",
    "load_intrinsics",
    "save_intrinsics",
]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")


class PoseParam:
    """Camera-to-world pose with an optimizable local rotation update."""

    def __init__(self, R0, t, trainable=True, dtype=np.float64):
        self.R0 = np.asarray(R0, dtype=np.float64).copy()
        make = dc.leaf if trainable else dc.constant
        self.nu = make(np.zeros(3, dtype=dtype))
        self.t = make(np.asarray(t, dtype=dtype).copy())
        self.trainable = trainable

    @classmethod
    def from_matrix(cls, c2w, trainable=True, dtype=np.float64):
        c2w = np.asarray(c2w, dtype=np.float64)
        return cls(c2w[:3, :3], c2w[:3, 3], trainable=trainable, dtype=dtype)

    def rotation(self):
        """Realized rotation as a graph node (3, 3)."""
        return dc.matmul(dc.constant(self.R0.astype(self.nu.dtype)), exp_so3(self.nu))

    def rotation_data(self):
        return self.R0 @ exp_so3_data(self.nu.data)

    def matrix(self):
        """Plain 4x4 camera-to-world array of the current pose."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_data()
        m[:3, 3] = np.asarray(self.t.data, dtype=np.float64)
        return m

    def refresh(self):
        """Fold exp(nu) into R0 and zero the tangent (value-preserving)."""
        if not self.trainable:
            return
        self.R0 = self.R0 @ exp_so3_data(self.nu.data)
        self.nu.data[...] = 0.0

    def parameters(self):
        return [self.nu, self.t] if self.trainable else []


_SMALL_ANGLE = 1e-4


def exp_so3(nu):
    """Rodrigues map so(3) -> SO(3) as a differentiable graph op.

    Uses the closed form for angles above 1e-4 and a Taylor series in
    theta^2 below it (both branches are accurate to machine precision at
    the switch point, and the series avoids dividing by a vanishing
    angle or differentiating sqrt at zero).
    """
    if not isinstance(nu, dc.Tensor):
        nu = dc.constant(np.asarray(nu, dtype=np.float64))
    n0, n1, n2 = nu[0:1], nu[1:2], nu[2:3]
    z = dc.constant(np.zeros(1, dtype=nu.dtype))
    K = dc.reshape(
        dc.concat([z, -n2, n1, n2, z, -n0, -n1, n0, z], axis=0), (3, 3)
    )
    K2 = dc.matmul(K, K)
    th2 = dc.sum_(dc.mul(nu, nu))
    if float(np.sqrt(th2.item())) < _SMALL_ANGLE:
        # a = sin(th)/th, b = (1-cos th)/th^2 as series in th^2
        a = 1.0 + th2 * (-1.0 / 6.0) + th2 * th2 * (1.0 / 120.0)
        b = 0.5 + th2 * (-1.0 / 24.0) + th2 * th2 * (1.0 / 720.0)
    else:
        th = dc.sqrt(th2)
        a = dc.div(dc.sin(th), th)
        b = dc.div(1.0 - dc.cos(th), th2)
    eye = dc.constant(np.eye(3, dtype=nu.dtype))
    return eye + dc.reshape(a, (1, 1)) * K + dc.reshape(b, (1, 1)) * K2


def exp_so3_data(nu):
    """Plain-array Rodrigues map (same branches as the graph version)."""
    nu = np.asarray(nu, dtype=np.float64)
    th2 = float(nu @ nu)
    K = np.array(
        [[0.0, -nu[2], nu[1]], [nu[2], 0.0, -nu[0]], [-nu[1], nu[0], 0.0]]
    )
    if np.sqrt(th2) < _SMALL_ANGLE:
        a = 1.0 - th2 / 6.0 + th2 * th2 / 120.0
        b = 0.5 - th2 / 24.0 + th2 * th2 / 720.0
    else:
        th = np.sqrt(th2)
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / th2
    return np.eye(3) + a * K + b * (K @ K)


def pixel_rays(intr, pixels, dtype=np.float64):
    """Unit camera-space directions through pixel (u, v), shape (N, 3)."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if np.any(px[:, 0] < 0) or np.any(px[:, 0] >= intr.width) or np.any(
        px[:, 1] < 0
    ) or np.any(px[:, 1] >= intr.height):
        raise ValueError("pixel outside image bounds")
    d = np.stack(
        [
            (px[:, 0] - intr.cx) / intr.fx,
            (px[:, 1] - intr.cy) / intr.fy,
            np.ones(px.shape[0]),
        ],
        axis=1,
    )
    return (d / np.linalg.norm(d, axis=1, keepdims=True)).astype(dtype)


def ray_to_z_scale(intr, pixels):
    """Factor converting z-depth to distance along the unit pixel ray."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d = np.stack(
        [
            (px[:, 0] - intr.cx) / intr.fx,
            (px[:, 1] - intr.cy) / intr.fy,
            np.ones(px.shape[0]),
        ],
        axis=1,
    )
    return np.linalg.norm(d, axis=1)


def backproject(intr, pose, pixels):
    """World-space rays through pixels for one camera.

    Args:
        intr: Intrinsics.
        pose: PoseParam or a 4x4 camera-to-world array.
        pixels: (N, 2) pixel coordinates (u, v).

    Returns:
        (origins, directions): Tensors (N, 3); directions unit length.
        Differentiable w.r.t. the pose when it is a trainable PoseParam.
    """
    dtype = pose.nu.dtype if isinstance(pose, PoseParam) else np.float64
    d_cam = pixel_rays(intr, pixels, dtype=dtype)
    n = d_cam.shape[0]
    if isinstance(pose, PoseParam):
        R = pose.rotation()
        t = pose.t
    else:
        m = np.asarray(pose, dtype=np.float64)
        R = dc.constant(m[:3, :3])
        t = dc.constant(m[:3, 3])
    dirs = dc.swapaxes(dc.matmul(R, dc.constant(d_cam.T)), 0, 1)
    origins = dc.broadcast_to(dc.reshape(t, (1, 3)), (n, 3))
    return origins, dirs


def project(intr, c2w, points):
    """Project world points into one camera; returns (u, v, z_cam)."""
    c2w = np.asarray(c2w, dtype=np.float64)
    R, t = c2w[:3, :3], c2w[:3, 3]
    pc = (np.asarray(points, dtype=np.float64) - t) @ R  # world -> camera
    z = pc[:, 2]
    safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    u = intr.fx * pc[:, 0] / safe + intr.cx
    v = intr.fy * pc[:, 1] / safe + intr.cy
    return u, v, z


def pose_errors(estimated, ground_truth):
    """Mean translation (m) and mean geodesic rotation error (degrees).

    Args:
        estimated, ground_truth: (F, 4, 4) camera-to-world arrays.
    """
    est = np.asarray(estimated, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError("pose count mismatch")
    dt = np.linalg.norm(est[:, :3, 3] - gt[:, :3, 3], axis=1)
    rel = np.einsum("fij,fik->fjk", est[:, :3, :3], gt[:, :3, :3])
    tr = np.clip((np.trace(rel, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    ang = np.degrees(np.arccos(tr))
    return float(dt.mean()), float(ang.mean())


def perturb_pose(c2w, trans_mag, rot_mag_deg, rng):
    """Offset a pose by exactly trans_mag meters and rot_mag_deg degrees.

    Direction and rotation axis are uniform random; magnitudes are exact,
    which makes the initial error of a perturbed trajectory predictable.
    """
    c2w = np.asarray(c2w, dtype=np.float64).copy()
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    c2w[:3, 3] += trans_mag * d
    c2w[:3, :3] = c2w[:3, :3] @ exp_so3_data(axis * np.radians(rot_mag_deg))
    return c2w


# ---------------------------------------------------------------------------
# file formats: one 16-number row-major 4x4 camera-to-world matrix per line;
# intrinsics as a single line "fx fy cx cy width height"


def load_poses(path):
    vals = np.loadtxt(path, dtype=np.float64)
    vals = np.atleast_2d(vals)
    if vals.shape[1] != 16:
        raise ValueError(f"pose file {path}: expected 16 numbers per line, got {vals.shape[1]}")
    poses = vals.reshape(-1, 4, 4)
    for i, p in enumerate(poses):
        if not np.allclose(p[3], [0, 0, 0, 1], atol=1e-6):
            raise ValueError(f"pose {i} in {path} has a malformed last row")
    return poses


def save_poses(path, poses):
    poses = np.asarray(poses, dtype=np.float64)
    np.savetxt(path, poses.reshape(-1, 16), fmt="%.17g")


def load_intrinsics(path):
    vals = np.loadtxt(path, dtype=np.float64).ravel()
    if vals.size != 6:
        raise ValueError(f"intrinsics file {path}: expected 6 values")
    return Intrinsics(vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]))


def save_intrinsics(path, intr):
    with open(path, "w") as f:
        f.write(f"{intr.fx:.17g} {intr.fy:.17g} {intr.cx:.17g} {intr.cy:.17g} {intr.width} {intr.height}\n")

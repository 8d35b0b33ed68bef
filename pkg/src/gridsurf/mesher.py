"""Mesh extraction, visibility culling, and reconstruction metrics.

Extraction runs standard 256-case marching cubes on a dense SDF volume
decoded from the model.  Culling subdivides faces to a maximum edge
length, then removes every face that no input frame observes (outside
all frusta, occluded per a z-buffer render of the mesh itself, or seen
only at pixels with invalid depth).  Metrics compare area-weighted
surface samples (1 point per cm^2) with a grid-hash nearest-neighbor
search.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np
from numba import njit
from skimage import measure

from . import camera
from . import decoders
from . import diffcore as dc
from . import feature_grid as fg
from . import seeds

__all__ = [
    "TriangleMesh", "MetricsReport", "EmptyLevelSetError",
    "extract_mesh", "cull_mesh", "evaluate", "subdivide_to_edge_length",
    "sample_surface", "save_mesh", "load_mesh", "mesh_from_sdf",
]

MAX_EDGE = 0.015
OCCLUSION_TOL = 0.01
EVAL_DENSITY = 1e4  # points per m^2 = 1 per cm^2
EVAL_SEED = 90210


class EmptyLevelSetError(RuntimeError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")

    def face_areas(self):
        v = self.vertices
        a = v[self.faces[:, 1]] - v[self.faces[:, 0]]
        b = v[self.faces[:, 2]] - v[self.faces[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)

    def face_normals(self):
        v = self.vertices
        n = np.cross(v[self.faces[:, 1]] - v[self.faces[:, 0]],
                     v[self.faces[:, 2]] - v[self.faces[:, 0]])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(ln, 1e-300)

    def area(self):
        return float(self.face_areas().sum())

    def drop_degenerate(self, min_area=1e-14):
        keep = self.face_areas() > min_area
        return TriangleMesh(self.vertices, self.faces[keep])


@dataclass
class MetricsReport:
    accuracy: float
    completion: float
    chamfer_l1: float
    normal_consistency: float
    f_score: float
    precision: float
    recall: float
    threshold: float
    n_pred_points: int
    n_gt_points: int

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self):
        rows = [
            ("accuracy [m]", self.accuracy),
            ("completion [m]", self.completion),
            ("chamfer-l1 [m]", self.chamfer_l1),
            ("normal consistency", self.normal_consistency),
            (f"f-score @ {self.threshold:g} m", self.f_score),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {val:.6f}" for name, val in rows)


# ---------------------------------------------------------------------------
# extraction


def _sdf_chunk(model, pts):
    with dc.pause_grad():
        feat = fg.sample_multi(model.grid, pts.astype(model.dtype))
        return decoders.decode_sdf(model.geom_net, feat).data[:, 0]


def sdf_volume(model, resolution, threads=1):
    """Decode the SDF on a dense grid over the model's world box."""
    margin = 0.5 * model.grid.finest_voxel
    lo = model.grid.lo + margin
    hi = model.grid.hi - margin
    dims = np.maximum((np.floor((hi - lo) / resolution)).astype(int) + 1, 2)
    axes = [lo[a] + np.arange(dims[a]) * resolution for a in range(3)]
    vol = np.empty(tuple(dims), dtype=np.float32)
    yy, zz = np.meshgrid(axes[1], axes[2], indexing="ij")

    def slab(i):
        pts = np.stack([np.full(yy.size, axes[0][i]), yy.ravel(), zz.ravel()], axis=1)
        vol[i] = _sdf_chunk(model, pts).reshape(dims[1], dims[2])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(slab, range(dims[0])))
    else:
        for i in range(dims[0]):
            slab(i)
    return vol, lo, resolution


def mesh_from_sdf(vol, origin, resolution):
    """Marching cubes on a dense SDF volume; raises if no zero crossing."""
    if vol.min() > 0 or vol.max() < 0:
        raise EmptyLevelSetError("SDF volume has no zero crossing")
    verts, faces, _, _ = measure.marching_cubes(
        vol, level=0.0, spacing=(resolution,) * 3, method="lorensen"
    )
    mesh = TriangleMesh(verts + np.asarray(origin)[None, :], faces.astype(np.int64))
    return mesh.drop_degenerate()


def extract_mesh(model, resolution=0.01, threads=1):
    """Zero level set of the decoded SDF as a triangle mesh."""
    vol, origin, res = sdf_volume(model, resolution, threads=threads)
    return mesh_from_sdf(vol, origin, res)


# ---------------------------------------------------------------------------
# culling


def subdivide_to_edge_length(mesh, max_edge=MAX_EDGE):
    """4-way subdivide faces until every edge is at most max_edge."""
    verts = list(map(tuple, mesh.vertices))
    varr = mesh.vertices.copy()
    faces = mesh.faces
    for _ in range(32):
        v = varr
        e = np.stack([
            np.linalg.norm(v[faces[:, 1]] - v[faces[:, 0]], axis=1),
            np.linalg.norm(v[faces[:, 2]] - v[faces[:, 1]], axis=1),
            np.linalg.norm(v[faces[:, 0]] - v[faces[:, 2]], axis=1),
        ], axis=1)
        needs = e.max(axis=1) > max_edge
        if not needs.any():
            break
        mid_cache = {}
        new_rows = []

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            idx = mid_cache.get(key)
            if idx is None:
                new_rows.append(0.5 * (varr[a] + varr[b]))
                idx = varr.shape[0] + len(new_rows) - 1
                mid_cache[key] = idx
            return idx

        out = [faces[~needs]]
        quads = []
        for f in faces[needs]:
            a, b, c = int(f[0]), int(f[1]), int(f[2])
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            quads.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
        out.append(np.asarray(quads, dtype=np.int64))
        faces = np.concatenate(out, axis=0)
        if new_rows:
            varr = np.concatenate([varr, np.asarray(new_rows)], axis=0)
    return TriangleMesh(varr, faces)


@njit(cache=True, nogil=True)
def _raster_zbuffer(u, v, z, faces, height, width):
    """Min-z rasterization with perspective-correct depth interpolation."""
    zbuf = np.full((height, width), np.inf)
    for fi in range(faces.shape[0]):
        i0, i1, i2 = faces[fi, 0], faces[fi, 1], faces[fi, 2]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 <= 1e-9 or z1 <= 1e-9 or z2 <= 1e-9:
            continue
        x0, y0 = u[i0], v[i0]
        x1, y1 = u[i1], v[i1]
        x2, y2 = u[i2], v[i2]
        xmin = max(int(np.floor(min(x0, min(x1, x2)))), 0)
        xmax = min(int(np.ceil(max(x0, max(x1, x2)))), width - 1)
        ymin = max(int(np.floor(min(y0, min(y1, y2)))), 0)
        ymax = min(int(np.ceil(max(y0, max(y1, y2)))), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(det) < 1e-18:
            continue
        iz0, iz1, iz2 = 1.0 / z0, 1.0 / z1, 1.0 / z2
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                w1 = ((px - x0) * (y2 - y0) - (x2 - x0) * (py - y0)) / det
                w2 = ((x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)) / det
                w0 = 1.0 - w1 - w2
                if w0 < -1e-9 or w1 < -1e-9 or w2 < -1e-9:
                    continue
                iz = w0 * iz0 + w1 * iz1 + w2 * iz2
                zz = 1.0 / iz
                if zz < zbuf[py, px]:
                    zbuf[py, px] = zz
    return zbuf


def cull_mesh(mesh, dataset, thin_mode=False, max_edge=MAX_EDGE,
              occlusion_tol=OCCLUSION_TOL, threads=1):
    """Remove faces never observed by the dataset's cameras.

    A (subdivided) face survives if any of its vertices, in any frame,
    projects inside the image with positive depth, is within
    occlusion_tol of the mesh's own rendered depth, and (unless
    thin_mode) lands on a pixel with a valid observed depth.
    """
    fine = subdivide_to_edge_length(mesh, max_edge)
    intr = dataset.intrinsics
    verts = fine.vertices
    visible = np.zeros(len(verts), dtype=bool)

    def frame_pass(f):
        u, v, z = camera.project(intr, dataset.poses[f], verts)
        inside = (z > 1e-9) & (u >= 0) & (u <= intr.width - 1) & (v >= 0) & (v <= intr.height - 1)
        if not inside.any():
            return np.zeros(len(verts), dtype=bool)
        zbuf = _raster_zbuffer(u, v, z, fine.faces, intr.height, intr.width)
        ui = np.clip(np.round(u).astype(np.int64), 0, intr.width - 1)
        vi = np.clip(np.round(v).astype(np.int64), 0, intr.height - 1)
        unoccluded = z <= zbuf[vi, ui] + occlusion_tol
        ok = inside & unoccluded
        if not thin_mode:
            ok &= dataset.depths[f][vi, ui] > 0
        return ok

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            for ok in ex.map(frame_pass, range(len(dataset))):
                visible |= ok
    else:
        for f in range(len(dataset)):
            visible |= frame_pass(f)

    keep = visible[fine.faces].any(axis=1)
    culled = TriangleMesh(fine.vertices, fine.faces[keep])
    return _compact(culled)


def _compact(mesh):
    """Drop unreferenced vertices and reindex faces."""
    used = np.unique(mesh.faces.ravel()) if mesh.faces.size else np.empty(0, np.int64)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return TriangleMesh(mesh.vertices[used], remap[mesh.faces])


# ---------------------------------------------------------------------------
# metrics


def sample_surface(mesh, density=EVAL_DENSITY, seed=EVAL_SEED):
    """Area-weighted uniform surface samples with face normals.

    Returns (points (N, 3), normals (N, 3)); N = round(area * density).
    """
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no area to sample")
    n = max(int(round(total * density)), 1)
    rng = np.random.default_rng(np.random.SeedSequence((seed, seeds.EVAL_SAMPLES)))
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices
    a, b, c = v[mesh.faces[tri, 0]], v[mesh.faces[tri, 1]], v[mesh.faces[tri, 2]]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    normals = mesh.face_normals()[tri]
    return pts, normals


@njit(cache=True, nogil=True)
def _grid_nn_query(qpts, ref, order, starts, lo, cell, nx, ny, nz):
    """Nearest reference point per query via expanding cell rings."""
    nq = qpts.shape[0]
    out_d = np.empty(nq)
    out_i = np.empty(nq, dtype=np.int64)
    rmax = max(nx, max(ny, nz))
    for q in range(nq):
        px, py, pz = qpts[q, 0], qpts[q, 1], qpts[q, 2]
        cx = min(max(int((px - lo[0]) / cell), 0), nx - 1)
        cy = min(max(int((py - lo[1]) / cell), 0), ny - 1)
        cz = min(max(int((pz - lo[2]) / cell), 0), nz - 1)
        best = np.inf
        besti = -1
        for r in range(rmax + 1):
            # cells at Chebyshev ring r hold points strictly farther than
            # (r - 1) * cell, so the best found so far cannot be beaten
            if besti >= 0 and r >= 1 and best <= ((r - 1) * cell) * ((r - 1) * cell):
                break
            x0, x1 = max(cx - r, 0), min(cx + r, nx - 1)
            y0, y1 = max(cy - r, 0), min(cy + r, ny - 1)
            z0, z1 = max(cz - r, 0), min(cz + r, nz - 1)
            for ix in range(x0, x1 + 1):
                for iy in range(y0, y1 + 1):
                    for iz in range(z0, z1 + 1):
                        # only the new shell at Chebyshev radius exactly r
                        if r > 0 and (abs(ix - cx) != r and abs(iy - cy) != r and abs(iz - cz) != r):
                            continue
                        cid = (ix * ny + iy) * nz + iz
                        for k in range(starts[cid], starts[cid + 1]):
                            j = order[k]
                            dx = ref[j, 0] - px
                            dy = ref[j, 1] - py
                            dz = ref[j, 2] - pz
                            d2 = dx * dx + dy * dy + dz * dz
                            if d2 < best:
                                best = d2
                                besti = j
        out_d[q] = np.sqrt(best)
        out_i[q] = besti
    return out_d, out_i


def nearest_neighbors(query, ref, cell):
    """Exact nearest neighbor (distance, index) from query into ref points."""
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    query = np.ascontiguousarray(query, dtype=np.float64)
    lo = np.minimum(ref.min(axis=0), query.min(axis=0)) - cell
    hi = np.maximum(ref.max(axis=0), query.max(axis=0)) + cell
    dims = np.maximum(((hi - lo) / cell).astype(np.int64) + 1, 1)
    nx, ny, nz = int(dims[0]), int(dims[1]), int(dims[2])
    cidx = np.clip(((ref - lo) / cell).astype(np.int64), 0, dims - 1)
    cid = (cidx[:, 0] * ny + cidx[:, 1]) * nz + cidx[:, 2]
    order = np.argsort(cid, kind="stable").astype(np.int64)
    counts = np.bincount(cid, minlength=nx * ny * nz)
    starts = np.zeros(nx * ny * nz + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    return _grid_nn_query(query, ref, order, starts, lo, float(cell), nx, ny, nz)


def evaluate(pred_mesh, gt_mesh, threshold=0.05, density=EVAL_DENSITY, seed=EVAL_SEED):
    """Five-way reconstruction metrics between two meshes.

    Accuracy: mean pred-to-gt sample distance; completion: gt-to-pred;
    chamfer-l1: their mean; normal consistency: mean absolute cosine
    between nearest-neighbor normals (averaged over both directions);
    F-score: harmonic mean of precision/recall at the threshold.
    """
    if pred_mesh.faces.size == 0 or gt_mesh.faces.size == 0:
        raise ValueError("cannot evaluate an empty mesh")
    p_pts, p_nrm = sample_surface(pred_mesh, density, seed)
    g_pts, g_nrm = sample_surface(gt_mesh, density, seed)
    d_pg, i_pg = nearest_neighbors(p_pts, g_pts, threshold)
    d_gp, i_gp = nearest_neighbors(g_pts, p_pts, threshold)
    acc = float(d_pg.mean())
    comp = float(d_gp.mean())
    nc_pg = np.abs(np.sum(p_nrm * g_nrm[i_pg], axis=1)).mean()
    nc_gp = np.abs(np.sum(g_nrm * p_nrm[i_gp], axis=1)).mean()
    precision = float((d_pg < threshold).mean())
    recall = float((d_gp < threshold).mean())
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(
        accuracy=acc,
        completion=comp,
        chamfer_l1=0.5 * (acc + comp),
        normal_consistency=float(0.5 * (nc_pg + nc_gp)),
        f_score=float(f),
        precision=precision,
        recall=recall,
        threshold=float(threshold),
        n_pred_points=len(p_pts),
        n_gt_points=len(g_pts),
    )


# ---------------------------------------------------------------------------
# mesh I/O: PLY (ascii + binary little-endian) and OBJ


def save_mesh(path, mesh, binary=True):
    path = str(path)
    if path.endswith(".obj"):
        with open(path, "w") as f:
            for v in mesh.vertices:
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for face in mesh.faces:
                f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")
        return
    nv, nf = len(mesh.vertices), len(mesh.faces)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {nv}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {nf}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    if binary:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(mesh.vertices.astype("<f4").tobytes())
            rec = np.empty(nf, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            rec["n"] = 3
            rec["idx"] = mesh.faces.astype("<i4")
            f.write(rec.tobytes())
    else:
        with open(path, "w") as f:
            f.write(header)
            for v in mesh.vertices:
                f.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for face in mesh.faces:
                f.write(f"3 {face[0]} {face[1]} {face[2]}\n")


def load_mesh(path):
    path = str(path)
    if path.endswith(".obj"):
        verts, faces = [], []
        with open(path) as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64))
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        nv = nf = 0
        props_before = 0
        in_vertex = False
        while True:
            line = f.readline().split()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            if line[0] == b"format":
                fmt = line[1].decode()
            elif line[0] == b"element":
                in_vertex = line[1] == b"vertex"
                if in_vertex:
                    nv = int(line[2])
                else:
                    nf = int(line[2])
            elif line[0] == b"end_header":
                break
        if fmt == "ascii":
            verts = np.loadtxt(f, max_rows=nv).reshape(nv, -1)[:, :3]
            fdata = np.loadtxt(f, max_rows=nf).reshape(nf, -1)
            faces = fdata[:, 1:4].astype(np.int64)
        elif fmt == "binary_little_endian":
            verts = np.frombuffer(f.read(nv * 12), dtype="<f4").reshape(nv, 3).astype(np.float64)
            rec = np.frombuffer(f.read(nf * 13), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            faces = rec["idx"].astype(np.int64)
        else:
            raise ValueError(f"{path}: unsupported PLY format {fmt}")
        return TriangleMesh(np.asarray(verts, dtype=np.float64), faces)

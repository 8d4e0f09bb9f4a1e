"""Reconstruction metrics: Monte-Carlo volumetric IoU, Chamfer-L1, normal consistency."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_SURFACE_SAMPLES = 10_000


class UndefinedIoUError(ValueError):
    pass


def _predicate(occ):
    if hasattr(occ, "contains"):
        return occ.contains
    if hasattr(occ, "value"):
        return lambda x: occ.value(x) < 0
    return occ


def volumetric_iou(occ_a, occ_b, bounds, n=100_000, seed=0, chunk=1 << 15):
    """|A and B| / |A or B| over ``n`` uniform samples in the box ``bounds``.

    Occupancies are callables mapping (k, 3) points to booleans, or objects with
    a ``contains`` method.
    """
    if n < 10_000:
        raise ValueError("n must be at least 1e4")
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    fa, fb = _predicate(occ_a), _predicate(occ_b)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n, 3))
    inter = union = 0
    for s in range(0, n, chunk):
        p = pts[s:s + chunk]
        a = np.asarray(fa(p), dtype=bool)
        b = np.asarray(fb(p), dtype=bool)
        inter += int(np.sum(a & b))
        union += int(np.sum(a | b))
    if union == 0:
        raise UndefinedIoUError("both occupancies are empty on every sample")
    return inter / union


def chamfer_l1(surf_a, surf_b):
    a = np.asarray(surf_a, dtype=float).reshape(-1, 3)
    b = np.asarray(surf_b, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two nonempty point sets")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return 0.5 * (d_ab.mean() + d_ba.mean())


def _closest_on_triangles(p, v0, v1, v2):
    """Closest points on triangles (batched, one triangle per query row)."""
    ab, ac, ap = v1 - v0, v2 - v0, p - v0
    d1, d2 = np.sum(ab * ap, -1), np.sum(ac * ap, -1)
    bp = p - v1
    d3, d4 = np.sum(ab * bp, -1), np.sum(ac * bp, -1)
    cp = p - v2
    d5, d6 = np.sum(ab * cp, -1), np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-300, 1e-300, denom)
    v = vb / denom
    w = vc / denom
    out = v0 + ab * v[..., None] + ac * w[..., None]

    def put(mask, val):
        nonlocal out
        out = np.where(mask[..., None], val, out)

    # edge regions (reverse order so vertex regions take precedence)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put(m, v1 + (v2 - v1) * np.nan_to_num(t)[..., None])
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        put(m, v0 + ac * np.nan_to_num(t)[..., None])
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        put(m, v0 + ab * np.nan_to_num(t)[..., None])
    put((d6 >= 0) & (d5 <= d6), v2)
    put((d3 >= 0) & (d4 <= d3), v1)
    put((d1 <= 0) & (d2 <= 0), v0)
    return out


def _point_triangle_distance(points, mesh, faces):
    tri = mesh.vertices[mesh.triangles[faces]]
    q = np.broadcast_to(points[:, None, :], tri.shape[:-2] + (3,))
    closest = _closest_on_triangles(q, tri[..., 0, :], tri[..., 1, :], tri[..., 2, :])
    return np.linalg.norm(closest - q, axis=-1)


def nearest_faces(mesh, points, k=8):
    """Index of the exact nearest triangle for each point.

    Any triangle closer than the best candidate so far has its centroid within
    (best distance + largest centroid-to-vertex radius). Points whose k-th
    centroid lies inside that bound are retried with a larger k.
    """
    cents = mesh.face_centroids()
    radius = np.linalg.norm(mesh.vertices[mesh.triangles] - cents[:, None], axis=-1).max()
    tree = cKDTree(cents)
    best = np.empty(len(points), dtype=np.int64)
    todo = np.arange(len(points))
    while len(todo):
        kk = min(k, len(cents))
        cdist, cand = tree.query(points[todo], k=kk)
        cdist, cand = cdist.reshape(len(todo), kk), cand.reshape(len(todo), kk)
        d = _point_triangle_distance(points[todo], mesh, cand)
        best[todo] = cand[np.arange(len(todo)), d.argmin(axis=1)]
        if kk == len(cents):
            break
        todo = todo[cdist[:, -1] <= d.min(axis=1) + radius]
        k *= 4
    return best


def normal_consistency(mesh_a, mesh_b, n=DEFAULT_SURFACE_SAMPLES, seed=0):
    """Mean |n_a . n_b| between sampled surface points and nearest points on the other mesh, symmetrized."""
    for m in (mesh_a, mesh_b):
        if len(m.triangles) == 0 or m.face_areas().sum() <= 0:
            raise ValueError("normal consistency needs nonempty, nondegenerate meshes")
    rng = np.random.default_rng(seed)
    na, nb = mesh_a.face_normals(), mesh_b.face_normals()
    pa, _, fa = mesh_a.sample_surface(n, rng)
    pb, _, fb = mesh_b.sample_surface(n, rng)
    ab = np.abs(np.sum(na[fa] * nb[nearest_faces(mesh_b, pa)], axis=1)).mean()
    ba = np.abs(np.sum(nb[fb] * na[nearest_faces(mesh_a, pb)], axis=1)).mean()
    return float(0.5 * (ab + ba))


@dataclass
class ReconReport:
    iou: float
    chamfer_l1: float
    normal_consistency: float
    iou_samples: int
    surface_samples: int
    seed: int
    extra: dict | None = None

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError("iou out of range")
        if self.chamfer_l1 < 0:
            raise ValueError("chamfer must be nonnegative")
        if not -1.0 <= self.normal_consistency <= 1.0 + 1e-12:
            raise ValueError("normal consistency out of range")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def evaluate_reconstruction(pred_field, true_field, pred_mesh, true_mesh, bounds, iou_samples=100_000,
                            surface_samples=DEFAULT_SURFACE_SAMPLES, seed=0, extra=None):
    """All three metrics for one shape. Fields give occupancy as value < 0."""
    iou = volumetric_iou(lambda x: pred_field.value(x) < 0, lambda x: true_field.value(x) < 0,
                         bounds, iou_samples, seed)
    # identical streams: a mesh compared with itself gets identical samples and Chamfer 0
    pa, _, _ = pred_mesh.sample_surface(surface_samples, np.random.default_rng(seed + 1))
    pb, _, _ = true_mesh.sample_surface(surface_samples, np.random.default_rng(seed + 1))
    return ReconReport(iou, chamfer_l1(pa, pb), normal_consistency(pred_mesh, true_mesh, surface_samples, seed),
                       iou_samples, surface_samples, seed, extra)

"""Zero-isosurface extraction from SDF fields, dense and octree-refined."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import measure


class EmptySurfaceError(ValueError):
    pass


class ObjParseError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def face_normals(self, unit=True):
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        if unit:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def face_centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def remove_degenerate(self, eps=1e-14):
        keep = self.face_areas() > eps
        return TriangleMesh(self.vertices, self.triangles[keep], self.normals)

    def transformed(self, pose, scale=1.0):
        """Uniform scale about the origin, then the rigid ``pose``."""
        return TriangleMesh(pose.apply(self.vertices * scale), self.triangles)

    def sample_surface(self, n, rng):
        """Area-weighted uniform samples: returns points and their unit face normals."""
        areas = self.face_areas()
        if len(areas) == 0 or areas.sum() <= 0:
            raise ValueError("cannot sample a degenerate mesh")
        face = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1, r2 = rng.uniform(size=n), rng.uniform(size=n)
        s = np.sqrt(r1)
        v = self.vertices[self.triangles[face]]
        pts = (1 - s)[:, None] * v[:, 0] + (s * (1 - r2))[:, None] * v[:, 1] + (s * r2)[:, None] * v[:, 2]
        return pts, self.face_normals()[face], face

    def save_obj(self, path):
        save_obj(self, path)


def icosahedron():
    t = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=float)
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4], [11, 10, 2],
         [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5],
         [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    return TriangleMesh(v / np.linalg.norm(v[0]), np.array(f))


# --- extraction ---------------------------------------------------------------


class CountingField:
    """Wraps a field and counts point evaluations."""

    def __init__(self, field_):
        self.field = field_
        self.count = 0

    def value(self, x):
        x = np.asarray(x, dtype=float)
        self.count += 1 if x.ndim == 1 else len(x)
        return self.field.value(x)

    def gradient(self, x):
        return self.field.gradient(x)


def _bounds(bounds):
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    return lo, hi


def _evaluate(field_, pts, chunk=1 << 16):
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = field_.value(pts[s:s + chunk])
    return out


def _triangulate(values, lo, spacing):
    if not (np.any(values < 0) and np.any(values >= 0)):
        raise EmptySurfaceError("field has no zero crossing inside the bounds")
    try:
        verts, faces, _, _ = measure.marching_cubes(values, level=0.0, spacing=tuple(spacing),
                                                    allow_degenerate=False, method="lewiner")
    except (ValueError, RuntimeError) as exc:
        raise EmptySurfaceError(str(exc)) from exc
    # skimage's default winding already makes face normals follow +gradient
    mesh = TriangleMesh(verts + lo, faces)
    return mesh.remove_degenerate()


def marching_cubes(field_, bounds, resolution):
    """Dense extraction with ``resolution`` cells per axis (resolution + 1 nodes)."""
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    lo, hi = _bounds(bounds)
    axes = [np.linspace(lo[i], hi[i], resolution + 1) for i in range(3)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    values = _evaluate(field_, nodes).reshape((resolution + 1,) * 3)
    return _triangulate(values, lo, (hi - lo) / resolution)


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


def _mixed_cells(values, evaluated, cells, step):
    """Subset of ``cells`` (K, 3) at cell size ``step`` whose corner signs differ."""
    idx = (cells[:, None, :] + _CORNERS[None]) * step
    v = values[idx[..., 0], idx[..., 1], idx[..., 2]]
    neg = v < 0
    return cells[np.any(neg, axis=1) & ~np.all(neg, axis=1)]


def _dilate(cells, n_cells):
    mask = np.zeros((n_cells,) * 3, dtype=bool)
    mask[tuple(cells.T)] = True
    mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3, 3), dtype=bool))
    return np.argwhere(mask)


def hierarchical_extract(field_, bounds, base_res, target_res, return_count=False):
    """Octree-style refinement around sign-change cells.

    Starting from a dense ``base_res`` grid, cells with a sign change (dilated by
    one cell) are split in eight at each level until ``target_res``. Only corners
    of refined cells are evaluated; other fine nodes take the sign of the nearest
    evaluated node, which cannot create crossings. Sign-change cells therefore
    have exact corners and triangulate exactly as in a dense extraction.
    """
    ratio = target_res // base_res
    if base_res < 8 or target_res % base_res or ratio & (ratio - 1):
        raise ValueError("target_res must be a power-of-two multiple of base_res >= 8")
    counter = CountingField(field_)
    lo, hi = _bounds(bounds)
    n = target_res + 1
    spacing = (hi - lo) / target_res
    values = np.zeros((n, n, n))
    evaluated = np.zeros((n, n, n), dtype=bool)

    def ensure(cells, step):
        idx = ((cells[:, None, :] + _CORNERS[None]) * step).reshape(-1, 3)
        flat = np.unique(np.ravel_multi_index(idx.T, (n, n, n)))
        flat = flat[~evaluated.ravel()[flat]]
        if len(flat):
            ijk = np.stack(np.unravel_index(flat, (n, n, n)), axis=1)
            values.ravel()[flat] = _evaluate(counter, lo + ijk * spacing)
            evaluated.ravel()[flat] = True

    step = ratio
    cells = np.argwhere(np.ones((base_res,) * 3, dtype=bool))
    ensure(cells, step)
    active = _dilate(_mixed_cells(values, evaluated, cells, step), base_res)
    while step > 1:
        step //= 2
        n_cells = target_res // step
        children = (active[:, None, :] * 2 + _CORNERS[None]).reshape(-1, 3)
        ensure(children, step)
        mixed = _mixed_cells(values, evaluated, children, step)
        active = _dilate(mixed, n_cells)
        ensure(active, step)
    if ratio == 1:
        ensure(active, 1)
    if not evaluated.all():
        _, nearest = ndimage.distance_transform_edt(~evaluated, return_indices=True)
        src = values[nearest[0], nearest[1], nearest[2]]
        values = np.where(evaluated, values, np.where(src < 0, -1.0, 1.0))
    mesh = _triangulate(values, lo, spacing)
    return (mesh, counter.count) if return_count else mesh


def watertight_check(mesh):
    """Counts of boundary edges (used once) and non-manifold edges (used > 2 times)."""
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    boundary = int(np.sum(counts == 1))
    nonmanifold = int(np.sum(counts > 2))
    return {"boundary_edges": boundary, "nonmanifold_edges": nonmanifold,
            "watertight": boundary == 0 and nonmanifold == 0 and len(t) > 0}


# --- OBJ ----------------------------------------------------------------------


def save_obj(mesh, path):
    lines = ["# sdfgrasp mesh"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path):
    verts, faces = [], []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        try:
            if tag == "v":
                if len(parts) < 4:
                    raise ValueError("vertex needs three coordinates")
                verts.append([float(p) for p in parts[1:4]])
            elif tag == "f":
                if len(parts) != 4:
                    raise ValueError("only triangular faces are supported")
                idx = [int(p.split("/")[0]) for p in parts[1:4]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if min(idx) < 0 or max(idx) >= len(verts):
                    raise ValueError("face references an undefined vertex")
                faces.append(idx)
            elif tag in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib"):
                continue
            else:
                raise ValueError(f"unknown record {tag!r}")
        except ValueError as exc:
            raise ObjParseError(f"{path}: line {lineno}: {exc}") from None
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))

"""Analytic signed distance fields, primitive scenes and baked trilinear grids.

Every field exposes ``value(x)`` and ``gradient(x)`` on ``(3,)`` or ``(N, 3)``
inputs; ``value_and_gradient`` returns both from one pass.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .transforms import RigidTransform

TIE_AXIS = np.array([0.0, 0.0, 1.0])
MAX_GRID_NODES = 1024 ** 3


def _as_points(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(1, 3) if x.ndim == 1 else x


def _unit_or_tie(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = n > 1e-15
    return np.where(safe, v / np.where(safe, n, 1.0), TIE_AXIS)


class SdfField:
    """Base class: subclasses implement ``_eval(points) -> (values, gradients)``."""

    def _eval(self, p):
        raise NotImplementedError

    def value_and_gradient(self, x):
        x = np.asarray(x, dtype=float)
        v, g = self._eval(_as_points(x))
        if x.ndim == 1:
            return float(v[0]), g[0]
        return v, g

    def value(self, x):
        return self.value_and_gradient(x)[0]

    def gradient(self, x):
        return self.value_and_gradient(x)[1]

    def __call__(self, x):
        return self.value(x)


# --- primitives (local frame, axis along z) ---------------------------------


@dataclass(frozen=True)
class Sphere:
    radius: float
    kind = "sphere"

    def local(self, p):
        return np.linalg.norm(p, axis=1) - self.radius, _unit_or_tie(p)

    def contains(self, p):
        return np.sum(p * p, axis=1) < self.radius ** 2

    def bounding_radius(self):
        return self.radius

    def area_parts(self):
        return [4 * np.pi * self.radius ** 2]

    def sample_surface(self, n, rng):
        v = rng.normal(size=(n, 3))
        v = _unit_or_tie(v)
        return v * self.radius, v

    def params(self):
        return {"radius": self.radius}


@dataclass(frozen=True)
class Box:
    half_extents: tuple
    kind = "box"

    def local(self, p):
        b = np.asarray(self.half_extents, dtype=float)
        q = np.abs(p) - b
        sgn = np.where(p >= 0, 1.0, -1.0)
        outside = np.maximum(q, 0.0)
        out_len = np.linalg.norm(outside, axis=1)
        # ties prefer z, then y, then x (canonical tie axis)
        dom = 2 - np.argmax(q[:, ::-1], axis=1)
        inside_val = q[np.arange(len(p)), dom]
        val = out_len + np.minimum(inside_val, 0.0)
        g_out = sgn * outside / np.where(out_len > 0, out_len, 1.0)[:, None]
        g_in = np.zeros_like(p)
        g_in[np.arange(len(p)), dom] = sgn[np.arange(len(p)), dom]
        grad = np.where((out_len > 0)[:, None], g_out, g_in)
        return val, grad

    def contains(self, p):
        return np.all(np.abs(p) < np.asarray(self.half_extents), axis=1)

    def bounding_radius(self):
        return float(np.linalg.norm(self.half_extents))

    def sample_surface(self, n, rng):
        b = np.asarray(self.half_extents, dtype=float)
        areas = np.array([b[1] * b[2], b[0] * b[2], b[0] * b[1]]).repeat(2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        axis, side = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
        pts = rng.uniform(-1, 1, size=(n, 3)) * b
        normals = np.zeros((n, 3))
        pts[np.arange(n), axis] = side * b[axis]
        normals[np.arange(n), axis] = side
        return pts, normals

    def params(self):
        return {"half_extents": [float(x) for x in self.half_extents]}


@dataclass(frozen=True)
class Cylinder:
    radius: float
    half_height: float
    kind = "cylinder"

    def local(self, p):
        rxy = np.linalg.norm(p[:, :2], axis=1)
        d = np.stack([rxy - self.radius, np.abs(p[:, 2]) - self.half_height], axis=1)
        outside = np.maximum(d, 0.0)
        out_len = np.linalg.norm(outside, axis=1)
        val = out_len + np.minimum(np.max(d, axis=1), 0.0)
        radial = np.zeros_like(p)
        has_r = rxy > 1e-15
        radial[has_r, :2] = p[has_r, :2] / rxy[has_r, None]
        radial[~has_r] = TIE_AXIS
        axial = np.zeros_like(p)
        axial[:, 2] = np.where(p[:, 2] >= 0, 1.0, -1.0)
        g_out = (radial * outside[:, :1] + axial * outside[:, 1:]) / np.where(out_len > 0, out_len, 1.0)[:, None]
        g_in = np.where((d[:, 0] > d[:, 1])[:, None], radial, axial)
        grad = np.where((out_len > 0)[:, None], g_out, g_in)
        return val, grad

    def contains(self, p):
        return (np.sum(p[:, :2] ** 2, axis=1) < self.radius ** 2) & (np.abs(p[:, 2]) < self.half_height)

    def bounding_radius(self):
        return float(np.hypot(self.radius, self.half_height))

    def sample_surface(self, n, rng):
        r, h = self.radius, self.half_height
        areas = np.array([2 * np.pi * r * 2 * h, np.pi * r * r, np.pi * r * r])
        part = rng.choice(3, size=n, p=areas / areas.sum())
        th = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.zeros((n, 3))
        normals = np.zeros((n, 3))
        side = part == 0
        pts[side] = np.stack([r * np.cos(th[side]), r * np.sin(th[side]), rng.uniform(-h, h, side.sum())], axis=1)
        normals[side] = np.stack([np.cos(th[side]), np.sin(th[side]), np.zeros(side.sum())], axis=1)
        cap = ~side
        rad = r * np.sqrt(rng.uniform(0, 1, cap.sum()))
        zs = np.where(part[cap] == 1, h, -h)
        pts[cap] = np.stack([rad * np.cos(th[cap]), rad * np.sin(th[cap]), zs], axis=1)
        normals[cap, 2] = np.sign(zs)
        return pts, normals

    def params(self):
        return {"radius": self.radius, "half_height": self.half_height}


@dataclass(frozen=True)
class Capsule:
    radius: float
    half_height: float
    kind = "capsule"

    def local(self, p):
        c = np.zeros_like(p)
        c[:, 2] = np.clip(p[:, 2], -self.half_height, self.half_height)
        d = p - c
        return np.linalg.norm(d, axis=1) - self.radius, _unit_or_tie(d)

    def contains(self, p):
        return self.local(p)[0] < 0

    def bounding_radius(self):
        return self.radius + self.half_height

    def sample_surface(self, n, rng):
        r, h = self.radius, self.half_height
        a_side, a_caps = 2 * np.pi * r * 2 * h, 4 * np.pi * r * r
        on_side = rng.uniform(size=n) < a_side / (a_side + a_caps)
        v = _unit_or_tie(rng.normal(size=(n, 3)))
        pts = v * r
        normals = v.copy()
        th = rng.uniform(0, 2 * np.pi, size=n)
        normals[on_side] = np.stack([np.cos(th), np.sin(th), np.zeros(n)], axis=1)[on_side]
        pts[on_side] = normals[on_side] * r
        pts[on_side, 2] = rng.uniform(-h, h, on_side.sum())
        pts[~on_side, 2] += np.where(v[~on_side, 2] >= 0, h, -h)
        return pts, normals

    def params(self):
        return {"radius": self.radius, "half_height": self.half_height}


PRIMITIVES = {"sphere": Sphere, "box": Box, "cylinder": Cylinder, "capsule": Capsule}


def make_primitive(kind, **params):
    if kind not in PRIMITIVES:
        raise ValueError(f"unknown primitive type {kind!r}")
    if kind == "box":
        he = tuple(float(x) for x in params["half_extents"])
        if len(he) != 3 or min(he) <= 0:
            raise ValueError("box half extents must be three positive numbers")
        return Box(he)
    prim = PRIMITIVES[kind](**{k: float(v) for k, v in params.items()})
    if min(prim.params().values()) <= 0:
        raise ValueError(f"{kind} dimensions must be positive")
    return prim


@dataclass(frozen=True)
class SceneObject:
    primitive: object
    pose: RigidTransform = field(default_factory=RigidTransform)
    tag: str = ""


class PrimitiveScene(SdfField):
    """Union of posed primitives. Interior of overlapping members is the min (a lower bound)."""

    def __init__(self, objects=()):
        self.objects = list(objects)
        tags = [o.tag for o in self.objects]
        if len(set(tags)) != len(tags):
            raise ValueError("scene tags must be unique")

    def add(self, primitive, pose=None, tag=None):
        tag = tag if tag is not None else f"obj{len(self.objects)}"
        if any(o.tag == tag for o in self.objects):
            raise ValueError(f"duplicate tag {tag!r}")
        self.objects.append(SceneObject(primitive, pose or RigidTransform(), tag))
        return self

    def subset(self, tags=None, exclude=()):
        keep = [o for o in self.objects if (tags is None or o.tag in tags) and o.tag not in exclude]
        return PrimitiveScene(keep)

    def __len__(self):
        return len(self.objects)

    def member(self, tag):
        return PrimitiveScene([o for o in self.objects if o.tag == tag])

    def member_values(self, p):
        """Per-member values and world gradients: shapes (M, N) and (M, N, 3)."""
        p = _as_points(p)
        vals, grads = [], []
        for obj in self.objects:
            R = obj.pose.rotation
            local = (p - obj.pose.t) @ R
            v, g = obj.primitive.local(local)
            vals.append(v)
            grads.append(g @ R.T)
        return np.array(vals), np.array(grads)

    def _eval(self, p):
        if not self.objects:
            return np.full(len(p), np.inf), np.tile(TIE_AXIS, (len(p), 1))
        vals, grads = self.member_values(p)
        i = np.argmin(vals, axis=0)
        idx = np.arange(len(p))
        return vals[i, idx], grads[i, idx]

    def contains(self, x):
        p = _as_points(x)
        inside = np.zeros(len(p), dtype=bool)
        for obj in self.objects:
            inside |= obj.primitive.contains(obj.pose.apply_inverse(p))
        return inside

    def transformed(self, T):
        return PrimitiveScene([SceneObject(o.primitive, T @ o.pose, o.tag) for o in self.objects])

    def bounding_sphere(self):
        centers = np.array([o.pose.t for o in self.objects])
        c = centers.mean(axis=0)
        r = max(np.linalg.norm(o.pose.t - c) + o.primitive.bounding_radius() for o in self.objects)
        return c, r

    def sample_surface(self, n, rng):
        """Area-proportional samples on member surfaces that lie on the union boundary."""
        parts = [_surface_area(o.primitive) for o in self.objects]
        weights = np.array(parts) / sum(parts)
        counts = rng.multinomial(n, weights)
        pts, normals = [], []
        for obj, k in zip(self.objects, counts):
            if k == 0:
                continue
            lp, ln = obj.primitive.sample_surface(k, rng)
            pts.append(obj.pose.apply(lp))
            normals.append(ln @ obj.pose.rotation.T)
        return np.concatenate(pts), np.concatenate(normals)

    def to_dict(self):
        return {"objects": [
            {"type": o.primitive.kind, **o.primitive.params(), "pose": o.pose.to_dict(), "tag": o.tag}
            for o in self.objects
        ]}

    @classmethod
    def from_dict(cls, d):
        objs = []
        for entry in d["objects"]:
            entry = dict(entry)
            kind = entry.pop("type")
            pose = RigidTransform.from_dict(entry.pop("pose", {}))
            tag = entry.pop("tag", f"obj{len(objs)}")
            objs.append(SceneObject(make_primitive(kind, **entry), pose, tag))
        return cls(objs)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _surface_area(prim):
    if isinstance(prim, Sphere):
        return 4 * np.pi * prim.radius ** 2
    if isinstance(prim, Box):
        a, b, c = prim.half_extents
        return 8 * (a * b + b * c + a * c)
    if isinstance(prim, Cylinder):
        return 2 * np.pi * prim.radius * (2 * prim.half_height + prim.radius)
    return 4 * np.pi * prim.radius * (prim.radius + prim.half_height)


def eval_sdf(scene, x):
    return scene.value(x)


def eval_sdf_gradient(scene, x):
    return scene.gradient(x)


# --- baked grids -------------------------------------------------------------


class GridSdf(SdfField):
    """Node-sampled field with trilinear interpolation.

    Queries outside ``bounds`` are clamped to the box and the distance to the
    box is added to the interpolated value; the gradient there is the clamped
    gradient plus the outward direction to the box.
    """

    def __init__(self, lo, hi, values):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("grid resolution must be at least 2 per axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")
        self.resolution = np.array(self.values.shape)
        self.spacing = (self.hi - self.lo) / (self.resolution - 1)

    def node_positions(self):
        axes = [np.linspace(self.lo[i], self.hi[i], self.resolution[i]) for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def _eval(self, p):
        clamped = np.clip(p, self.lo, self.hi)
        outside = p - clamped
        dist = np.linalg.norm(outside, axis=1)
        f = (clamped - self.lo) / self.spacing
        i0 = np.clip(np.floor(f).astype(int), 0, self.resolution - 2)
        t = f - i0
        V = self.values
        x0, y0, z0 = i0.T
        c = np.empty((len(p), 2, 2, 2))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c[:, dx, dy, dz] = V[x0 + dx, y0 + dy, z0 + dz]
        tx, ty, tz = t.T
        cx = c[:, 0] * (1 - tx)[:, None, None] + c[:, 1] * tx[:, None, None]
        cxy = cx[:, 0] * (1 - ty)[:, None] + cx[:, 1] * ty[:, None]
        val = cxy[:, 0] * (1 - tz) + cxy[:, 1] * tz
        # analytic derivatives of the trilinear form
        dcx = (c[:, 1] - c[:, 0])
        gx = ((dcx[:, 0, 0] * (1 - ty) + dcx[:, 1, 0] * ty) * (1 - tz)
              + (dcx[:, 0, 1] * (1 - ty) + dcx[:, 1, 1] * ty) * tz)
        gy = (cx[:, 1, 0] - cx[:, 0, 0]) * (1 - tz) + (cx[:, 1, 1] - cx[:, 0, 1]) * tz
        gz = cxy[:, 1] - cxy[:, 0]
        grad = np.stack([gx, gy, gz], axis=1) / self.spacing
        out = dist > 0
        if np.any(out):
            grad[out] = np.where(outside[out] != 0, 0.0, grad[out]) + outside[out] / dist[out, None]
            val = val + dist
        return val, grad

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(b"GRID")
            fh.write(struct.pack("<6d", *self.lo, *self.hi))
            fh.write(struct.pack("<3I", *self.resolution))
            fh.write(self.values.astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if data[:4] != b"GRID":
            raise ValueError("not a GRID file")
        bounds = struct.unpack_from("<6d", data, 4)
        res = struct.unpack_from("<3I", data, 52)
        vals = np.frombuffer(data, dtype="<f4", offset=64).astype(float)
        if vals.size != int(np.prod(res)):
            raise ValueError("GRID payload size does not match resolution")
        return cls(bounds[:3], bounds[3:], vals.reshape(res))


def bake_grid(field_, lo, hi, resolution):
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    if np.any(res < 2):
        raise ValueError("resolution must be at least 2 per axis")
    if int(np.prod(res)) > MAX_GRID_NODES:
        raise ValueError("grid resolution exceeds 1024^3 nodes")
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    axes = [np.linspace(lo[i], hi[i], res[i]) for i in range(3)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.empty(len(nodes))
    for s in range(0, len(nodes), 1 << 18):
        vals[s:s + (1 << 18)] = field_.value(nodes[s:s + (1 << 18)])
    return GridSdf(lo, hi, vals.reshape(tuple(res)))


def grid_eval(grid, x):
    return grid.value(x)


def grid_gradient(grid, x):
    return grid.gradient(x)


class BallUnionField(SdfField):
    """Distance to a union of equal balls centred on observed points."""

    def __init__(self, points, radius=0.005):
        self.points = np.asarray(points, dtype=float)
        if len(self.points) == 0:
            raise ValueError("ball union needs at least one point")
        self.radius = float(radius)
        self._tree = cKDTree(self.points)

    def _eval(self, p):
        d, i = self._tree.query(p)
        return d - self.radius, _unit_or_tie(p - self.points[i])


class TransformedField(SdfField):
    """A field defined in a local frame, queried in the parent frame."""

    def __init__(self, field_, pose):
        self.field = field_
        self.pose = pose

    def _eval(self, p):
        v, g = self.field._eval(self.pose.apply_inverse(p))
        return v, g @ self.pose.rotation.T

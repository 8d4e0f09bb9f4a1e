"""Synthetic single-view observations: sphere-traced depth, depth noise,
pinhole backprojection and unit-box normalization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .transforms import RigidTransform

SPHERE_TRACE_STEPS = 256
SPHERE_TRACE_TOL = 1e-5
DEFAULT_SIGMA0 = 0.002
DEPTH_UNIT = 1e-4  # PGM-16 stores depth in 0.1 mm steps


class NoObservationError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, width=128, height=96, fov_x_deg=45.0):
        fx = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
        return cls(fx, fx, width / 2, height / 2, width, height)

    def to_dict(self):
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


@dataclass
class DepthImage:
    depths: np.ndarray
    intrinsics: CameraIntrinsics
    pose: RigidTransform = field(default_factory=RigidTransform)

    def save(self, path):
        """PGM (P5, 16-bit big-endian) plus a ``.json`` sidecar."""
        path = Path(path)
        raw = np.clip(np.round(self.depths / DEPTH_UNIT), 0, 65535).astype(">u2")
        h, w = raw.shape
        path.write_bytes(f"P5\n{w} {h}\n65535\n".encode() + raw.tobytes())
        sidecar = {"intrinsics": self.intrinsics.to_dict(), "pose": self.pose.to_dict(), "depth_unit": DEPTH_UNIT}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path):
        path = Path(path)
        data = path.read_bytes()
        tokens, pos = [], 0
        while len(tokens) < 4:
            while data[pos:pos + 1].isspace():
                pos += 1
            start = pos
            while not data[pos:pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos].decode())
        if tokens[0] != "P5" or int(tokens[3]) != 65535:
            raise ValueError("expected a 16-bit binary PGM")
        w, h = int(tokens[1]), int(tokens[2])
        raw = np.frombuffer(data, ">u2", w * h, pos + 1).reshape(h, w)
        meta = json.loads(path.with_suffix(".json").read_text())
        intr = CameraIntrinsics(**meta["intrinsics"])
        return cls(raw.astype(float) * meta.get("depth_unit", DEPTH_UNIT), intr, RigidTransform.from_dict(meta["pose"]))


@dataclass
class PointCloud:
    """Points in the frame named by ``frame``; ``pose`` maps that frame to world."""

    points: np.ndarray
    frame: str = "world"
    pose: RigidTransform = field(default_factory=RigidTransform)

    def world_points(self):
        return self.pose.apply(self.points)

    def __len__(self):
        return len(self.points)

    def save_ply(self, path):
        lines = ["ply", "format ascii 1.0", f"comment frame {self.frame}",
                 f"comment pose {json.dumps(self.pose.to_dict())}",
                 f"element vertex {len(self.points)}",
                 "property double x", "property double y", "property double z", "end_header"]
        lines += [f"{x!r} {y!r} {z!r}" for x, y, z in self.points.tolist()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_ply(cls, path):
        lines = Path(path).read_text().splitlines()
        frame, pose, n, i = "world", RigidTransform(), 0, 0
        while lines[i] != "end_header":
            parts = lines[i].split(maxsplit=2)
            if parts[:2] == ["comment", "frame"]:
                frame = parts[2]
            elif parts[:2] == ["comment", "pose"]:
                pose = RigidTransform.from_dict(json.loads(parts[2]))
            elif parts[:2] == ["element", "vertex"]:
                n = int(parts[2])
            i += 1
        body = lines[i + 1:i + 1 + n]
        pts = np.array([[float(v) for v in line.split()[:3]] for line in body]).reshape(-1, 3)
        return cls(pts, frame, pose)


@dataclass
class NormalizedCloud:
    """Cloud in the object frame: camera axes, origin at the centroid, uniformly scaled.

    ``normalized = scale * R_frame^T (world - origin)``, so a cloud of extent 2 m
    gets scale 0.5 and world distances are normalized distances divided by scale.
    """

    points: np.ndarray
    centroid: np.ndarray
    scale: float
    frame_pose: RigidTransform
    source_pose: RigidTransform = field(default_factory=RigidTransform)
    raw_extent: float = 0.0

    def normalize(self, x_world):
        return self.scale * self.frame_pose.apply_inverse(x_world)

    def unnormalize(self, x_norm):
        return self.frame_pose.apply(np.asarray(x_norm) / self.scale)

    def to_source(self, x_norm):
        """Back to the source cloud's own frame (inverse of the normalization)."""
        return np.asarray(x_norm) / self.scale + self.centroid

    @property
    def size_scalar(self):
        """Bounding-box diagonal of the raw cloud in meters."""
        return self.raw_extent

    def metadata(self):
        return {"centroid": [float(x) for x in self.centroid], "scale": float(self.scale),
                "frame_pose": self.frame_pose.to_dict(), "size": float(self.raw_extent)}


def camera_rays(intr):
    """Unit ray directions in the camera frame, shape (H, W, 3), and their z components."""
    u, v = np.meshgrid(np.arange(intr.width, dtype=float), np.arange(intr.height, dtype=float))
    d = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d, d[..., 2]


def render_depth(scene, pose, intr, max_depth=5.0, steps=SPHERE_TRACE_STEPS, tol=SPHERE_TRACE_TOL):
    """Sphere-trace ``scene`` from a camera at ``pose``; depth is the hit's camera z (0 = miss)."""
    dirs, dz = camera_rays(intr)
    dirs = dirs.reshape(-1, 3)
    depth = np.zeros(len(dirs))
    if len(scene) == 0:
        return DepthImage(depth.reshape(intr.height, intr.width), intr, pose)
    world_dirs = dirs @ pose.rotation.T
    t = np.zeros(len(dirs))
    active = np.arange(len(dirs))
    hit = np.zeros(len(dirs), dtype=bool)
    for _ in range(steps):
        if active.size == 0:
            break
        p = pose.t + world_dirs[active] * t[active, None]
        d = scene.value(p)
        done = d < tol
        hit[active[done]] = True
        t[active] += np.where(done, 0.0, d)
        active = active[~done & (t[active] < max_depth)]
    if active.size:
        p = pose.t + world_dirs[active] * t[active, None]
        hit[active[np.abs(scene.value(p)) < 1e-4]] = True
    depth[hit] = t[hit] * dz.reshape(-1)[hit]
    return DepthImage(depth.reshape(intr.height, intr.width), intr, pose)


def noise_sigma(z, sigma0):
    return sigma0 * (1.0 + (z - 0.4) ** 2 / 0.16)


def add_noise(img, sigma0=DEFAULT_SIGMA0, seed=0):
    if sigma0 < 0:
        raise ValueError("sigma0 must be nonnegative")
    rng = np.random.default_rng(seed)
    z = img.depths
    noisy = z + rng.normal(size=z.shape) * noise_sigma(z, sigma0)
    noisy = np.where(z > 0, np.maximum(noisy, 0.0), 0.0)
    return DepthImage(noisy, img.intrinsics, img.pose)


def backproject(img):
    z = img.depths
    v, u = np.nonzero(z > 0)
    if len(u) == 0:
        raise NoObservationError("depth image has no valid pixels")
    intr = img.intrinsics
    d = z[v, u]
    pts = np.stack([(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d], axis=1)
    return PointCloud(pts, "camera", img.pose)


def normalize_cloud(cloud):
    pts = np.asarray(cloud.points, dtype=float)
    if len(pts) == 0:
        raise NoObservationError("cannot normalize an empty cloud")
    c = pts.mean(axis=0)
    half = np.max(np.abs(pts - c))
    if not half > 1e-12:
        raise ValueError("degenerate cloud with zero extent")
    scale = 0.5 / half
    origin = cloud.pose.apply(c)
    extent = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    return NormalizedCloud((pts - c) * scale, c, scale, RigidTransform(cloud.pose.q, origin), cloud.pose, extent)


def unnormalize(nc):
    return nc.to_source(nc.points)


def subsample(points, max_points, rng):
    if len(points) <= max_points:
        return points
    return points[np.sort(rng.choice(len(points), max_points, replace=False))]


def sample_sdf_labels(scene, frame, n_surface, n_free, seed=0, jitter=0.025, free_half_extent=0.5):
    """Query points in normalized coordinates with SDF labels scaled into that frame."""
    if n_surface < 0 or n_free < 0:
        raise ValueError("sample counts must be nonnegative")
    rng = np.random.default_rng(seed)
    queries = []
    if n_surface:
        surf, _ = scene.sample_surface(n_surface, rng)
        queries.append(frame.normalize(surf) + rng.normal(scale=jitter, size=(n_surface, 3)))
    if n_free:
        queries.append(rng.uniform(-free_half_extent, free_half_extent, size=(n_free, 3)))
    if not queries:
        return np.zeros((0, 3)), np.zeros(0)
    q = np.concatenate(queries)
    labels = np.clip(scene.value(frame.unnormalize(q)) * frame.scale, -1.0, 1.0)
    return q, labels

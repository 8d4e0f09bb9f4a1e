"""Procedural training corpus for the implicit-surface model: rendered views of primitives."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import (CameraIntrinsics, NoObservationError, PointCloud, add_noise, backproject, normalize_cloud,
                     render_depth, sample_sdf_labels)
from .scenes import make_shapes, random_view
from .sdf import PrimitiveScene
from .transforms import RigidTransform


@dataclass
class CorpusConfig:
    families: tuple = ("sphere", "box")
    shapes_per_family: int = 10
    views_per_shape: int = 50
    n_surface: int = 512
    n_free: int = 512
    free_half_extent: float = 1.0
    sigma0: float = 0.002
    image_width: int = 96
    image_height: int = 72
    fov_x_deg: float = 30.0
    seed: int = 0

    def intrinsics(self):
        return CameraIntrinsics.default(self.image_width, self.image_height, self.fov_x_deg)


@dataclass
class SdfView:
    cloud: object
    queries: np.ndarray
    labels: np.ndarray
    scene: PrimitiveScene
    shape_index: int
    view_index: int
    meta: dict = field(default_factory=dict)

    def as_training_triple(self):
        return self.cloud, self.queries, self.labels


def render_view(scene, cam, intr, sigma0, seed):
    img = render_depth(scene, cam, intr)
    if sigma0 > 0:
        img = add_noise(img, sigma0, seed)
    return normalize_cloud(backproject(img))


def build_views(shapes, views_per_shape, cfg, seed, start_view=0):
    """Render ``views_per_shape`` random orientations of every shape."""
    intr = cfg.intrinsics()
    out = []
    for si, shape in enumerate(shapes):
        rng = np.random.default_rng([seed, si])
        vi = 0
        while vi < views_per_shape + start_view:
            scene, cam = random_view(shape.primitive, rng)
            sub = int(rng.integers(2 ** 31))
            if vi < start_view:
                vi += 1
                continue
            try:
                nc = render_view(scene, cam, intr, cfg.sigma0, sub)
            except (NoObservationError, ValueError):
                continue
            q, lab = sample_sdf_labels(scene, nc, cfg.n_surface, cfg.n_free, sub,
                                       free_half_extent=cfg.free_half_extent)
            out.append(SdfView(nc, q, lab, scene, si, vi, {"family": shape.family}))
            vi += 1
    return out


def build_corpus(cfg):
    """Training views plus a held-out split of fresh orientations of the same shapes."""
    shapes = make_shapes(cfg.families, cfg.shapes_per_family, cfg.seed)
    train = build_views(shapes, cfg.views_per_shape, cfg, cfg.seed)
    return shapes, train


def heldout_views(shapes, n_views, cfg):
    """Orientations drawn from an RNG stream disjoint from the training one."""
    return build_views(shapes, n_views, cfg, cfg.seed + 1_000_003)


def tabletop_views(shapes, views_per_shape, cfg, seed, cameras=("high", "low")):
    """Tabletop observations (table points segmented away) with labels from the object alone.

    These match what the planner sees, so a model trained on them serves the
    reconstruction constraint directly.
    """
    from .grasp_data import observe
    from .scenes import OBJECT_TAG, tabletop_scene

    out = []
    for si, shape in enumerate(shapes):
        rng = np.random.default_rng([seed, si])
        for vi in range(views_per_shape):
            scene = tabletop_scene(shape.primitive, yaw=float(rng.uniform(-np.pi, np.pi)))
            cam = cameras[vi % len(cameras)]
            sub = int(rng.integers(2 ** 31))
            try:
                nc = observe(scene, cam, cfg.sigma0, sub)
            except NoObservationError:
                continue
            obj = scene.member(OBJECT_TAG)
            q, lab = sample_sdf_labels(obj, nc, cfg.n_surface, cfg.n_free, sub, free_half_extent=cfg.free_half_extent)
            out.append(SdfView(nc, q, lab, obj, si, vi, {"family": shape.family, "camera": cam}))
    return out


def corpus_hash(views):
    h = hashlib.sha256()
    for v in views:
        h.update(np.ascontiguousarray(v.cloud.points).tobytes())
        h.update(np.ascontiguousarray(v.queries).tobytes())
        h.update(np.ascontiguousarray(v.labels).tobytes())
    return h.hexdigest()


def view_iou(model, view, n=20_000, seed=0, bounds=1.0):
    """Volumetric IoU of predicted vs. true occupancy in the normalized box [-b, b]^3."""
    from .metrics import volumetric_iou

    emb = model.embed(view.cloud)
    lo, hi = (-bounds,) * 3, (bounds,) * 3
    return volumetric_iou(lambda x: model.predict_sdf(emb, x) < 0,
                          lambda x: view.scene.value(view.cloud.unnormalize(x)) < 0,
                          (lo, hi), n, seed)


def save_corpus(views, cfg, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = []
    for k, v in enumerate(views):
        stem = f"view_{k:05d}"
        PointCloud(v.cloud.points, "normalized", RigidTransform()).save_ply(d / f"{stem}.ply")
        np.savez(d / f"{stem}.npz", queries=v.queries, labels=v.labels)
        v.scene.save(d / f"{stem}_scene.json")
        index.append({"stem": stem, "shape": v.shape_index, "view": v.view_index, "frame": v.cloud.metadata(),
                      **v.meta})
    manifest = {"config": asdict(cfg), "views": index, "hash": corpus_hash(views)}
    (d / "corpus.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest

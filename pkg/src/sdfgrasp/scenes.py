"""Desk world layout and the procedural primitive corpus.

World frame is the robot base frame. The table top sits 10 cm below the base;
objects rest on it in front of the robot and the camera looks back toward the
robot from the far side of the table, so grasps from the robot side approach
the occluded half of the object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics
from .sdf import Box, Cylinder, PrimitiveScene, Sphere
from .transforms import RigidTransform, random_rotation, rot_z

TABLE_TOP = -0.10
TABLE_TAG = "table"
OBJECT_TAG = "object"
OBJECT_XY = np.array([0.70, 0.0])
CAMERA_EYES = {
    "high": np.array([1.40, 0.0, 0.40]),
    "low": np.array([1.40, 0.0, -0.05]),
}
FAMILIES = ("sphere", "box", "cylinder")


def table_box():
    return Box((0.5, 0.6, 0.05)), RigidTransform(t=[0.8, 0.0, TABLE_TOP - 0.05])


def default_intrinsics():
    return CameraIntrinsics.default(width=160, height=120, fov_x_deg=40.0)


def random_primitive(family, rng):
    if family == "sphere":
        return Sphere(float(rng.uniform(0.03, 0.045)))
    if family == "box":
        he = rng.uniform(0.02, 0.05, size=3)
        return Box(tuple(float(x) for x in he))
    if family == "cylinder":
        return Cylinder(float(rng.uniform(0.025, 0.04)), float(rng.uniform(0.03, 0.06)))
    raise ValueError(f"unknown shape family {family!r}")


def graspable_primitive(family, rng):
    """Objects sized for the hand: tall enough that side grasps clear the table."""
    if family == "sphere":
        return Sphere(float(rng.uniform(0.035, 0.05)))
    if family == "box":
        he = rng.uniform(0.025, 0.045, size=2)
        return Box((float(he[0]), float(he[1]), float(rng.uniform(0.05, 0.09))))
    if family == "cylinder":
        return Cylinder(float(rng.uniform(0.025, 0.04)), float(rng.uniform(0.05, 0.09)))
    raise ValueError(f"unknown shape family {family!r}")


def resting_height(prim):
    """Center height above the table for the primitive's canonical upright pose."""
    if isinstance(prim, Sphere):
        return prim.radius
    if isinstance(prim, Box):
        return prim.half_extents[2]
    return prim.half_height


def tabletop_scene(prim, yaw=0.0, xy=None, with_table=True):
    xy = OBJECT_XY if xy is None else np.asarray(xy, dtype=float)
    scene = PrimitiveScene()
    pose = RigidTransform.from_matrix(rot_z(yaw), [xy[0], xy[1], TABLE_TOP + resting_height(prim)])
    scene.add(prim, pose, OBJECT_TAG)
    if with_table:
        box, tpose = table_box()
        scene.add(box, tpose, TABLE_TAG)
    return scene


def camera_pose(preset, target):
    if preset not in CAMERA_EYES:
        raise ValueError(f"unknown camera preset {preset!r}")
    return RigidTransform.look_at(CAMERA_EYES[preset], target)


@dataclass
class ShapeSpec:
    family: str
    primitive: object


def make_shapes(families, per_family, seed, graspable=False):
    rng = np.random.default_rng(seed)
    make = graspable_primitive if graspable else random_primitive
    shapes = []
    for fam in families:
        for _ in range(per_family):
            shapes.append(ShapeSpec(fam, make(fam, rng)))
    return shapes


def grasp_scenes(families, per_family, seed):
    """Tabletop scenes of graspable objects at random yaw."""
    shapes = make_shapes(families, per_family, seed, graspable=True)
    rng = np.random.default_rng([seed, 1])
    return [tabletop_scene(s.primitive, yaw=float(rng.uniform(-np.pi, np.pi))) for s in shapes]


def random_view(prim, rng, distance=(0.5, 0.7)):
    """Object-only scene at a random orientation and a camera looking at it."""
    R = random_rotation(rng)
    scene = PrimitiveScene()
    scene.add(prim, RigidTransform.from_matrix(R, [0.0, 0.0, 0.0]), OBJECT_TAG)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    eye = direction * rng.uniform(*distance)
    up = (0.0, 0.0, 1.0) if abs(direction[2]) < 0.95 else (0.0, 1.0, 0.0)
    return scene, RigidTransform.look_at(eye, np.zeros(3), up)

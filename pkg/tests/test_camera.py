import numpy as np
import pytest

from sdfgrasp.camera import (CameraIntrinsics, DepthImage, NoObservationError, PointCloud, add_noise,
                             backproject, noise_sigma, normalize_cloud, render_depth, sample_sdf_labels)
from sdfgrasp.sdf import Box, PrimitiveScene, Sphere
from sdfgrasp.transforms import RigidTransform, random_rotation

INTR = CameraIntrinsics.default(64, 48, 45.0)


def _sphere_scene(depth=1.0, r=0.2):
    return PrimitiveScene().add(Sphere(r), RigidTransform(t=[0.0, 0.0, depth]))


def test_axial_ray_hits_front_of_sphere():
    img = render_depth(_sphere_scene(), RigidTransform(), INTR)
    assert img.depths[int(INTR.cy), int(INTR.cx)] == pytest.approx(0.8, abs=1e-4)


def test_empty_scene_renders_zeros():
    assert not np.any(render_depth(PrimitiveScene(), RigidTransform(), INTR).depths)


def test_hit_points_lie_on_surface():
    rng = np.random.default_rng(0)
    scene = PrimitiveScene().add(Box((0.1, 0.15, 0.2)), RigidTransform.from_matrix(random_rotation(rng), [0, 0, 0]))
    cam = RigidTransform.look_at([0.6, 0.3, 0.4], [0, 0, 0])
    cloud = backproject(render_depth(scene, cam, INTR))
    assert np.max(np.abs(scene.value(cloud.world_points()))) < 1e-4


def test_noiseless_sphere_backprojects_to_surface():
    cloud = backproject(render_depth(_sphere_scene(), RigidTransform(), INTR))
    assert np.max(np.abs(np.linalg.norm(cloud.points - [0, 0, 1.0], axis=1) - 0.2)) < 1e-3


def test_backprojection_arithmetic():
    d = np.zeros((INTR.height, INTR.width))
    d[int(INTR.cy), int(INTR.cx)] = 2.0
    cloud = backproject(DepthImage(d, INTR))
    assert len(cloud) == np.count_nonzero(d)
    assert any(np.allclose(p, [0, 0, 2.0]) for p in cloud.points)
    wide = CameraIntrinsics(10.0, 10.0, 5.0, 5.0, 20, 10)
    d = np.zeros((10, 20))
    d[5, 15] = 1.0
    np.testing.assert_allclose(backproject(DepthImage(d, wide)).points[0], [1, 0, 1])
    with pytest.raises(NoObservationError):
        backproject(DepthImage(np.zeros((10, 20)), wide))


def test_noise_model():
    img = DepthImage(np.full((400, 250), 0.8), INTR)
    assert np.array_equal(add_noise(img, 0.0, 1).depths, img.depths)
    a, b = add_noise(img, 0.002, 7), add_noise(img, 0.002, 7)
    assert np.array_equal(a.depths, b.depths)
    var = np.var(a.depths - 0.8)
    assert abs(var / noise_sigma(0.8, 0.002) ** 2 - 1) < 0.05
    holes = DepthImage(np.zeros((4, 4)), INTR)
    assert not np.any(add_noise(holes, 0.01, 0).depths)
    with pytest.raises(ValueError):
        add_noise(img, -1.0)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 5, 1, 4, 4)


def test_normalization_examples():
    cube = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    nc = normalize_cloud(PointCloud(cube))
    assert nc.scale == pytest.approx(1.0) and np.allclose(nc.centroid, 0)
    nc2 = normalize_cloud(PointCloud(cube * 2 + 3))
    assert nc2.scale == pytest.approx(0.5)
    assert np.all(np.abs(nc2.points) <= 0.5 + 1e-12)
    np.testing.assert_allclose(nc2.to_source(nc2.points), cube * 2 + 3, atol=1e-9)
    np.testing.assert_allclose(nc2.unnormalize(nc2.normalize(cube)), cube, atol=1e-9)
    again = normalize_cloud(PointCloud(nc2.points))
    assert abs(again.scale - 1.0) < 1e-9
    with pytest.raises(ValueError):
        normalize_cloud(PointCloud(np.ones((5, 3))))
    with pytest.raises(NoObservationError):
        normalize_cloud(PointCloud(np.zeros((0, 3))))


def test_depth_image_and_ply_round_trip(tmp_path):
    img = render_depth(_sphere_scene(), RigidTransform(t=[0.1, 0, 0]), INTR)
    img.save(tmp_path / "d.pgm")
    loaded = DepthImage.load(tmp_path / "d.pgm")
    assert np.max(np.abs(loaded.depths - img.depths)) <= 0.5e-4 + 1e-12
    assert loaded.pose.allclose(img.pose)
    cloud = backproject(img)
    cloud.save_ply(tmp_path / "c.ply")
    back = PointCloud.load_ply(tmp_path / "c.ply")
    np.testing.assert_array_equal(back.points, cloud.points)
    assert back.frame == "camera" and back.pose.allclose(cloud.pose)


def _view(scene, cam):
    return normalize_cloud(backproject(render_depth(scene, cam, INTR)))


def test_sdf_labels():
    scene = _sphere_scene(0.0, 0.2)
    cam = RigidTransform.look_at([0, 0, -1.0], [0, 0, 0], up=(0, 1, 0))
    nc = _view(scene, cam)
    q, lab = sample_sdf_labels(scene, nc, 300, 300, seed=1)
    assert q.shape == (600, 3) and np.all(np.abs(lab) <= 1)
    assert np.array_equal(lab < 0, scene.contains(nc.unnormalize(q)))
    on = nc.normalize(np.array([[0.2, 0.0, 0.0]]))
    assert abs(scene.value(nc.unnormalize(on))[0] * nc.scale) < 1e-6
    with pytest.raises(ValueError):
        sample_sdf_labels(scene, nc, -1, 0)


def test_labels_invariant_to_scene_scale():
    cam = RigidTransform.look_at([0, 0, -1.0], [0, 0, 0], up=(0, 1, 0))
    small = PrimitiveScene().add(Box((0.1, 0.15, 0.05)))
    big = PrimitiveScene().add(Box((0.2, 0.3, 0.1)))
    cam_big = RigidTransform.look_at([0, 0, -2.0], [0, 0, 0], up=(0, 1, 0))
    a, b = _view(small, cam), _view(big, cam_big)
    np.testing.assert_allclose(a.points, b.points, atol=1e-4)
    qa, la = sample_sdf_labels(small, a, 0, 200, seed=3)
    qb, lb = sample_sdf_labels(big, b, 0, 200, seed=3)
    np.testing.assert_array_equal(qa, qb)
    np.testing.assert_allclose(la, lb, atol=1e-3)


def test_rotating_scene_and_camera_together_leaves_pairs_unchanged():
    scene = PrimitiveScene().add(Box((0.1, 0.15, 0.05)))
    cam = RigidTransform.look_at([0.3, -0.8, 0.4], [0, 0, 0])
    T = RigidTransform.from_matrix(random_rotation(np.random.default_rng(5)), [0.2, 0.1, -0.3])
    a, b = _view(scene, cam), _view(scene.transformed(T), T @ cam)
    np.testing.assert_allclose(a.points, b.points, atol=1e-6)
    qa, la = sample_sdf_labels(scene, a, 100, 100, seed=2)
    qb, lb = sample_sdf_labels(scene.transformed(T), b, 100, 100, seed=2)
    np.testing.assert_allclose(qa, qb, atol=1e-6)
    np.testing.assert_allclose(la, lb, atol=1e-6)

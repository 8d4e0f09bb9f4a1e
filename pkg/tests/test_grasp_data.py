import numpy as np
import pytest

from sdfgrasp.camera import NoObservationError
from sdfgrasp.grasp_data import (
    ANTIPODAL_DOT,
    CONTACT_TOL,
    HandModel,
    config_from_palm,
    generate_dataset,
    label_grasp,
    label_hand,
    load_dataset,
    observe,
    palm_frame,
    sample_palm,
    save_dataset,
    split_by_scene,
)
from sdfgrasp.kinematics import chain_ready
from sdfgrasp.scenes import OBJECT_TAG, TABLE_TOP, grasp_scenes, tabletop_scene
from sdfgrasp.sdf import PrimitiveScene, Sphere
from sdfgrasp.transforms import RigidTransform

R_SPHERE = 0.04


@pytest.fixture(scope="module")
def sphere_scene():
    return tabletop_scene(Sphere(R_SPHERE))


@pytest.fixture(scope="module")
def sphere_data(sphere_scene, chain):
    return generate_dataset([sphere_scene], 200, 0, chain)


def _overhead(center, height, q0=0.0):
    qh = np.zeros(16)
    qh[[0, 1, 4, 5, 8, 9, 12, 13]] = q0
    return RigidTransform.from_matrix(palm_frame([0.0, 0.0, -1.0]), center + [0.0, 0.0, height]), qh


def test_far_palm_is_negative(sphere_scene, chain):
    c = sphere_scene.member(OBJECT_TAG).objects[0].pose.t
    T, qh = _overhead(c, 1.0)
    assert label_hand(sphere_scene, chain, T, qh) == 0


def test_penetrating_palm_is_negative(sphere_scene, chain):
    c = sphere_scene.member(OBJECT_TAG).objects[0].pose.t
    T = RigidTransform.from_matrix(np.eye(3), c)
    d = label_hand(sphere_scene, chain, T, np.zeros(16), detail=True)
    assert d.label == 0 and d.reason == "penetration" and d.penetration < 0


def test_enveloping_grasp_is_positive(sphere_scene, chain):
    c = sphere_scene.member(OBJECT_TAG).objects[0].pose.t
    T, qh = _overhead(c, 0.12)
    d = label_hand(sphere_scene, chain, T, qh, detail=True)
    assert d.label == 1
    # contacts re-derived from the sphere's closed form, independent of the scene SDF
    pts = np.array([k["point"] for k in d.contacts])
    dist = np.linalg.norm(pts - c, axis=1)
    assert len(pts) >= 2
    assert np.all(np.abs(dist - R_SPHERE) < CONTACT_TOL)
    normals = (pts - c) / dist[:, None]
    dots = normals @ normals.T
    assert dots[np.triu_indices(len(pts), 1)].min() <= ANTIPODAL_DOT


def test_label_is_deterministic(sphere_scene, chain):
    c = sphere_scene.member(OBJECT_TAG).objects[0].pose.t
    T, qh = _overhead(c, 0.12, 0.3)
    assert {label_hand(sphere_scene, chain, T, qh) for _ in range(3)} == {1}


def test_label_grasp_uses_forward_kinematics(sphere_scene, chain):
    q = np.concatenate([chain_ready(chain), np.full(len(chain.hand_indices), 0.2)])
    kin = chain.fk(q)
    direct = label_hand(sphere_scene, chain, kin.pose(chain.palm_index), q[chain.hand_indices])
    assert label_grasp(sphere_scene, chain, q) == direct


def test_hand_model_matches_chain(chain, rng):
    hand = HandModel(chain)
    q = np.zeros(chain.n_joints)
    q[chain.hand_indices] = rng.uniform(0, 1.0, size=16)
    kin = chain.fk(q)
    verts = hand.link_vertices(kin.pose(chain.palm_index), q[chain.hand_indices])
    for name, v in verts.items():
        li = chain.link_index[name]
        np.testing.assert_allclose(v, chain.vertices[name] @ kin.rotations[li].T + kin.origins[li], atol=1e-12)


def test_observe_segments_object(box_scene, box_obs):
    world = box_obs.unnormalize(box_obs.points)
    assert np.all(world[:, 2] > TABLE_TOP)
    obj = box_scene.member(OBJECT_TAG)
    assert np.percentile(np.abs(obj.value(world)), 95) < 0.01


def test_observe_empty_scene_raises(box_scene):
    with pytest.raises(NoObservationError):
        observe(box_scene.subset(exclude=(OBJECT_TAG,)), "high", 0.0, 0)


def test_sampled_palm_tags(sphere_scene):
    rng = np.random.default_rng(0)
    for want in ("side", "overhead"):
        T, tag = sample_palm(sphere_scene, rng, approach=want)
        assert tag == want
        approach = -T.rotation[:, 2]
        assert (approach[2] < -0.7) == (want == "overhead")


def test_config_from_palm_round_trip(box_obs):
    T = RigidTransform.from_matrix(palm_frame([1.0, 0.2, -0.3], 0.4), [0.6, 0.1, 0.05])
    g = config_from_palm(T, np.zeros(8), box_obs)
    back = box_obs.frame_pose @ RigidTransform.from_vec6(g.palm)
    assert back.allclose(T, atol=1e-9)


def test_both_labels_on_sphere(sphere_data):
    labels = {s.label for s in sphere_data}
    assert labels == {0, 1}
    assert {s.approach for s in sphere_data} == {"side", "overhead"}


def test_sample_configs_within_limits(sphere_data, chain):
    lo, hi = chain.lower[chain.hand_indices], chain.upper[chain.hand_indices]
    for s in sphere_data:
        assert np.all(s.q_h >= lo) and np.all(s.q_h <= hi)
        assert np.all((s.config.q_h_active >= 0) & (s.config.q_h_active <= 1.2))
        assert s.config.frame == sphere_data[0].config.frame


def test_dataset_deterministic(sphere_scene, chain):
    a = generate_dataset([sphere_scene], 20, 5, chain)
    b = generate_dataset([sphere_scene], 20, 5, chain)
    assert [s.record() for s in a] == [s.record() for s in b]
    c = generate_dataset([sphere_scene], 20, 6, chain)
    assert [s.record() for s in a] != [s.record() for s in c]


def test_per_scene_guard(sphere_scene, chain):
    with pytest.raises(ValueError):
        generate_dataset([sphere_scene], 0, 0, chain)


def test_split_by_scene_disjoint(chain):
    scenes = grasp_scenes(("sphere", "box"), 3, 0)
    data = generate_dataset(scenes, 4, 0, chain)
    train, test = split_by_scene(data, 0.34, 0)
    a, b = {s.scene_index for s in train}, {s.scene_index for s in test}
    assert a and b and not a & b
    assert len(train) + len(test) == len(data)


def test_save_load_round_trip(tmp_path, sphere_scene, chain):
    data = generate_dataset([sphere_scene, sphere_scene], 5, 1, chain)
    save_dataset(data, tmp_path / "g", [sphere_scene, sphere_scene])
    back = load_dataset(tmp_path / "g")
    assert [s.record() for s in back] == [s.record() for s in data]
    np.testing.assert_allclose(back[0].observation.points, data[0].observation.points, atol=1e-6)
    assert back[0].observation.scale == pytest.approx(data[0].observation.scale)
    assert PrimitiveScene.load(tmp_path / "g" / "scene_0000_scene.json").value(np.zeros((1, 3))) == \
        pytest.approx(sphere_scene.value(np.zeros((1, 3))))


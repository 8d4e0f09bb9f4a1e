"""Synthetic grasp dataset with an analytic success oracle.

The oracle checks a preshape for penetration, closes the two proximal joints
of every finger at an equal rate until each finger touches something, then
asks for fingertip contacts with roughly opposing surface normals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import NoObservationError, PointCloud, add_noise, backproject, normalize_cloud, render_depth
from .grasp_model import GraspConfig, frame_id
from .kinematics import JointConfig, finger_joint_indices, finger_link_names
from .scenes import OBJECT_TAG, TABLE_TOP, camera_pose, default_intrinsics
from .transforms import RigidTransform, matrix_to_euler_xyz

PENETRATION_TOL = 1e-4
CONTACT_TOL = 0.005
ANTIPODAL_DOT = -0.5
CLOSE_STEP = 1e-3
PRESHAPE_RANGE = (0.0, 1.2)
SEGMENT_MARGIN = 0.01
SEGMENT_RADIUS = 0.12
SIDE_MIN_HEIGHT = 0.055  # palm center above the table top for side approaches


@dataclass
class LabelDetail:
    label: int
    penetration: float
    contacts: list = field(default_factory=list)
    best_dot: float = 1.0
    reason: str = ""


def _rodrigues(axis, angles):
    """Batched rotation matrices about a fixed unit axis: (K, 3, 3)."""
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    s, c = np.sin(angles)[:, None, None], np.cos(angles)[:, None, None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


class HandModel:
    """Hand links posed relative to a free-floating palm."""

    def __init__(self, chain):
        self.chain = chain
        self.fingers = finger_joint_indices(chain)
        self.finger_links = finger_link_names(chain)
        self.hand_links = [chain.palm] + [l for links in self.finger_links for l in links]
        n_arm = len(chain.arm_indices)
        self.active_cols = np.asarray(chain.active_hand) - n_arm

    def link_vertices(self, palm_T, q_h):
        """World vertices of palm and finger links for a hand configuration (16 values)."""
        q = np.zeros(self.chain.n_joints)
        q[self.chain.hand_indices] = q_h
        kin = self.chain.fk(q)
        base = palm_T @ kin.pose(self.chain.palm_index).inverse()
        out = {}
        for name in self.hand_links:
            li = self.chain.link_index[name]
            v = self.chain.vertices[name]
            out[name] = base.apply(v @ kin.rotations[li].T + kin.origins[li])
        return out

    def finger_sweep(self, palm_T, finger, angles):
        """Vertices of one finger's links for K joint-angle rows: list of (K, V, 3) arrays."""
        joints = self.fingers[finger]
        K = len(angles)
        R = np.broadcast_to(palm_T.rotation, (K, 3, 3))
        p = np.broadcast_to(palm_T.t, (K, 3))
        out = []
        for k, j in enumerate(joints):
            joint = self.chain.joints[j]
            Rj = R @ joint.origin.rotation
            pj = R @ joint.origin.t + p
            R = Rj @ _rodrigues(joint.axis, angles[:, k])
            p = pj
            v = self.chain.vertices[joint.child]
            out.append(np.einsum("kij,vj->kvi", R, v) + p[:, None, :])
        return out


def _finger_angles(q_h, cols, hi, step):
    """Equal-rate advance of the two proximal joints from the preshape to the upper limit."""
    start = q_h[cols[:2]]
    n = int(np.ceil((hi - start.min()) / step)) + 1
    k = np.arange(n)[:, None] * step
    ang = np.zeros((n, len(cols)))
    ang[:, :2] = np.minimum(start[None] + k, hi)
    ang[:, 2:] = q_h[cols[2:]]
    return ang


def label_hand(scene, chain, palm_T, q_h, hand=None, detail=False, contact_links="distal"):
    """Oracle label for a free-floating hand at ``palm_T`` with hand joints ``q_h`` (16)."""
    hand = hand or HandModel(chain)
    q_h = np.asarray(q_h, dtype=float)
    obj = scene.member(OBJECT_TAG) if any(o.tag == OBJECT_TAG for o in scene.objects) else scene
    verts = hand.link_vertices(palm_T, q_h)
    pen = min(float(scene.value(v).min()) for v in verts.values())
    if pen < -PENETRATION_TOL:
        return LabelDetail(0, pen, reason="penetration") if detail else 0
    n_arm = len(chain.arm_indices)
    contacts = []
    for f, joints in enumerate(hand.fingers):
        cols = joints - n_arm
        hi = chain.upper[joints[0]]
        ang = _finger_angles(q_h, cols, hi, CLOSE_STEP)
        links = hand.finger_sweep(palm_T, f, ang)
        allv = np.concatenate(links, axis=1)
        K, V, _ = allv.shape
        d = scene.value(allv.reshape(-1, 3)).reshape(K, V).min(axis=1)
        hit = np.nonzero(d < CONTACT_TOL)[0]
        stop = int(hit[0]) if len(hit) else K - 1
        tip = links[-1][stop] if contact_links == "distal" else np.concatenate([l[stop] for l in links])
        vals, grads = obj.value_and_gradient(tip)
        i = int(np.argmin(np.abs(vals)))
        if abs(vals[i]) < CONTACT_TOL:
            contacts.append({"finger": f, "point": tip[i].tolist(), "normal": grads[i].tolist(),
                             "sdf": float(vals[i])})
    if len(contacts) < 2:
        return LabelDetail(0, pen, contacts, reason="contacts") if detail else 0
    normals = np.array([c["normal"] for c in contacts])
    dots = normals @ normals.T
    best = float(dots[np.triu_indices(len(contacts), 1)].min())
    label = int(best <= ANTIPODAL_DOT)
    if detail:
        return LabelDetail(label, pen, contacts, best, "ok" if label else "antipodal")
    return label


def label_grasp(scene, chain, q, detail=False):
    """Oracle label for a full configuration; the palm pose comes from forward kinematics."""
    qa = q.as_array() if isinstance(q, JointConfig) else np.asarray(q, dtype=float)
    kin = chain.fk(qa)
    arm_links = [n for n in chain.collision_links if n not in HandModel(chain).hand_links]
    arm_pen = min((float(scene.value(chain.vertices[n] @ kin.rotations[chain.link_index[n]].T
                                     + kin.origins[chain.link_index[n]]).min()) for n in arm_links),
                  default=np.inf)
    if arm_pen < -PENETRATION_TOL:
        return LabelDetail(0, arm_pen, reason="penetration") if detail else 0
    return label_hand(scene, chain, kin.pose(chain.palm_index), qa[chain.hand_indices], detail=detail)


# --- observation -------------------------------------------------------------


def observe(scene, camera="high", sigma0=0.002, seed=0, intrinsics=None):
    """Render the scene, drop table points by height, normalize the object cloud."""
    obj = scene.member(OBJECT_TAG)
    target = obj.objects[0].pose.t if len(obj) else np.array([0.7, 0.0, TABLE_TOP])
    cam = camera_pose(camera, target)
    img = render_depth(scene, cam, intrinsics or default_intrinsics())
    if sigma0 > 0:
        img = add_noise(img, sigma0, seed)
    cloud = backproject(img)
    world = cloud.world_points()
    keep = world[:, 2] > TABLE_TOP + SEGMENT_MARGIN
    if not np.any(keep):
        raise NoObservationError("no object points above the table")
    # noisy far-table returns survive the height cut; crop around the robust center
    center = np.median(world[keep, :2], axis=0)
    keep &= np.linalg.norm(world[:, :2] - center, axis=1) < SEGMENT_RADIUS
    return normalize_cloud(PointCloud(cloud.points[keep], "camera", cloud.pose))


# --- sampler -----------------------------------------------------------------


@dataclass
class GraspSample:
    observation: object
    config: GraspConfig
    label: int
    approach: str
    scene_index: int
    palm_pose: RigidTransform
    q_h: np.ndarray

    def record(self):
        return {"scene": self.scene_index, "label": int(self.label), "approach": self.approach,
                "config": self.config.to_dict(), "palm_pose": self.palm_pose.to_dict(),
                "q_h": [float(x) for x in self.q_h]}


@dataclass
class SamplerConfig:
    standoff: tuple = (0.02, 0.10)
    lateral_sigma: float = 0.01
    yaw_range: float = 1.0
    tilt_sigma: float = 0.15
    roll_range: float = 0.5
    side_fraction: float = 0.6
    robot_xy: tuple = (0.0, 0.0)


def palm_frame(approach, roll=0.0):
    """Palm rotation whose -z axis is ``approach`` and whose y axis is as horizontal as possible."""
    z = -np.asarray(approach, dtype=float)
    z /= np.linalg.norm(z)
    y = np.cross([0.0, 0.0, 1.0], z)
    if np.linalg.norm(y) < 1e-6:
        y = np.array([0.0, 1.0, 0.0])
    y /= np.linalg.norm(y)
    if y[1] < 0:
        y = -y
    x = np.cross(y, z)
    R = np.stack([x, y, z], axis=1)
    if roll:
        c, s = np.cos(roll), np.sin(roll)
        R = R @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return R


def sample_palm(scene, rng, cfg=None, approach=None):
    """Heuristic palm pose: approach the object center along a random direction from the
    robot side or from above, stopping a random standoff beyond the object's support
    distance along that direction. Returns (pose, tag)."""
    cfg = cfg or SamplerConfig()
    obj = scene.member(OBJECT_TAG)
    center = obj.objects[0].pose.t.copy()
    want = approach or ("side" if rng.uniform() < cfg.side_fraction else "overhead")
    if want == "side":
        to_obj = center[:2] - np.asarray(cfg.robot_xy)
        yaw = np.arctan2(to_obj[1], to_obj[0]) + rng.uniform(-cfg.yaw_range, cfg.yaw_range)
        a = np.array([np.cos(yaw), np.sin(yaw), rng.normal(scale=cfg.tilt_sigma)])
        center[2] = max(center[2], TABLE_TOP + SIDE_MIN_HEIGHT)
    else:
        a = np.array([*rng.normal(scale=cfg.tilt_sigma, size=2), -1.0])
    a /= np.linalg.norm(a)
    pts, _ = obj.sample_surface(512, rng)
    support = float(np.max((pts - obj.objects[0].pose.t) @ -a))
    lateral = rng.normal(scale=cfg.lateral_sigma, size=3)
    lateral -= a * (lateral @ a)
    p = center - a * (support + rng.uniform(*cfg.standoff)) + lateral
    R = palm_frame(a, roll=rng.uniform(-cfg.roll_range, cfg.roll_range))
    tag = "overhead" if a[2] < -0.7 else "side"
    return RigidTransform.from_matrix(R, p), tag


def config_from_palm(palm_T, q_h_active, frame):
    local = frame.frame_pose.inverse() @ palm_T
    vec = np.concatenate([local.t, matrix_to_euler_xyz(local.rotation)])
    return GraspConfig(q_h_active, vec, frame_id(frame))


def generate_dataset(scenes, per_scene, seed, chain, camera="high", sampler=None, sigma0=0.002):
    """Oracle-labelled grasps; each scene draws from its own RNG stream (seed, index)."""
    if per_scene < 1:
        raise ValueError("per_scene must be at least 1")
    hand = HandModel(chain)
    n_arm = len(chain.arm_indices)
    active = np.asarray(chain.active_hand) - n_arm
    lo, hi = chain.lower[chain.hand_indices], chain.upper[chain.hand_indices]
    out = []
    for si, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, si])
        try:
            obs = observe(scene, camera, sigma0, int(rng.integers(2 ** 31)))
        except NoObservationError:
            continue
        for _ in range(per_scene):
            palm_T, tag = sample_palm(scene, rng, sampler)
            q_h = np.zeros(len(lo))
            q_h[active] = rng.uniform(*PRESHAPE_RANGE, size=len(active))
            q_h = np.clip(q_h, lo, hi)
            label = label_hand(scene, chain, palm_T, q_h, hand)
            out.append(GraspSample(obs, config_from_palm(palm_T, q_h[active], obs), label, tag, si, palm_T, q_h))
    return out


def split_by_scene(samples, test_fraction=0.2, seed=0):
    scenes = sorted({s.scene_index for s in samples})
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(test_fraction * len(scenes))))
    test = set(rng.choice(scenes, n_test, replace=False).tolist())
    return [s for s in samples if s.scene_index not in test], [s for s in samples if s.scene_index in test]


def save_dataset(samples, directory, scenes=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = {}
    with open(d / "grasps.jsonl", "w") as fh:
        for s in samples:
            if s.scene_index not in written:
                stem = f"scene_{s.scene_index:04d}"
                obs = s.observation
                PointCloud(obs.points, "normalized", obs.frame_pose).save_ply(d / f"{stem}.ply")
                meta = {**obs.metadata(), "source_pose": obs.source_pose.to_dict()}
                (d / f"{stem}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
                if scenes is not None:
                    scenes[s.scene_index].save(d / f"{stem}_scene.json")
                written[s.scene_index] = stem
            fh.write(json.dumps(s.record(), sort_keys=True) + "\n")
    return d


def load_dataset(directory):
    from .camera import NormalizedCloud

    d = Path(directory)
    obs = {}
    out = []
    for line in (d / "grasps.jsonl").read_text().splitlines():
        r = json.loads(line)
        si = r["scene"]
        if si not in obs:
            stem = f"scene_{si:04d}"
            pc = PointCloud.load_ply(d / f"{stem}.ply")
            meta = json.loads((d / f"{stem}.json").read_text())
            obs[si] = NormalizedCloud(pc.points, np.array(meta["centroid"]), meta["scale"],
                                      RigidTransform.from_dict(meta["frame_pose"]),
                                      RigidTransform.from_dict(meta["source_pose"]), meta["size"])
        out.append(GraspSample(obs[si], GraspConfig.from_dict(r["config"]), r["label"], r["approach"], si,
                               RigidTransform.from_dict(r["palm_pose"]), np.array(r["q_h"])))
    return out

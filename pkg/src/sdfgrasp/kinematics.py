"""Serial arm + branching hand kinematics.

Joint vector layout is ``q = [q_a (7 arm joints), q_h (16 hand joints)]``.
The hand has four fingers of four revolute joints; the two joints nearest the
palm of each finger form the active subset used by the grasp model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .transforms import RigidTransform, axis_angle_matrix, matrix_to_euler_xyz, rot_y

N_ARM = 7
N_HAND = 16


class IKFailure(RuntimeError):
    pass


@dataclass
class Joint:
    name: str
    parent: str
    child: str
    origin: RigidTransform
    axis: np.ndarray
    limits: tuple
    group: str = "arm"
    active: bool = True

    def to_dict(self):
        return {"name": self.name, "parent": self.parent, "child": self.child, "origin": self.origin.to_dict(),
                "axis": [float(x) for x in self.axis], "limits": [float(x) for x in self.limits],
                "group": self.group, "active": self.active}


@dataclass
class JointConfig:
    q_a: np.ndarray
    q_h: np.ndarray

    def __post_init__(self):
        self.q_a = np.asarray(self.q_a, dtype=float).reshape(N_ARM)
        self.q_h = np.asarray(self.q_h, dtype=float).reshape(N_HAND)

    @classmethod
    def from_array(cls, q):
        q = np.asarray(q, dtype=float)
        return cls(q[:N_ARM], q[N_ARM:])

    def as_array(self):
        return np.concatenate([self.q_a, self.q_h])


@dataclass
class Kinematics:
    """Result of forward kinematics: per-link rotations/origins and per-joint world axes/positions."""

    rotations: np.ndarray  # (n_links, 3, 3)
    origins: np.ndarray  # (n_links, 3)
    joint_axes: np.ndarray  # (n_joints, 3)
    joint_positions: np.ndarray  # (n_joints, 3)

    def pose(self, i):
        return RigidTransform.from_matrix(self.rotations[i], self.origins[i])


class KinematicChain:
    def __init__(self, links, joints, base="base", palm="palm"):
        self.link_names = [l["name"] for l in links]
        self.vertices = {l["name"]: np.asarray(l.get("vertices", []), dtype=float).reshape(-1, 3) for l in links}
        self.joints = list(joints)
        self.base = base
        self.palm = palm
        self.link_index = {n: i for i, n in enumerate(self.link_names)}
        if base not in self.link_index or palm not in self.link_index:
            raise ValueError("base and palm must be declared links")
        if len(set(self.link_names)) != len(self.link_names):
            raise ValueError("duplicate link names")
        self._parent_joint = {}
        seen = {base}
        for j, joint in enumerate(self.joints):
            if joint.parent not in seen:
                raise ValueError(f"joint {joint.name} parent {joint.parent!r} not yet defined (joints must be topological)")
            if joint.child in self._parent_joint or joint.child == base:
                raise ValueError(f"link {joint.child!r} has two parents")
            if not joint.limits[0] < joint.limits[1]:
                raise ValueError(f"joint {joint.name} needs lo < hi")
            joint.axis = np.asarray(joint.axis, dtype=float) / np.linalg.norm(joint.axis)
            self._parent_joint[joint.child] = j
            seen.add(joint.child)
        missing = set(self.link_names) - seen
        if missing:
            raise ValueError(f"links unreachable from base: {sorted(missing)}")
        n = len(self.joints)
        self.lower = np.array([j.limits[0] for j in self.joints])
        self.upper = np.array([j.limits[1] for j in self.joints])
        self.arm_indices = np.array([i for i, j in enumerate(self.joints) if j.group == "arm"])
        self.hand_indices = np.array([i for i, j in enumerate(self.joints) if j.group == "hand"])
        self.active_hand = np.array([i for i, j in enumerate(self.joints) if j.group == "hand" and j.active])
        self.inactive_hand = np.array([i for i, j in enumerate(self.joints) if j.group == "hand" and not j.active])
        # ancestor mask: which joints move each link
        self.path_mask = np.zeros((len(self.link_names), n), dtype=bool)
        for name, li in self.link_index.items():
            cur = name
            while cur in self._parent_joint:
                j = self._parent_joint[cur]
                self.path_mask[li, j] = True
                cur = self.joints[j].parent
        self._parent_link = np.array([self.link_index[j.parent] for j in self.joints])
        self._child_link = np.array([self.link_index[j.child] for j in self.joints])
        self._origin_R = np.array([j.origin.rotation for j in self.joints])
        self._origin_t = np.array([j.origin.t for j in self.joints])
        self.collision_links = [n for n in self.link_names if n != base and len(self.vertices[n])]
        self._build_vertex_table()

    def _build_vertex_table(self):
        owners, verts = [], []
        for name in self.collision_links:
            v = self.vertices[name]
            owners.append(np.full(len(v), self.link_index[name]))
            verts.append(v)
        self.vertex_owner = np.concatenate(owners)
        self.vertex_local = np.concatenate(verts)
        self.vertex_link_slot = np.concatenate(
            [np.full(len(self.vertices[n]), k) for k, n in enumerate(self.collision_links)])

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def palm_index(self):
        return self.link_index[self.palm]

    # --- serialization -------------------------------------------------------

    def to_dict(self):
        return {"base": self.base, "palm": self.palm,
                "links": [{"name": n, "vertices": self.vertices[n].tolist()} for n in self.link_names],
                "joints": [j.to_dict() for j in self.joints]}

    @classmethod
    def from_dict(cls, d):
        joints = [Joint(j["name"], j["parent"], j["child"], RigidTransform.from_dict(j["origin"]),
                        np.asarray(j["axis"], dtype=float), tuple(j["limits"]), j.get("group", "arm"),
                        j.get("active", True)) for j in d["joints"]]
        return cls(d["links"], joints, d.get("base", "base"), d.get("palm", "palm"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def default(cls):
        text = resources.files("sdfgrasp").joinpath("data/default_robot.json").read_text()
        return cls.from_dict(json.loads(text))

    # --- kinematics ----------------------------------------------------------

    def _as_q(self, q):
        if isinstance(q, JointConfig):
            return q.as_array()
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n_joints,):
            raise ValueError(f"expected {self.n_joints} joint values, got shape {q.shape}")
        return q

    def fk(self, q):
        q = self._as_q(q)
        nl = len(self.link_names)
        R = np.empty((nl, 3, 3))
        p = np.empty((nl, 3))
        R[self.link_index[self.base]] = np.eye(3)
        p[self.link_index[self.base]] = 0.0
        axes = np.empty((self.n_joints, 3))
        jpos = np.empty((self.n_joints, 3))
        for j, joint in enumerate(self.joints):
            pi = self._parent_link[j]
            Rj = R[pi] @ self._origin_R[j]
            pj = R[pi] @ self._origin_t[j] + p[pi]
            axes[j] = Rj @ joint.axis
            jpos[j] = pj
            ci = self._child_link[j]
            R[ci] = Rj @ axis_angle_matrix(joint.axis, q[j])
            p[ci] = pj
        return Kinematics(R, p, axes, jpos)

    def point_jacobians(self, kin, points, link_ids):
        """Linear Jacobians for world points rigidly attached to links: (K, 3, n)."""
        mask = self.path_mask[link_ids]  # (K, n)
        diff = points[:, None, :] - kin.joint_positions[None, :, :]  # (K, n, 3)
        cols = np.cross(kin.joint_axes[None, :, :], diff)
        return np.transpose(cols * mask[:, :, None], (0, 2, 1))

    def vertices_world(self, kin):
        """All collision vertices in world coordinates, aligned with ``vertex_owner``."""
        R = kin.rotations[self.vertex_owner]
        return np.einsum("kij,kj->ki", R, self.vertex_local) + kin.origins[self.vertex_owner]


def forward_kinematics(chain, q):
    kin = chain.fk(q)
    return {name: kin.pose(i) for i, name in enumerate(chain.link_names)}


def _full_q(chain, q_a):
    q = np.zeros(chain.n_joints)
    q[chain.arm_indices] = q_a
    return q


def palm_pose(chain, q_a):
    q_a = np.asarray(q_a, dtype=float)
    q = q_a if q_a.shape == (chain.n_joints,) else _full_q(chain, q_a)
    return chain.fk(q).pose(chain.palm_index)


def pose_to_vec6(pose):
    return np.concatenate([pose.t, matrix_to_euler_xyz(pose.rotation)])


def vec6_to_pose(v):
    return RigidTransform.from_vec6(v)


def jacobian(chain, q, link):
    """Geometric Jacobian (rows: linear xyz, angular xyz) of a link origin."""
    if link not in chain.link_index:
        raise KeyError(f"unknown link {link!r}")
    q = chain._as_q(q)
    kin = chain.fk(q)
    li = chain.link_index[link]
    J = np.zeros((6, chain.n_joints))
    m = chain.path_mask[li]
    J[:3, m] = np.cross(kin.joint_axes[m], kin.origins[li] - kin.joint_positions[m]).T
    J[3:, m] = kin.joint_axes[m].T
    return J


def link_vertices_world(chain, q):
    kin = chain.fk(q)
    return {n: chain.vertices[n] @ kin.rotations[chain.link_index[n]].T + kin.origins[chain.link_index[n]]
            for n in chain.link_names if len(chain.vertices[n])}


def clamp_limits(chain, q):
    return np.clip(np.asarray(q, dtype=float), chain.lower, chain.upper)


def limits_satisfied(chain, q, tol=0.0):
    q = np.asarray(q, dtype=float)
    return bool(np.all(q >= chain.lower - tol) and np.all(q <= chain.upper + tol))


def rotation_error(R_target, R):
    """Axis-angle vector of R_target @ R^T (world frame)."""
    E = R_target @ R.T
    cos = np.clip((np.trace(E) - 1) / 2, -1.0, 1.0)
    angle = np.arccos(cos)
    v = np.array([E[2, 1] - E[1, 2], E[0, 2] - E[2, 0], E[1, 0] - E[0, 1]])
    s = np.linalg.norm(v)
    if s < 1e-12:
        if angle < 1e-6:
            return np.zeros(3)
        # 180 degrees: axis from the symmetric part
        w, V = np.linalg.eigh((E + E.T) / 2)
        return V[:, np.argmax(w)] * angle
    return v / s * angle


def ik_palm(chain, target, table_height=-np.inf, seed_q_a=None, max_iter=500, damping=0.05,
            pos_tol=1e-3, rot_tol=1e-2, q_hand=None):
    """Damped-least-squares IK for the palm pose with adaptive (Levenberg-Marquardt) damping.

    Joint limits are enforced by clamping every step. Raises :class:`IKFailure`
    on non-convergence or when the solution puts the palm at or below ``table_height``.
    """
    arm = chain.arm_indices
    q = np.zeros(chain.n_joints)
    if q_hand is not None:
        q[chain.hand_indices] = q_hand
    q[arm] = chain_ready(chain) if seed_q_a is None else seed_q_a
    q = clamp_limits(chain, q)
    pi = chain.palm_index
    weights = np.array([1.0, 1.0, 1.0, 0.3, 0.3, 0.3])
    lo, hi = chain.lower[arm], chain.upper[arm]
    m = chain.path_mask[pi][arm]

    def residual(qq):
        kin = chain.fk(qq)
        e = np.concatenate([target.t - kin.origins[pi], rotation_error(target.rotation, kin.rotations[pi])])
        return kin, e

    kin, e = residual(q)
    lam = damping
    for _ in range(max_iter):
        if np.linalg.norm(e[:3]) < pos_tol and np.linalg.norm(e[3:]) < rot_tol:
            if kin.origins[pi][2] <= table_height:
                raise IKFailure("IK solution places the palm below the table")
            return q[arm].copy()
        J = np.zeros((6, len(arm)))
        J[:3, m] = np.cross(kin.joint_axes[arm][m], kin.origins[pi] - kin.joint_positions[arm][m]).T
        J[3:, m] = kin.joint_axes[arm][m].T
        Jw = J * weights[:, None]
        ew = e * weights
        dq = Jw.T @ np.linalg.solve(Jw @ Jw.T + lam ** 2 * np.eye(6), ew)
        step = np.linalg.norm(dq)
        if step > 0.3:
            dq *= 0.3 / step
        trial = q.copy()
        trial[arm] = np.clip(q[arm] + dq, lo, hi)
        kin_t, e_t = residual(trial)
        if np.linalg.norm(e_t * weights) < np.linalg.norm(ew):
            q, kin, e = trial, kin_t, e_t
            lam = max(lam * 0.5, 1e-3)
        else:
            lam = min(lam * 3.0, 10.0)
    raise IKFailure(f"IK did not converge in {max_iter} iterations")


def ik_palm_reseeded(chain, target, table_height=-np.inf, rng=None, attempts=5, seed_q_a=None, **kw):
    """Calls :func:`ik_palm` from the given seed, then from random seeds until one converges."""
    rng = rng if rng is not None else np.random.default_rng(0)
    arm = chain.arm_indices
    seeds = [chain_ready(chain) if seed_q_a is None else np.asarray(seed_q_a, dtype=float)]
    last = None
    for k in range(attempts):
        if k >= len(seeds):
            seeds.append(rng.uniform(chain.lower[arm], chain.upper[arm]))
        try:
            return ik_palm(chain, target, table_height, seeds[k], **kw)
        except IKFailure as exc:
            last = exc
    raise IKFailure(f"IK failed from {attempts} seeds: {last}")


READY_Q_A = np.array([0.0, 1.45, 0.0, 1.76, 0.0, -1.64, 0.0])


def chain_ready(chain):
    return np.clip(READY_Q_A, chain.lower[chain.arm_indices], chain.upper[chain.arm_indices])


# --- default robot -----------------------------------------------------------

ARM_SEGMENTS = [0.20, 0.14, 0.20, 0.20, 0.19, 0.20, 0.18]
ARM_AXES = ["z", "y", "z", "y", "z", "y", "z"]
ARM_LIMITS = [2.96, 2.09, 2.96, 2.09, 2.96, 2.09, 3.05]
FINGER_ROOTS = [(-0.035, 0.09), (0.0, 0.09), (0.035, 0.09), (0.0, -0.09)]
FINGER_SEGMENTS = [0.05, 0.04, 0.03, 0.025]
FINGER_HALF_WIDTH = 0.01
FINGER_SPLAY = 1.2  # finger roots are mounted splayed outward by this angle
ACTIVE_LIMITS = (-0.3, 1.6)
DISTAL_LIMITS = (0.0, 1.6)


def _box_vertices(hx, hy, z0, z1, extra=()):
    corners = [(sx * hx, sy * hy, z) for z in (z0, z1) for sx in (-1, 1) for sy in (-1, 1)]
    return [list(map(float, c)) for c in corners] + [list(map(float, e)) for e in extra]


def build_default_chain():
    """7-DOF arm with a four-finger, 16-joint hand; palm approach axis is palm -z."""
    axis_vec = {"z": [0, 0, 1], "y": [0, 1, 0]}
    links = [{"name": "base", "vertices": _box_vertices(0.08, 0.08, 0.0, 0.2)}]
    joints = []
    parent = "base"
    half = [0.05, 0.05, 0.05, 0.045, 0.045, 0.04]
    for k in range(6):
        name = f"link{k + 1}"
        seg = ARM_SEGMENTS[k + 1]
        mid = [(sx * half[k], sy * half[k], seg / 2) for sx in (-1, 1) for sy in (-1, 1)]
        links.append({"name": name, "vertices": _box_vertices(half[k], half[k], 0.0, seg, mid)})
        joints.append(Joint(f"a{k + 1}", parent, name, RigidTransform(t=[0, 0, ARM_SEGMENTS[k]]),
                            np.array(axis_vec[ARM_AXES[k]], dtype=float), (-ARM_LIMITS[k], ARM_LIMITS[k]), "arm"))
        parent = name
    # flange rotated by pi about y: palm +z points back toward the wrist
    palm_verts = _box_vertices(0.045, 0.1, 0.0, 0.03, [(0, 0, 0), (0.045, 0, 0.015), (-0.045, 0, 0.015),
                                                          (0, 0.1, 0.015), (0, -0.1, 0.015)])
    palm_verts += _box_vertices(0.03, 0.03, 0.03, ARM_SEGMENTS[6])
    links.append({"name": "palm", "vertices": palm_verts})
    joints.append(Joint("a7", parent, "palm", RigidTransform.from_matrix(rot_y(np.pi), [0, 0, ARM_SEGMENTS[6]]),
                        np.array([0.0, 0.0, -1.0]), (-ARM_LIMITS[6], ARM_LIMITS[6]), "arm"))
    for f, (x, y) in enumerate(FINGER_ROOTS):
        axis = np.array([-1.0, 0.0, 0.0]) if y > 0 else np.array([1.0, 0.0, 0.0])
        parent = "palm"
        origin_z = 0.0
        for s, seg in enumerate(FINGER_SEGMENTS):
            name = f"finger{f}_link{s}"
            extra = [(0, 0, -seg), (0, FINGER_HALF_WIDTH, -seg / 2), (0, -FINGER_HALF_WIDTH, -seg / 2)]
            links.append({"name": name, "vertices": _box_vertices(FINGER_HALF_WIDTH, FINGER_HALF_WIDTH, 0.0, -seg, extra)})
            if s == 0:
                origin = RigidTransform.from_matrix(axis_angle_matrix(axis, -FINGER_SPLAY), [x, y, 0.0])
            else:
                origin = RigidTransform(t=[0, 0, origin_z])
            lim = ACTIVE_LIMITS if s < 2 else DISTAL_LIMITS
            joints.append(Joint(f"finger{f}_j{s}", parent, name, origin, axis, lim, "hand", s < 2))
            parent = name
            origin_z = -seg
    return KinematicChain(links, joints)


def finger_link_names(chain):
    """Per finger: ordered link names (proximal to distal)."""
    fingers = {}
    for j in chain.joints:
        if j.group == "hand":
            f = j.name.split("_")[0]
            fingers.setdefault(f, []).append(j.child)
    return [fingers[k] for k in sorted(fingers)]


def finger_joint_indices(chain):
    fingers = {}
    for i, j in enumerate(chain.joints):
        if j.group == "hand":
            fingers.setdefault(j.name.split("_")[0], []).append(i)
    return [np.array(fingers[k]) for k in sorted(fingers)]

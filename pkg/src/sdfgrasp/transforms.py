"""Rigid transforms: unit quaternions [w, x, y, z] plus a translation in meters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GIMBAL_LIMIT = np.pi / 2 - 1e-6


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical hemisphere keeps serialization deterministic
    return -q if q[0] < 0 else q


def quat_multiply(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Shepperd's method; picks the numerically largest pivot."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def axis_angle_matrix(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def euler_xyz_to_matrix(euler):
    """Intrinsic XYZ: R = Rx(a) @ Ry(b) @ Rz(c)."""
    a, b, c = euler
    return rot_x(a) @ rot_y(b) @ rot_z(c)


def matrix_to_euler_xyz(R):
    """Inverse of :func:`euler_xyz_to_matrix`; pitch is clamped away from gimbal lock."""
    sb = np.clip(R[0, 2], -1.0, 1.0)
    b = np.clip(np.arcsin(sb), -GIMBAL_LIMIT, GIMBAL_LIMIT)
    a = np.arctan2(-R[1, 2], R[2, 2])
    c = np.arctan2(-R[0, 1], R[0, 0])
    return np.array([a, b, c])


def euler_rate_matrix(euler):
    """Maps XYZ Euler rates to angular velocity in the parent frame: w = M @ d(euler)/dt."""
    a, b, _ = euler
    return np.array([
        [1.0, 0.0, np.sin(b)],
        [0.0, np.cos(a), -np.sin(a) * np.cos(b)],
        [0.0, np.sin(a), np.cos(a) * np.cos(b)],
    ])


def skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


@dataclass(frozen=True)
class RigidTransform:
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)):
        return cls(matrix_to_quat(R), np.asarray(t, dtype=float))

    @classmethod
    def from_homogeneous(cls, T):
        T = np.asarray(T, dtype=float)
        return cls.from_matrix(T[:3, :3], T[:3, 3])

    @classmethod
    def from_vec6(cls, v):
        """Position + XYZ Euler angles."""
        v = np.asarray(v, dtype=float)
        return cls.from_matrix(euler_xyz_to_matrix(v[3:]), v[:3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        """Camera pose with +z toward ``target``, +x right and +y down in the image."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [0.0, 1.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls.from_matrix(np.stack([x, y, z], axis=1), eye)

    @property
    def rotation(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.t
        return T

    def vec6(self):
        return np.concatenate([self.t, matrix_to_euler_xyz(self.rotation)])

    def apply(self, points):
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.t

    def apply_inverse(self, points):
        p = np.asarray(points, dtype=float)
        return (p - self.t) @ self.rotation

    def inverse(self):
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidTransform(qi, -(quat_to_matrix(qi) @ self.t))

    def __matmul__(self, other):
        return RigidTransform(quat_multiply(self.q, other.q), self.rotation @ other.t + self.t)

    def to_dict(self):
        return {"q": [float(x) for x in self.q], "t": [float(x) for x in self.t]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d.get("q", [1, 0, 0, 0]), dtype=float), np.asarray(d.get("t", [0, 0, 0]), dtype=float))

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(self.t, other.t, atol=atol)


def random_rotation(rng):
    q = rng.normal(size=4)
    return quat_to_matrix(quat_normalize(q))

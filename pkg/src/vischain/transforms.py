"""Rigid 3D transforms backed by unit quaternions."""

from __future__ import annotations

import numpy as np


def _quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_from_rpy(roll, pitch, yaw):
    """Quaternion (w,x,y,z) for Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    return np.array([
        cy * cp * cr + sy * sp * sr,
        cy * cp * sr - sy * sp * cr,
        cy * sp * cr + sy * cp * sr,
        sy * cp * cr - cy * sp * sr,
    ])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    half = angle / 2.0
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


class Transform:
    """Rotation (unit quaternion) followed by translation."""

    __slots__ = ("quat", "trans")

    def __init__(self, quat=(1.0, 0.0, 0.0, 0.0), trans=(0.0, 0.0, 0.0)):
        self.quat = _quat_normalize(quat)
        self.trans = np.asarray(trans, dtype=np.float64)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rpy(cls, xyz, rpy):
        return cls(quat_from_rpy(*rpy), xyz)

    @classmethod
    def from_axis_angle(cls, axis, angle, trans=(0.0, 0.0, 0.0)):
        return cls(quat_from_axis_angle(axis, angle), trans)

    def matrix(self):
        return quat_to_matrix(self.quat)

    def apply(self, points):
        """Apply to one 3-vector or an (N,3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix().T + self.trans

    def compose(self, other: "Transform") -> "Transform":
        """self then other in self's frame: result maps other's local frame to world."""
        return Transform(
            quat_mul(self.quat, other.quat),
            self.trans + self.matrix() @ other.trans,
        )

    def inverse(self) -> "Transform":
        qinv = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        return Transform(qinv, -(quat_to_matrix(qinv) @ self.trans))

    def __repr__(self):
        return f"Transform(quat={self.quat.tolist()}, trans={self.trans.tolist()})"


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Transform:
    """Camera pose at `position` with +z looking toward `target`."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        # view direction parallel to up; pick another reference
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)  # columns: camera x,y,z in world
    return Transform(matrix_to_quat(rot), position)


def matrix_to_quat(m):
    """Rotation matrix to quaternion (w,x,y,z), Shepperd's method."""
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        return _quat_normalize([
            0.25 * s,
            (m[2, 1] - m[1, 2]) / s,
            (m[0, 2] - m[2, 0]) / s,
            (m[1, 0] - m[0, 1]) / s,
        ])
    i = int(np.argmax(np.diag(m)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(m[i, i] - m[j, j] - m[k, k] + 1.0) * 2
    q = np.zeros(4)
    q[0] = (m[k, j] - m[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (m[j, i] + m[i, j]) / s
    q[1 + k] = (m[k, i] + m[i, k]) / s
    return _quat_normalize(q)

"""Poses, quaternions and pinhole cameras.

Quaternions are scalar-first (w, x, y, z) everywhere inside the package; the
on-disk pose format is scalar-last and converted exactly once at the file
boundary (see data.py).  Ground-truth quaternions are canonicalised to a
non-negative scalar part when ingested so the double cover cannot flip signs
mid-pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError


@dataclass
class Pose:
    """Camera-to-world transform: ``x`` is the position, ``q`` the rotation."""

    x: np.ndarray  # (3,)
    q: np.ndarray  # (4,), unit, scalar-first

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n < 1e-6:
        raise DataError(f"quaternion norm {n:.3e} below 1e-6")
    return q / n


def canonicalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Flip sign so the scalar part is non-negative (double-cover pick)."""
    return -q if q[0] < 0 else q.copy()


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a canonicalised unit quaternion."""
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        if i == 0:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
        elif i == 1:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return canonicalize_quaternion(normalize_quaternion(q))


def look_at_pose(position: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose whose camera z-axis points from ``position`` toward ``target``.

    Image rows run downward, so the camera y-axis is chosen to oppose ``up``.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise DataError("look_at_pose: camera position coincides with target")
    forward = forward / fn
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise DataError("look_at_pose: view direction parallel to the up vector")
    right = right / rn
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return Pose(position, matrix_to_quaternion(rot))


def pixel_directions(camera: Camera, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Unit ray directions in the camera frame for pixel coordinate arrays."""
    dirs = np.stack(
        [
            (us.astype(np.float64) - camera.cx) / camera.fx,
            (vs.astype(np.float64) - camera.cy) / camera.fy,
            np.ones(us.shape, dtype=np.float64),
        ],
        axis=-1,
    )
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def camera_pixel_grid(width: int, height: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    us = np.arange(0, width, stride)
    vs = np.arange(0, height, stride)
    uu, vv = np.meshgrid(us, vs)
    return uu.reshape(-1), vv.reshape(-1)


def rotation_matrix_tensor(q_unit: Tensor) -> Tensor:
    """Rotation matrix from a unit quaternion tensor, differentiable in q.

    Built from slice/multiply/concat primitives so the tape carries gradients
    from rotated vectors back into the quaternion.
    """
    w, x, y, z = q_unit[0:1], q_unit[1:2], q_unit[2:3], q_unit[3:4]
    two = 2.0
    r00 = 1.0 - two * (y * y + z * z)
    r01 = two * (x * y - w * z)
    r02 = two * (x * z + w * y)
    r10 = two * (x * y + w * z)
    r11 = 1.0 - two * (x * x + z * z)
    r12 = two * (y * z - w * x)
    r20 = two * (x * z - w * y)
    r21 = two * (y * z + w * x)
    r22 = 1.0 - two * (x * x + y * y)
    rows = ad.concat([r00, r01, r02, r10, r11, r12, r20, r21, r22], axis=0)
    return rows.reshape((3, 3))


def rotate_directions(q_unit: Tensor, dirs_cam: np.ndarray) -> Tensor:
    """World-frame directions for camera-frame unit directions (N, 3)."""
    r = rotation_matrix_tensor(q_unit)
    return ad.matmul(ad.constant(dirs_cam), r.transpose())


QUAT_NORM_FLOOR = 1e-8


def normalize_quaternion_tensor(q_raw: Tensor) -> Tensor:
    """q / max(|q|, floor): exactly unit for any realistic raw output, and
    finite-gradient at the all-zero singularity."""
    n = ad.norm_l2(q_raw)
    denom = QUAT_NORM_FLOOR + ad.relu(n - QUAT_NORM_FLOOR)
    return q_raw / denom

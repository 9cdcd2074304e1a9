"""Pose representations, pinhole projection, viewsphere binning and error metrics.

Conventions: a pose maps target-frame points into the camera frame,
``p_cam = R @ p + t``; the camera looks down +z. Quaternions are Hamilton,
scalar last ``(x, y, z, w)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from spacepose.errors import BehindCamera, ConfigError, DegenerateRepresentation, OutOfRange

Z_MIN = 1e-6
QUAT_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, k) -> "CameraIntrinsics":
        k = np.asarray(k, dtype=np.float64).reshape(3, 3)
        return cls(float(k[0, 0]), float(k[1, 1]), float(k[0, 2]), float(k[1, 2]))


@dataclass
class Pose:
    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)

    @property
    def quaternion(self) -> np.ndarray:
        return rotation_to_quaternion(self.rotation)

    @property
    def sixd(self) -> np.ndarray:
        return rotation_to_sixd(self.rotation)

    @classmethod
    def from_quaternion(cls, q, t) -> "Pose":
        return cls(quaternion_to_rotation(q), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.position
        return m

    def transform(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.position


def is_rotation(r, tol: float = 1e-6) -> bool:
    r = np.asarray(r, dtype=np.float64)
    return (np.abs(r.T @ r - np.eye(3)).max() < tol) and abs(np.linalg.det(r) - 1.0) < tol


# ---------------------------------------------------------------- projection

def project_points(k: CameraIntrinsics, pose: Pose, points) -> tuple[np.ndarray, np.ndarray]:
    """Project [N, 3] target-frame points. Returns (uv [N, 2], in_front [N])."""
    pc = pose.transform(np.atleast_2d(points))
    z = pc[:, 2]
    front = z > Z_MIN
    zs = np.where(front, z, 1.0)
    uv = np.stack([k.fx * pc[:, 0] / zs + k.cx, k.fy * pc[:, 1] / zs + k.cy], axis=1)
    uv[~front] = np.nan
    return uv, front


def project(k: CameraIntrinsics, pose: Pose, point) -> np.ndarray:
    """Pixel coordinates of a single point; raises :class:`BehindCamera`."""
    uv, front = project_points(k, pose, np.asarray(point, dtype=np.float64).reshape(1, 3))
    if not front[0]:
        raise BehindCamera(f"point {point} is behind the camera plane")
    return uv[0]


# ---------------------------------------------------------------- rotations

def rotation_to_sixd(r) -> np.ndarray:
    """First two columns of ``R`` stacked (column-major); works on [..., 3, 3]."""
    r = np.asarray(r, dtype=np.float64)
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def sixd_to_rotation(r6) -> np.ndarray:
    """Gram-Schmidt map from [..., 6] to [..., 3, 3] rotation matrices."""
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[..., 0:3], r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= 1e-9):
        raise DegenerateRepresentation("first 6D column has (near) zero norm")
    b1 = a1 / n1
    u2 = a2 - (b1 * a2).sum(axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 <= 1e-9 * np.maximum(np.linalg.norm(a2, axis=-1, keepdims=True), 1.0)):
        raise DegenerateRepresentation("6D columns are (near) parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def axis_angle_to_rotation(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    kx = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * (kx @ kx)


def euler_xyz_to_rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    return (axis_angle_to_rotation((0, 0, 1), rz) @ axis_angle_to_rotation((0, 1, 0), ry)
            @ axis_angle_to_rotation((1, 0, 0), rx))


def random_rotation(rng) -> np.ndarray:
    """Uniform rotation from a normalised Gaussian quaternion; ``rng`` has ``.normal``."""
    q = np.asarray(rng.normal(size=4), dtype=np.float64)
    return quaternion_to_rotation(q / np.linalg.norm(q))


# ---------------------------------------------------------------- quaternions

def _check_unit(q: np.ndarray) -> None:
    if abs(np.linalg.norm(q) - 1.0) > QUAT_UNIT_TOL:
        raise ConfigError(f"quaternion is not unit norm: |q| = {np.linalg.norm(q)}")


def quat_mul(q, p) -> np.ndarray:
    """Hamilton product ``q ⊗ p``, scalar last."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    qv, qw = q[:3], q[3]
    pv, pw = p[:3], p[3]
    v = qw * pv + pw * qv + np.cross(qv, pv)
    return np.append(v, qw * pw - qv @ pv)


def quat_inverse(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    _check_unit(q)
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quaternion_to_rotation(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    _check_unit(q)
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quaternion(r) -> np.ndarray:
    """Shepperd's method; returns the representative with w >= 0."""
    m = np.asarray(r, dtype=np.float64)
    tr = np.trace(m)
    diag = np.diag(m)
    i = int(np.argmax(np.append(diag, tr)))
    if i == 3:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = np.array([(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s])
    elif i == 0:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s])
    elif i == 1:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s])
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


# ---------------------------------------------------------------- metrics

def attitude_error(q_hat, q) -> float:
    """Rotation angle in [0, pi] between two unit quaternions, sign-invariant."""
    d = quat_mul(quat_inverse(q_hat), np.asarray(q, dtype=np.float64))
    # 2*atan2(|v|, |w|) equals 2*arccos(|w|) for unit d, without the loss of
    # precision arccos suffers near 1.
    return 2.0 * math.atan2(float(np.linalg.norm(d[:3])), abs(float(d[3])))


def position_error(t_hat, t) -> tuple[float, float]:
    """(absolute error in metres, error relative to the true range)."""
    t = np.asarray(t, dtype=np.float64)
    dt = float(np.linalg.norm(np.asarray(t_hat, dtype=np.float64) - t))
    rng = float(np.linalg.norm(t))
    if rng == 0:
        raise ConfigError("relative position error undefined for zero range")
    return dt, dt / rng


# ---------------------------------------------------------------- discretisation

@dataclass(frozen=True)
class ViewsphereGrid:
    az_step: float = 30.0
    el_step: float = 30.0

    def __post_init__(self):
        if self.az_step <= 0 or self.el_step <= 0:
            raise ConfigError("viewsphere steps must be positive")
        if (360.0 / self.az_step) % 1 or (180.0 / self.el_step) % 1:
            raise ConfigError("viewsphere steps must divide 360 and 180 degrees")

    @property
    def n_az(self) -> int:
        return int(round(360.0 / self.az_step))

    @property
    def n_el(self) -> int:
        return int(round(180.0 / self.el_step))

    @property
    def num_classes(self) -> int:
        return self.n_az * self.n_el


def viewing_direction(r) -> np.ndarray:
    """Camera boresight -z expressed in the target frame: ``R^T (0, 0, -1)``."""
    # + 0.0 turns -0.0 into 0.0 so atan2 keeps the azimuth at 0 on the axes.
    return -np.asarray(r, dtype=np.float64)[2, :] + 0.0


def viewsphere_class(r, grid: ViewsphereGrid) -> int:
    d = viewing_direction(r)
    d = d / np.linalg.norm(d)
    az = math.degrees(math.atan2(d[1], d[0])) % 360.0
    el = math.degrees(math.asin(max(-1.0, min(1.0, d[2]))))
    ia = min(int(az // grid.az_step), grid.n_az - 1)
    ie = min(int((el + 90.0) // grid.el_step), grid.n_el - 1)
    return ia * grid.n_el + ie


def depth_edges(ranges, k: int) -> np.ndarray:
    """``k`` equal-width bins spanning the observed min and max range."""
    ranges = np.asarray(ranges, dtype=np.float64)
    lo, hi = float(ranges.min()), float(ranges.max())
    if hi <= lo:
        hi = lo + 1e-6
    return np.linspace(lo, hi, k + 1)


def depth_bin(t, edges) -> int:
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigError("depth edges must be strictly ascending")
    v = float(np.linalg.norm(t))
    if v < edges[0] or v > edges[-1]:
        raise OutOfRange(f"range {v} outside [{edges[0]}, {edges[-1]}]")
    return min(int(np.searchsorted(edges, v, side="right")) - 1, edges.size - 2)

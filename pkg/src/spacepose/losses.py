"""Stage losses with learned log-sigma task weighting, and the reprojection objective."""

from __future__ import annotations

import math

import numpy as np

from spacepose import geometry as geo
from spacepose.diff import ops
from spacepose.diff.node import Node
from spacepose.errors import ConfigError

DEGENERATE_EPS = 1e-9


def _weighted(loss: Node, log_sigma: Node, factor: float) -> Node:
    return ops.scale(loss * ops.exp(ops.scale(log_sigma, -2.0)), factor)


def relative_position_loss(t_hat: Node, t) -> Node:
    """Sum over the batch of ``||t - t_hat|| / ||t||``."""
    t = np.asarray(t, dtype=t_hat.dtype)
    rng = np.linalg.norm(t, axis=-1)
    if np.any(rng <= 0):
        raise ConfigError("relative position loss undefined for zero range")
    return ops.sum(ops.norm2(t_hat - t) * (1.0 / rng))


def stage1_loss(logits: Node, onehot, t_hat: Node, t, log_sigma_a: Node, log_sigma_t: Node) -> Node:
    ce = ops.softmax_cross_entropy(logits, onehot)
    lt = relative_position_loss(t_hat, t)
    total = _weighted(ce, log_sigma_a, 0.5) + _weighted(lt, log_sigma_t, 1.0) + log_sigma_a + log_sigma_t
    return ops.sum(total)


def stage2_loss(r_hat: Node, r, t_hat: Node, t, log_sigma_r: Node, log_sigma_t: Node) -> Node:
    """``r_hat``/``t_hat`` stack every (time, batch) row: [M, 6] and [M, 3]."""
    lr = ops.sum(ops.norm2(r_hat - np.asarray(r, dtype=r_hat.dtype)))
    lt = ops.sum(ops.norm2(t_hat - np.asarray(t, dtype=t_hat.dtype)))
    total = (_weighted(lr, log_sigma_r, 1.0) + _weighted(lt, log_sigma_t, 1.0)
             + ops.scale(log_sigma_r + log_sigma_t, 2.0))
    return ops.sum(total)


def behind_camera_penalty(count: int, width: int, height: int) -> float:
    """Constant charge of one image diagonal per keypoint that falls behind the camera."""
    return float(count) * math.hypot(width, height)


def _cross(a: Node, b: Node) -> Node:
    ax, ay, az = a[:, 0:1], a[:, 1:2], a[:, 2:3]
    bx, by, bz = b[:, 0:1], b[:, 1:2], b[:, 2:3]
    return ops.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=1)


def sixd_to_rotation_node(r6: Node) -> Node:
    """Differentiable Gram-Schmidt from [B, 6] to [B, 3, 3] (columns b1, b2, b3)."""
    a1, a2 = r6[:, 0:3], r6[:, 3:6]
    b1 = a1 / ops.norm2(a1, keepdims=True)
    u2 = a2 - ops.sum(b1 * a2, axis=1, keepdims=True) * b1
    b2 = u2 / ops.norm2(u2, keepdims=True)
    b3 = _cross(b1, b2)
    return ops.stack([b1, b2, b3], axis=2)


def degenerate_rows(r6: np.ndarray) -> np.ndarray:
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[:, :3], r6[:, 3:]
    n1 = np.linalg.norm(a1, axis=1)
    b1 = a1 / np.where(n1 > 0, n1, 1.0)[:, None]
    u2 = a2 - (b1 * a2).sum(axis=1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=1)
    return (n1 <= DEGENERATE_EPS) | (n2 <= DEGENERATE_EPS * np.maximum(np.linalg.norm(a2, axis=1), 1.0))


def project_keypoints_gt(rotations, positions, k: geo.CameraIntrinsics, keypoints) -> np.ndarray:
    """Ground-truth pixel coordinates [B, N, 2]; every keypoint must be in front of the camera."""
    pc = np.einsum("bij,nj->bni", np.asarray(rotations), np.asarray(keypoints)) + np.asarray(positions)[:, None]
    if np.any(pc[..., 2] <= geo.Z_MIN):
        raise ConfigError("ground-truth keypoint behind the camera")
    return np.stack([k.fx * pc[..., 0] / pc[..., 2] + k.cx, k.fy * pc[..., 1] / pc[..., 2] + k.cy], axis=-1)


def stage3_loss(r_hat: Node, t_hat: Node, uv_gt: np.ndarray, k: geo.CameraIntrinsics, keypoints,
                width: int, height: int) -> Node:
    """Summed pixel distance between ground-truth and predicted keypoint projections.

    ``uv_gt`` comes from :func:`project_keypoints_gt`. Rows whose 6D output
    cannot be orthogonalised, and keypoints predicted behind the camera, are
    charged :func:`behind_camera_penalty` per keypoint instead of a distance.
    """
    b, n = uv_gt.shape[:2]
    dtype = r_hat.dtype
    pts = np.asarray(keypoints, dtype=dtype)
    if r_hat.shape != (b, 6) or t_hat.shape != (b, 3):
        raise ConfigError(f"stage 3 shapes: r {r_hat.shape}, t {t_hat.shape}, uv {uv_gt.shape}")
    bad = degenerate_rows(r_hat.value)
    penalty = behind_camera_penalty(int(bad.sum()) * n, width, height)
    good = np.flatnonzero(~bad)
    if good.size == 0:
        return ops.sum(ops.scale(r_hat, 0.0)) + penalty
    if good.size < b:
        r_hat, t_hat, uv_gt = r_hat[good], t_hat[good], uv_gt[good]
    rot = sixd_to_rotation_node(r_hat)                                   # [B, 3, 3]
    pc = ops.matmul(rot, pts.T) + ops.reshape(t_hat, (len(good), 3, 1))  # [B, 3, N]
    z = pc[:, 2, :]
    front = z.value > geo.Z_MIN
    penalty += behind_camera_penalty(int((~front).sum()), width, height)
    mask = front.astype(dtype)
    z_safe = z * mask + (1.0 - mask)
    u = ops.scale(pc[:, 0, :] / z_safe, k.fx) + k.cx
    v = ops.scale(pc[:, 1, :] / z_safe, k.fy) + k.cy
    du = (u - uv_gt[..., 0]) * mask
    dv = (v - uv_gt[..., 1]) * mask
    dist = ops.norm2(ops.stack([du, dv], axis=2), axis=2)
    return ops.sum(dist) + penalty

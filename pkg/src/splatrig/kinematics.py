"""Forward kinematics over the kinematic tree and temporal pose smoothing.

The per-joint world transforms returned here are the skinning-ready ones:
each joint's local transform rotates about its own rest position, so the
chain product already folds in the inverse bind and an all-identity pose
yields identity transforms everywhere. Torch variants (``*_t``) carry
gradients for the fitting stages.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .rotation import quat_to_matrix_t
from .tensors import as_tensor
from .scene_core import PoseSequence, Skeleton

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class JointWorldTransforms:
    """World transforms (B,4,4) and posed joint positions (B,3) for one frame.

    ``transforms[b]`` maps canonical-space points rigidly attached to joint b
    into the posed frame; applied to the rest joint position it returns
    ``posed_joints[b]``.
    """

    transforms: np.ndarray
    posed_joints: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.transforms, dtype=np.float64)
        p = np.asarray(self.posed_joints, dtype=np.float64)
        if t.ndim != 3 or t.shape[1:] != (4, 4) or p.shape != (t.shape[0], 3):
            raise ValueError(f"inconsistent shapes {t.shape} / {p.shape}")
        t = t.copy()
        p = p.copy()
        t.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "transforms", t)
        object.__setattr__(self, "posed_joints", p)


def fk_transforms_t(joints: torch.Tensor, parents: np.ndarray, order: np.ndarray,
                    frame_pose: torch.Tensor, root_translation: torch.Tensor) -> torch.Tensor:
    """Differentiable FK for one frame; returns skinning matrices (B,4,4).

    ``joints`` (B,3) rest positions, ``frame_pose`` (B,4) local quaternions
    (normalized internally), ``root_translation`` (3,). Joint b's transform
    is parent_chain o rotate(theta_b about rest joint b); the root
    translation is added to every output translation.
    """
    b = joints.shape[0]
    rot = quat_to_matrix_t(frame_pose)  # (B,3,3)
    # local transform: rotate about own rest position -> [R | j - R j]
    local_t = joints - torch.einsum("bij,bj->bi", rot, joints)
    world_rot = [None] * b
    world_t = [None] * b
    for j in order.tolist():
        p = int(parents[j])
        if p < 0:
            world_rot[j] = rot[j]
            world_t[j] = local_t[j]
        else:
            world_rot[j] = world_rot[p] @ rot[j]
            world_t[j] = world_rot[p] @ local_t[j] + world_t[p]
    rot_stack = torch.stack(world_rot)
    t_stack = torch.stack(world_t) + root_translation
    out = torch.zeros((b, 4, 4), dtype=joints.dtype)
    out[:, :3, :3] = rot_stack
    out[:, :3, 3] = t_stack
    out[:, 3, 3] = 1.0
    return out


def forward_kinematics(skeleton: Skeleton, frame_pose: np.ndarray,
                       root_translation=None) -> JointWorldTransforms:
    """Pose one frame of the skeleton.

    ``frame_pose`` is (B,4) local unit quaternions; ``root_translation``
    defaults to zero. Raises on a joint-count mismatch.
    """
    frame_pose = np.asarray(frame_pose, dtype=np.float64)
    if frame_pose.shape != (skeleton.joint_count, 4):
        raise ValueError(
            f"frame_pose shape {frame_pose.shape} does not match skeleton with {skeleton.joint_count} joints")
    if root_translation is None:
        root_translation = np.zeros(3)
    root_translation = np.asarray(root_translation, dtype=np.float64)

    transforms = fk_transforms_t(
        as_tensor(skeleton.joints),
        skeleton.parents,
        skeleton.topological_order(),
        as_tensor(frame_pose),
        as_tensor(root_translation),
    ).numpy()
    posed = np.einsum("bij,bj->bi", transforms[:, :3, :3], skeleton.joints) + transforms[:, :3, 3]
    return JointWorldTransforms(transforms, posed)


def smooth_theta_t(theta: torch.Tensor, w: int) -> torch.Tensor:
    """Sliding-window quaternion average over frames, clamped at the ends.

    Window members are hemisphere-aligned to the window's center frame
    before the componentwise mean; the mean is renormalized. Near-zero means
    (norm < 1e-8) fall back to the center frame unchanged.
    """
    if w == 0:
        return theta
    t_count = theta.shape[0]
    frames = []
    fallbacks = 0
    for t in range(t_count):
        lo, hi = max(0, t - w), min(t_count - 1, t + w)
        window = theta[lo:hi + 1]
        center = theta[t]
        sign = torch.sign((window * center).sum(dim=-1, keepdim=True)).detach()
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
        mean = (window * sign).mean(dim=0)
        norm = mean.norm(dim=-1, keepdim=True)
        degenerate = norm < 1e-8
        fallbacks += int(degenerate.sum())
        frames.append(torch.where(degenerate, center, mean / norm.clamp_min(1e-12)))
    if fallbacks:
        log.warning("pose smoothing fell back to the center frame for %d joint windows", fallbacks)
    return torch.stack(frames)


def smooth_translation_t(root: torch.Tensor, w: int) -> torch.Tensor:
    if w == 0:
        return root
    t_count = root.shape[0]
    return torch.stack([root[max(0, t - w):min(t_count - 1, t + w) + 1].mean(dim=0)
                        for t in range(t_count)])


def smooth_poses(poses: PoseSequence, w: int) -> PoseSequence:
    """Smooth a pose sequence with a clamped window of half-width ``w``.

    ``w = 0`` returns the input unchanged (bitwise).
    """
    if w < 0:
        raise ValueError("half-window w must be >= 0")
    if w == 0:
        return poses
    theta = smooth_theta_t(as_tensor(poses.theta), w).numpy()
    root = smooth_translation_t(as_tensor(poses.root_translation), w).numpy()
    return PoseSequence(theta, root)


def pose_frame_t(theta: torch.Tensor, root: torch.Tensor, w: int, t: int):
    """Smoothed (frame_pose, root_translation) for frame t, gradient-carrying."""
    return smooth_theta_t(theta, w)[t], smooth_translation_t(root, w)[t]

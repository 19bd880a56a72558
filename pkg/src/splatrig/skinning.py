"""Splat-to-joint binding and linear blend skinning.

Binding is computed once on the canonical cloud with exact K-nearest-joint
search and inverse-distance weights, then frozen. ``lbs_deform`` blends the
per-joint skinning matrices, moves positions by the blended transform and
composes rotations with the polar-projected rotational block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .kinematics import JointWorldTransforms
from .rotation import matrix_to_quat_t, polar_rotation_t, quat_multiply_t, quat_normalize_t
from .scene_core import GaussianCloud, Skeleton
from .tensors import as_tensor

DEFAULT_K = 4
COINCIDENT_DISTANCE = 1e-9


@dataclass(frozen=True)
class SkinBinding:
    """Per-splat joint indices (N,K) and convex weights (N,K)."""

    joint_indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.joint_indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if idx.ndim != 2 or w.shape != idx.shape:
            raise ValueError(f"inconsistent binding shapes {idx.shape} / {w.shape}")
        idx = idx.copy()
        w = w.copy()
        idx.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "joint_indices", idx)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.joint_indices.shape[1]


def bind(cloud: GaussianCloud, skeleton: Skeleton, k: int = DEFAULT_K) -> SkinBinding:
    """Bind each splat to its K nearest joints with inverse-distance weights.

    A splat within ``COINCIDENT_DISTANCE`` of a joint is bound rigidly to the
    nearest such joint (the inverse-distance formula would divide by zero).
    """
    b = skeleton.joint_count
    if not (1 <= k <= b):
        raise ValueError(f"k={k} must satisfy 1 <= k <= B={b}")

    d = np.linalg.norm(cloud.positions[:, None, :] - skeleton.joints[None, :, :], axis=-1)  # (N,B)
    # exact KNN: partial sort then order the K selected columns by distance
    part = np.argpartition(d, kth=k - 1, axis=1)[:, :k]
    part_d = np.take_along_axis(d, part, axis=1)
    order = np.argsort(part_d, axis=1, kind="stable")
    idx = np.take_along_axis(part, order, axis=1)
    dist = np.take_along_axis(part_d, order, axis=1)

    weights = np.empty_like(dist)
    coincident = dist[:, 0] < COINCIDENT_DISTANCE
    safe = ~coincident
    inv = 1.0 / np.clip(dist[safe], COINCIDENT_DISTANCE, None)
    weights[safe] = inv / inv.sum(axis=1, keepdims=True)
    weights[coincident] = 0.0
    weights[coincident, 0] = 1.0
    return SkinBinding(idx, weights)


def blended_transforms_t(binding_idx: torch.Tensor, binding_w: torch.Tensor,
                         joint_mats: torch.Tensor) -> torch.Tensor:
    """Per-splat blended 4x4 transforms: T_i = sum_k w_ik * A_{idx_ik}."""
    gathered = joint_mats[binding_idx]          # (N,K,4,4)
    return (binding_w[..., None, None] * gathered).sum(dim=1)


def lbs_apply_t(positions: torch.Tensor, rotations: torch.Tensor,
                binding_idx: torch.Tensor, binding_w: torch.Tensor,
                joint_mats: torch.Tensor):
    """Differentiable LBS core; returns (positions, rotations) tensors.

    Positions go through the blended 4x4; the rotational 3x3 block is
    projected to its nearest rotation (polar decomposition) before being
    composed with the canonical splat quaternions.
    """
    blended = blended_transforms_t(binding_idx, binding_w, joint_mats)
    new_pos = torch.einsum("nij,nj->ni", blended[:, :3, :3], positions) + blended[:, :3, 3]
    rot_block = polar_rotation_t(blended[:, :3, :3])
    q_block = matrix_to_quat_t(rot_block)
    new_rot = quat_normalize_t(quat_multiply_t(q_block, rotations))
    return new_pos, new_rot


def lbs_deform(cloud: GaussianCloud, binding: SkinBinding, frame: JointWorldTransforms) -> GaussianCloud:
    """Rigidly deform the canonical cloud by one posed frame.

    Scales, opacities and colors pass through untouched; the inputs are
    never mutated.
    """
    if binding.joint_indices.shape[0] != cloud.count:
        raise ValueError(
            f"binding covers {binding.joint_indices.shape[0]} splats, cloud has {cloud.count}")
    if int(binding.joint_indices.max()) >= frame.transforms.shape[0]:
        raise ValueError("binding refers to joints beyond the posed frame")

    pos, rot = lbs_apply_t(
        as_tensor(cloud.positions),
        as_tensor(cloud.rotations),
        as_tensor(binding.joint_indices),
        as_tensor(binding.weights),
        as_tensor(frame.transforms),
    )
    return cloud.with_(positions=pos.numpy(), rotations=rot.numpy())

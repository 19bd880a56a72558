"""Canonical data types shared by every stage of the pipeline.

All types are immutable after construction (arrays are marked read-only) and
carry float64 data. Constructors only coerce shapes and dtypes; semantic
invariants (unit quaternions, tree structure, ...) are checked by
:func:`validate`, which reports the first violation instead of raising so
that deliberately broken instances can be inspected in tests and tools.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .rotation import axis_angle_quat, quat_normalize

ROOT_PARENT = -1


def _freeze(a: np.ndarray) -> np.ndarray:
    # copy so freezing never flips flags on a caller's array
    a = np.ascontiguousarray(a).copy()
    a.flags.writeable = False
    return a


def _as_f64(a, shape_tail: Tuple[int, ...], name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail:
        raise ValueError(f"{name} must have shape (N, {', '.join(map(str, shape_tail))}), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class GaussianCloud:
    """A set of N anisotropic Gaussian splats.

    positions (N,3), rotations (N,4) wxyz unit quaternions, scales (N,3)
    strictly positive, opacities (N,) in [0,1], colors (N,3) flat RGB in
    [0,1].
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.positions).shape[0]
        object.__setattr__(self, "positions", _freeze(_as_f64(self.positions, (3,), "positions")))
        object.__setattr__(self, "rotations", _freeze(_as_f64(self.rotations, (4,), "rotations")))
        object.__setattr__(self, "scales", _freeze(_as_f64(self.scales, (3,), "scales")))
        opac = np.asarray(self.opacities, dtype=np.float64)
        if opac.shape != (n,):
            raise ValueError(f"opacities must have shape ({n},), got {opac.shape}")
        object.__setattr__(self, "opacities", _freeze(opac))
        object.__setattr__(self, "colors", _freeze(_as_f64(self.colors, (3,), "colors")))
        for name in ("rotations", "scales", "colors"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} leading dimension {getattr(self, name).shape[0]} != {n}")
        if n < 1:
            raise ValueError("cloud must contain at least one splat")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def with_(self, **updates) -> "GaussianCloud":
        """Copy with some fields replaced (the only mutation mechanism)."""
        data = {
            "positions": self.positions,
            "rotations": self.rotations,
            "scales": self.scales,
            "opacities": self.opacities,
            "colors": self.colors,
        }
        data.update(updates)
        return GaussianCloud(**data)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (3,3) plus translation (3,)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be (3,3), got {rot.shape}")
        if tra.shape != (3,):
            raise ValueError(f"translation must be (3,), got {tra.shape}")
        object.__setattr__(self, "rotation", _freeze(rot))
        object.__setattr__(self, "translation", _freeze(tra))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other)(p) = self(other(p))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class Skeleton:
    """Rooted kinematic tree over B joints.

    ``joints`` are rest positions (B,3); ``parents`` (B,) holds the parent
    index of each joint with ``ROOT_PARENT`` (-1) at the single root.
    ``inverse_bind`` (B,4,4) inverts each joint's rest-pose world transform
    (identity rotation, translation to the rest position), so composing a
    posed world transform with it makes the rest pose a no-op. ``names`` is
    optional metadata preserved from imported rigs.
    """

    joints: np.ndarray
    parents: np.ndarray
    inverse_bind: np.ndarray = None  # type: ignore[assignment]
    names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        joints = _as_f64(self.joints, (3,), "joints")
        parents = np.asarray(self.parents, dtype=np.int64)
        b = joints.shape[0]
        if parents.shape != (b,):
            raise ValueError(f"parents must have shape ({b},), got {parents.shape}")
        if self.inverse_bind is None:
            inv = np.tile(np.eye(4), (b, 1, 1))
            inv[:, :3, 3] = -joints
        else:
            inv = np.asarray(self.inverse_bind, dtype=np.float64)
            if inv.shape != (b, 4, 4):
                raise ValueError(f"inverse_bind must be ({b},4,4), got {inv.shape}")
        object.__setattr__(self, "joints", _freeze(joints))
        object.__setattr__(self, "parents", _freeze(parents))
        object.__setattr__(self, "inverse_bind", _freeze(inv))
        if self.names is not None:
            names = tuple(str(s) for s in self.names)
            if len(names) != b:
                raise ValueError(f"names must have length {b}")
            object.__setattr__(self, "names", names)

    @property
    def joint_count(self) -> int:
        return self.joints.shape[0]

    @property
    def root(self) -> int:
        roots = np.flatnonzero(self.parents == ROOT_PARENT)
        if len(roots) != 1:
            raise ValueError(f"skeleton has {len(roots)} roots, expected exactly 1")
        return int(roots[0])

    def children(self) -> list:
        kids = [[] for _ in range(self.joint_count)]
        for j, p in enumerate(self.parents):
            if p != ROOT_PARENT:
                kids[int(p)].append(j)
        return kids

    def topological_order(self) -> np.ndarray:
        """Joint indices ordered root-first (parents before children)."""
        kids = self.children()
        order = [self.root]
        i = 0
        while i < len(order):
            order.extend(kids[order[i]])
            i += 1
        if len(order) != self.joint_count:
            raise ValueError("parents do not form a single connected tree")
        return np.asarray(order, dtype=np.int64)

    def edges(self) -> set:
        """Undirected edge set {(min, max), ...} of the tree."""
        return {(min(j, int(p)), max(j, int(p)))
                for j, p in enumerate(self.parents) if p != ROOT_PARENT}


@dataclass(frozen=True)
class PoseSequence:
    """Per-frame local joint rotations plus a global root translation.

    ``theta`` has shape (T, B, 4), wxyz unit quaternions;
    ``root_translation`` has shape (T, 3).
    """

    theta: np.ndarray
    root_translation: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 3 or theta.shape[2] != 4 or theta.shape[0] < 1:
            raise ValueError(f"theta must have shape (T, B, 4) with T >= 1, got {theta.shape}")
        root = np.asarray(self.root_translation, dtype=np.float64)
        if root.shape != (theta.shape[0], 3):
            raise ValueError(f"root_translation must be ({theta.shape[0]}, 3), got {root.shape}")
        object.__setattr__(self, "theta", _freeze(theta))
        object.__setattr__(self, "root_translation", _freeze(root))

    @property
    def frame_count(self) -> int:
        return self.theta.shape[0]

    @property
    def joint_count(self) -> int:
        return self.theta.shape[1]

    @staticmethod
    def identity(frame_count: int, joint_count: int) -> "PoseSequence":
        theta = np.zeros((frame_count, joint_count, 4))
        theta[..., 0] = 1.0
        return PoseSequence(theta, np.zeros((frame_count, 3)))

    def with_theta(self, theta: np.ndarray) -> "PoseSequence":
        return PoseSequence(theta, self.root_translation)


@dataclass(frozen=True)
class Violation:
    """First failed invariant of a validated object."""

    field: str
    index: Optional[int]
    message: str

    def __str__(self):
        where = f" at index {self.index}" if self.index is not None else ""
        return f"{self.field}{where}: {self.message}"


ValidationResult = Optional[Violation]  # None means ok

QUAT_NORM_TOL = 1e-6


def _check_quats(q: np.ndarray, field_name: str) -> ValidationResult:
    norms = np.linalg.norm(q.reshape(-1, 4), axis=-1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > QUAT_NORM_TOL)
    if len(bad):
        i = int(bad[0])
        return Violation(field_name, i, f"quaternion norm {norms[i]:.6g} differs from 1 by more than {QUAT_NORM_TOL}")
    return None


def validate_cloud(cloud: GaussianCloud) -> ValidationResult:
    v = _check_quats(cloud.rotations, "rotations")
    if v:
        return v
    bad = np.flatnonzero(~np.all(cloud.scales > 0, axis=1))
    if len(bad):
        return Violation("scales", int(bad[0]), "scale must be strictly positive")
    bad = np.flatnonzero((cloud.opacities < 0) | (cloud.opacities > 1))
    if len(bad):
        return Violation("opacities", int(bad[0]), "opacity must lie in [0, 1]")
    bad = np.flatnonzero(~np.all((cloud.colors >= 0) & (cloud.colors <= 1), axis=1))
    if len(bad):
        return Violation("colors", int(bad[0]), "color must lie in [0, 1]")
    if not np.all(np.isfinite(cloud.positions)):
        return Violation("positions", int(np.flatnonzero(~np.all(np.isfinite(cloud.positions), axis=1))[0]),
                         "position must be finite")
    return None


def validate_skeleton(skeleton: Skeleton) -> ValidationResult:
    parents = skeleton.parents
    b = skeleton.joint_count
    roots = np.flatnonzero(parents == ROOT_PARENT)
    if len(roots) == 0:
        return Violation("parents", None, "no root (no parent equals -1)")
    if len(roots) > 1:
        return Violation("parents", int(roots[1]), f"multiple roots: joints {roots.tolist()}")
    out_of_range = np.flatnonzero((parents != ROOT_PARENT) & ((parents < 0) | (parents >= b)))
    if len(out_of_range):
        return Violation("parents", int(out_of_range[0]), "parent index out of range")
    # cycle detection by walking to the root from every node
    for j in range(b):
        seen = set()
        node = j
        while parents[node] != ROOT_PARENT:
            if node in seen:
                cycle = sorted(seen)
                return Violation("parents", j, f"cycle involving joints {cycle}")
            seen.add(node)
            node = int(parents[node])
    rest_world = np.tile(np.eye(4), (b, 1, 1))
    rest_world[:, :3, 3] = skeleton.joints
    residual = np.einsum("bij,bjk->bik", skeleton.inverse_bind, rest_world) - np.eye(4)
    bad = np.flatnonzero(np.abs(residual).reshape(b, -1).max(axis=1) > 1e-6)
    if len(bad):
        return Violation("inverse_bind", int(bad[0]), "inverse_bind composed with rest world transform is not identity")
    return None


def validate_poses(poses: PoseSequence, skeleton: Optional[Skeleton] = None) -> ValidationResult:
    v = _check_quats(poses.theta, "theta")
    if v:
        # report the frame index of the first bad quaternion
        flat = int(v.index)
        return Violation("theta", flat // poses.joint_count,
                         f"joint {flat % poses.joint_count}: {v.message}")
    if skeleton is not None and poses.joint_count != skeleton.joint_count:
        return Violation("theta", None,
                         f"pose joint count {poses.joint_count} != skeleton joint count {skeleton.joint_count}")
    if not np.all(np.isfinite(poses.root_translation)):
        return Violation("root_translation", None, "translation must be finite")
    return None


def validate(obj: Union[GaussianCloud, Skeleton, PoseSequence]) -> ValidationResult:
    """Dispatch to the type-specific validator. None means every invariant holds."""
    if isinstance(obj, GaussianCloud):
        return validate_cloud(obj)
    if isinstance(obj, Skeleton):
        return validate_skeleton(obj)
    if isinstance(obj, PoseSequence):
        return validate_poses(obj)
    raise TypeError(f"cannot validate {type(obj).__name__}")


# --- synthetic fixtures -----------------------------------------------------

TEMPLATES = ("chain", "star", "pendulum")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a procedural articulated test scene.

    ``template`` is one of ``chain-<k>``, ``star-<k>`` or ``pendulum``
    (a two-bone chain whose middle joint swings). ``amplitude_deg`` drives a
    sinusoidal swing of ``moving_joint`` about ``axis``; 0 gives identity
    motion. Splats are scattered around every bone within ``jitter`` of the
    segment, and all positions are guaranteed to lie inside
    ``bounding_radius`` (default: chain extent plus margin).
    """

    template: str = "pendulum"
    bone_length: float = 1.0
    splats_per_bone: int = 100
    frame_count: int = 32
    amplitude_deg: Optional[float] = None
    moving_joint: int = 1
    axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    jitter: float = 0.04
    seed: int = 0
    bounding_radius: Optional[float] = None

    def parse_template(self) -> Tuple[str, int]:
        name = self.template.strip().lower()
        if name == "pendulum":
            return "chain", 2
        for prefix in ("chain", "star"):
            if name.startswith(prefix + "-"):
                try:
                    k = int(name[len(prefix) + 1:])
                except ValueError:
                    raise ValueError(f"unknown template {self.template!r}")
                if k < 1:
                    raise ValueError("template arm/bone count must be >= 1")
                return prefix, k
        raise ValueError(f"unknown template {self.template!r}; expected chain-<k>, star-<k> or pendulum")

    def resolved_amplitude_deg(self) -> float:
        if self.amplitude_deg is not None:
            return float(self.amplitude_deg)
        return 45.0 if self.template.strip().lower() == "pendulum" else 0.0


def _template_joints(kind: str, k: int, bone_length: float) -> Tuple[np.ndarray, np.ndarray]:
    if kind == "chain":
        joints = np.zeros((k + 1, 3))
        joints[:, 0] = np.arange(k + 1) * bone_length
        parents = np.arange(-1, k)
    else:  # star: root at origin, k arms in the xy plane
        joints = np.zeros((k + 1, 3))
        angles = 2 * np.pi * np.arange(k) / k
        joints[1:, 0] = bone_length * np.cos(angles)
        joints[1:, 1] = bone_length * np.sin(angles)
        parents = np.concatenate([[ROOT_PARENT], np.zeros(k, dtype=np.int64)])
    return joints, parents.astype(np.int64)


def make_synthetic_scene(spec: SyntheticSpec):
    """Build a (GaussianCloud, Skeleton, PoseSequence) triple from a recipe.

    The pose sequence is the scene's procedural ground-truth motion: every
    joint holds identity except ``moving_joint``, which swings sinusoidally
    about ``axis`` with the template's amplitude over one period of
    ``frame_count`` frames.
    """
    kind, k = spec.parse_template()
    if spec.bone_length <= 0:
        raise ValueError("bone_length must be positive")
    if spec.splats_per_bone < 1:
        raise ValueError("splats_per_bone must be >= 1")
    if spec.frame_count < 1:
        raise ValueError("frame_count must be >= 1")

    joints, parents = _template_joints(kind, k, spec.bone_length)
    skeleton = Skeleton(joints, parents)
    rng = np.random.default_rng(spec.seed)

    bones = [(int(p), j) for j, p in enumerate(parents) if p != ROOT_PARENT]
    positions, rotations, scales, opacities, colors = [], [], [], [], []
    for p, j in bones:
        a, b = joints[p], joints[j]
        u = rng.uniform(0.0, 1.0, size=(spec.splats_per_bone, 1))
        pts = a + u * (b - a) + rng.normal(scale=spec.jitter, size=(spec.splats_per_bone, 3))
        positions.append(pts)
        rotations.append(quat_normalize(rng.normal(size=(spec.splats_per_bone, 4))))
        scales.append(np.exp(rng.normal(loc=np.log(0.03 * spec.bone_length), scale=0.2,
                                        size=(spec.splats_per_bone, 3))))
        opacities.append(rng.uniform(0.6, 0.95, size=spec.splats_per_bone))
        base = rng.uniform(0.15, 0.85, size=3)
        colors.append(np.clip(base + rng.normal(scale=0.05, size=(spec.splats_per_bone, 3)), 0.0, 1.0))

    pos = np.concatenate(positions)
    radius = spec.bounding_radius
    if radius is None:
        radius = (k if kind == "chain" else 1) * spec.bone_length + 6.0 * spec.jitter
    norms = np.linalg.norm(pos, axis=1)
    over = norms > radius
    if np.any(over):
        pos[over] *= (radius / norms[over])[:, None]

    cloud = GaussianCloud(pos, np.concatenate(rotations), np.concatenate(scales),
                          np.concatenate(opacities), np.concatenate(colors))

    t = np.arange(spec.frame_count)
    amp = np.deg2rad(spec.resolved_amplitude_deg())
    angles = amp * np.sin(2 * np.pi * t / spec.frame_count)
    theta = np.zeros((spec.frame_count, skeleton.joint_count, 4))
    theta[..., 0] = 1.0
    if amp != 0.0:
        if not (0 <= spec.moving_joint < skeleton.joint_count):
            raise ValueError("moving_joint out of range")
        for i, ang in enumerate(angles):
            theta[i, spec.moving_joint] = axis_angle_quat(spec.axis, ang)
    poses = PoseSequence(theta, np.zeros((spec.frame_count, 3)))

    return cloud, skeleton, poses

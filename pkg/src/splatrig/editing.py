"""Pose editing: per-joint per-frame rotation edits with undo.

Edits operate on the raw pose quaternions (pre-smoothing); hierarchical
propagation to descendant joints happens implicitly through forward
kinematics. ``replace`` sets one frame's quaternion; ``linear-falloff``
blends the new quaternion into a frame range with a weight ramping
0 -> 1 -> 0 via spherical interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import List, Optional, Tuple

import numpy as np

from .io_formats import SceneDocument
from .scene_core import PoseSequence

BLEND_MODES = ("replace", "linear-falloff")


def slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation between unit quaternions (shortest arc)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 1.0 - 1e-12:
        out = (1.0 - t) * a + t * b
        return out / np.linalg.norm(out)
    omega = np.arccos(np.clip(dot, -1.0, 1.0))
    so = np.sin(omega)
    out = (np.sin((1.0 - t) * omega) * a + np.sin(t * omega) * b) / so
    return out / np.linalg.norm(out)


@dataclass(frozen=True)
class EditCommand:
    """One pose edit: joint ``joint`` at frame ``frame`` gets ``quaternion``.

    With ``frame_range = (t0, t1)`` containing ``frame`` and mode
    ``linear-falloff``, neighboring frames blend toward the new rotation
    with weight rising linearly from 0 at t0 to 1 at ``frame`` and back to 0
    at t1 (the endpoints stay unchanged).
    """

    frame: int
    joint: int
    quaternion: np.ndarray
    frame_range: Optional[Tuple[int, int]] = None
    mode: str = "replace"

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=np.float64)
        if q.shape != (4,):
            raise ValueError("quaternion must be a 4-vector (wxyz)")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError(f"quaternion must be unit norm, got |q| = {np.linalg.norm(q):.6g}")
        object.__setattr__(self, "quaternion", q)
        if self.mode not in BLEND_MODES:
            raise ValueError(f"mode must be one of {BLEND_MODES}")
        if self.mode == "linear-falloff":
            if self.frame_range is None:
                raise ValueError("linear-falloff needs a frame_range")
            t0, t1 = self.frame_range
            if not (t0 <= self.frame <= t1):
                raise ValueError(f"frame {self.frame} outside range [{t0}, {t1}]")

    def validate_against(self, poses: PoseSequence):
        if not (0 <= self.frame < poses.frame_count):
            raise IndexError(f"frame {self.frame} outside [0, {poses.frame_count})")
        if not (0 <= self.joint < poses.joint_count):
            raise IndexError(f"joint {self.joint} outside [0, {poses.joint_count})")
        if self.frame_range is not None:
            t0, t1 = self.frame_range
            if not (0 <= t0 and t1 < poses.frame_count):
                raise IndexError(f"frame range [{t0}, {t1}] outside [0, {poses.frame_count})")


def edited_theta(poses: PoseSequence, command: EditCommand) -> Tuple[np.ndarray, List[int]]:
    """New theta array plus the list of frames whose rotation changed."""
    command.validate_against(poses)
    theta = poses.theta.copy()
    affected: List[int] = []
    if command.mode == "replace":
        if not np.array_equal(theta[command.frame, command.joint], command.quaternion):
            affected.append(command.frame)
        theta[command.frame, command.joint] = command.quaternion
        return theta, affected

    t0, t1 = command.frame_range
    tc = command.frame
    for t in range(t0, t1 + 1):
        if t < tc:
            lam = (t - t0) / (tc - t0) if tc > t0 else 1.0
        elif t > tc:
            lam = (t1 - t) / (t1 - tc) if t1 > tc else 1.0
        else:
            lam = 1.0
        if lam <= 0.0:
            continue
        new_q = command.quaternion if lam >= 1.0 else slerp(theta[t, command.joint],
                                                            command.quaternion, lam)
        if not np.array_equal(theta[t, command.joint], new_q):
            affected.append(t)
        theta[t, command.joint] = new_q
    return theta, affected


@dataclass
class _UndoEntry:
    command: EditCommand
    frames: List[int]
    previous_rows: np.ndarray  # (len(frames), 4) prior quaternions of the edited joint


@dataclass
class EditSession:
    """A loaded document plus the working pose sequence and its undo stack.

    Replaying the stack's commands against the document's poses reproduces
    the working sequence exactly; undo restores the prior quaternion rows
    bitwise. ``render_smoothing_w`` is the smoothing window renders apply on
    top of the raw working poses; an edit therefore invalidates frames
    within that window around the frames it touched.
    """

    document: SceneDocument
    working_poses: PoseSequence = None  # type: ignore[assignment]
    undo_stack: List[_UndoEntry] = dc_field(default_factory=list)
    dirty: bool = False
    render_smoothing_w: int = 0

    def __post_init__(self):
        if self.document.poses is None:
            raise ValueError("document carries no pose sequence to edit")
        if self.working_poses is None:
            self.working_poses = self.document.poses

    def _invalidated(self, affected: List[int]) -> List[int]:
        w = self.render_smoothing_w
        t_count = self.working_poses.frame_count
        frames = set()
        for t in affected:
            frames.update(range(max(0, t - w), min(t_count - 1, t + w) + 1))
        return sorted(frames)

    def apply_edit(self, command: EditCommand) -> List[int]:
        """Apply one command; returns the render-invalidated frame list."""
        theta, affected = edited_theta(self.working_poses, command)
        entry = _UndoEntry(command, affected,
                           self.working_poses.theta[affected, command.joint].copy())
        self.working_poses = self.working_poses.with_theta(theta)
        self.undo_stack.append(entry)
        self.dirty = True
        return self._invalidated(affected)

    def undo(self) -> List[int]:
        """Revert the most recent edit; returns the invalidated frames."""
        if not self.undo_stack:
            return []
        entry = self.undo_stack.pop()
        theta = self.working_poses.theta.copy()
        theta[entry.frames, entry.command.joint] = entry.previous_rows
        self.working_poses = self.working_poses.with_theta(theta)
        self.dirty = bool(self.undo_stack)
        return self._invalidated(entry.frames)

    def replay_check(self) -> bool:
        """True when replaying the undo stack from the document reproduces
        the working poses bitwise (the session invariant)."""
        poses = self.document.poses
        for entry in self.undo_stack:
            theta, _ = edited_theta(poses, entry.command)
            poses = poses.with_theta(theta)
        return np.array_equal(poses.theta, self.working_poses.theta) and \
            np.array_equal(poses.root_translation, self.working_poses.root_translation)

    def commit(self) -> SceneDocument:
        """Fold the working poses back into a new document."""
        return self.document.replace(poses=self.working_poses)

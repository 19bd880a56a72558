import numpy as np
import pytest

from splatrig import PoseSequence, Skeleton, forward_kinematics, smooth_poses
from splatrig.rotation import axis_angle_quat, quat_multiply, quat_normalize, random_unit_quats

from oracles import brute_force_fk, quats_equivalent, random_tree


def chain_skeleton(n_joints, spacing=1.0):
    joints = np.zeros((n_joints, 3))
    joints[:, 0] = np.arange(n_joints) * spacing
    parents = np.arange(-1, n_joints - 1)
    return Skeleton(joints, parents)


def identity_pose(b):
    q = np.zeros((b, 4))
    q[:, 0] = 1.0
    return q


class TestForwardKinematics:
    def test_identity_pose_is_noop(self, rng):
        joints, parents = random_tree(rng, 6)
        skel = Skeleton(joints, parents)
        fk = forward_kinematics(skel, identity_pose(6))
        assert np.allclose(fk.transforms, np.eye(4), atol=1e-12)
        assert np.allclose(fk.posed_joints, skel.joints, atol=1e-12)

    def test_two_joint_rotation_hand_composed(self):
        skel = chain_skeleton(2)
        pose = identity_pose(2)
        pose[0] = axis_angle_quat([0, 0, 1], np.pi / 2)
        fk = forward_kinematics(skel, pose)
        assert np.allclose(fk.posed_joints[1], [0, 1, 0], atol=1e-12)

    def test_three_joint_double_rotation(self):
        # hand-composed: Rz90 about origin then Rz90 about the (moved) middle joint
        skel = chain_skeleton(3)
        pose = identity_pose(3)
        pose[0] = axis_angle_quat([0, 0, 1], np.pi / 2)
        pose[1] = axis_angle_quat([0, 0, 1], np.pi / 2)
        fk = forward_kinematics(skel, pose)
        assert np.allclose(fk.posed_joints[2], [-1, 1, 0], atol=1e-12)

    def test_root_translation_added_everywhere(self):
        skel = chain_skeleton(3)
        fk = forward_kinematics(skel, identity_pose(3), [1.0, 2.0, 3.0])
        assert np.allclose(fk.posed_joints, skel.joints + [1, 2, 3], atol=1e-12)
        assert np.allclose(fk.transforms[:, :3, 3], [1, 2, 3], atol=1e-12)

    def test_posed_joints_consistent_with_transforms(self, rng):
        joints, parents = random_tree(rng, 7)
        skel = Skeleton(joints, parents)
        pose = random_unit_quats(rng, 7)
        fk = forward_kinematics(skel, pose, rng.normal(size=3))
        applied = np.einsum("bij,bj->bi", fk.transforms[:, :3, :3], skel.joints) \
            + fk.transforms[:, :3, 3]
        assert np.allclose(applied, fk.posed_joints, atol=1e-9)

    def test_matches_brute_force_oracle_on_random_trees(self, rng):
        for _ in range(25):
            b = int(rng.integers(2, 11))
            joints, parents = random_tree(rng, b)
            skel = Skeleton(joints, parents)
            pose = random_unit_quats(rng, b)
            root_t = rng.normal(size=3)
            fk = forward_kinematics(skel, pose, root_t)
            expected = brute_force_fk(joints, parents, pose, root_t)
            assert np.abs(fk.transforms - expected).max() < 1e-6

    def test_equivariant_under_root_pre_rotation(self, rng):
        joints, parents = random_tree(rng, 8)
        skel = Skeleton(joints, parents)
        pose = random_unit_quats(rng, 8)
        fk = forward_kinematics(skel, pose)
        r = quat_normalize(rng.normal(size=4))
        pre = pose.copy()
        pre[skel.root] = quat_multiply(r, pose[skel.root])
        fk2 = forward_kinematics(skel, pre)
        from splatrig.rotation import quat_to_matrix
        rot = quat_to_matrix(r)
        pivot = skel.joints[skel.root]
        expected = (fk.posed_joints - pivot) @ rot.T + pivot
        assert np.abs(fk2.posed_joints - expected).max() < 1e-5

    def test_joint_count_mismatch_rejected(self):
        skel = chain_skeleton(3)
        with pytest.raises(ValueError, match="joints"):
            forward_kinematics(skel, identity_pose(4))


class TestSmoothPoses:
    def make_poses(self, theta, root=None):
        t = len(theta)
        root = np.zeros((t, 3)) if root is None else np.asarray(root, dtype=np.float64)
        return PoseSequence(np.asarray(theta, dtype=np.float64), root)

    def test_constant_sequence_unchanged(self, rng):
        q = quat_normalize(rng.normal(size=4))
        poses = self.make_poses(np.tile(q, (6, 1, 1)))
        out = smooth_poses(poses, 2)
        assert np.abs(out.theta - poses.theta).max() < 1e-12

    def test_zero_window_bitwise(self, rng):
        theta = random_unit_quats(rng, 12).reshape(4, 3, 4)
        poses = self.make_poses(theta)
        out = smooth_poses(poses, 0)
        assert out is poses

    def test_sign_flip_neutralized_default_window(self, rng):
        # paper-default window of size 3 (w=1); middle frame carries -q
        q = quat_normalize(rng.normal(size=4))
        theta = np.stack([q, -q, q])[:, None, :]
        out = smooth_poses(self.make_poses(theta), 1)
        for t in range(3):
            assert quats_equivalent(out.theta[t, 0], q, atol=1e-9)

    def test_window_average_matches_hand_computation(self, rng):
        # three nearby quaternions, aligned: mean then renormalize
        base = quat_normalize(rng.normal(size=4))
        qs = np.stack([quat_normalize(base + 0.05 * rng.normal(size=4)) for _ in range(3)])
        out = smooth_poses(self.make_poses(qs[:, None, :]), 1)
        # frame 1's window covers all three
        signs = np.sign(qs @ qs[1])
        mean = (qs * signs[:, None]).mean(axis=0)
        expected = mean / np.linalg.norm(mean)
        assert np.allclose(out.theta[1, 0], expected, atol=1e-12)

    def test_clamped_boundaries(self):
        # frame0's window is frames {0, 1} with w=1: plain truncated average
        qa = np.array([1.0, 0, 0, 0])
        qb = axis_angle_quat([0, 0, 1], 0.4)
        out = smooth_poses(self.make_poses(np.stack([qa, qb, qb])[:, None, :]), 1)
        mean = (qa + qb) / 2
        assert np.allclose(out.theta[0, 0], mean / np.linalg.norm(mean), atol=1e-12)

    def test_translation_channel_linear(self, rng):
        theta = np.tile([1.0, 0, 0, 0], (5, 2, 1))
        root = rng.normal(size=(5, 3))
        a = 3.7
        out1 = smooth_poses(self.make_poses(theta, root), 1)
        out2 = smooth_poses(self.make_poses(theta, a * root), 1)
        assert np.allclose(out2.root_translation, a * out1.root_translation, atol=1e-12)

    def test_output_stays_unit_norm(self, rng):
        theta = random_unit_quats(rng, 7 * 3).reshape(7, 3, 4)
        out = smooth_poses(self.make_poses(theta), 2)
        norms = np.linalg.norm(out.theta, axis=-1)
        assert np.abs(norms - 1).max() < 1e-6

    def test_negative_window_rejected(self, rng):
        poses = self.make_poses(random_unit_quats(rng, 2).reshape(2, 1, 4))
        with pytest.raises(ValueError):
            smooth_poses(poses, -1)

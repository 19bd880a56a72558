import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from splatrig import (PoseSequence, SceneDocument, Skeleton, SyntheticSpec, export_bvh,
                      import_skeleton, load, make_field, make_synthetic_scene, save, validate)
from splatrig.io_formats import (CountMismatchError, DocumentError, TruncatedDocumentError,
                                 VersionError, quat_to_euler_zxy_deg)
from splatrig.rotation import axis_angle_quat, quat_normalize, random_unit_quats

from oracles import bvh_joint_rotation, parse_bvh, quats_equivalent


def fixture_doc(template="chain-2", frames=4, splats=30, seed=0, with_field=False):
    cloud, skel, poses = make_synthetic_scene(
        SyntheticSpec(template=template, frame_count=frames, splats_per_bone=splats, seed=seed))
    field = None
    if with_field:
        from splatrig.hexplane import bounds_from_cloud
        field = make_field(bounds_from_cloud(cloud), frames, spatial_resolution=5,
                           channels=3, hidden=8, seed=seed)
    return SceneDocument(cloud=cloud, skeleton=skel, poses=poses, field=field)


def docs_equal(a: SceneDocument, b: SceneDocument) -> bool:
    if (a.cloud is None) != (b.cloud is None):
        return False
    if a.cloud is not None:
        for f in ("positions", "rotations", "scales", "opacities", "colors"):
            if not np.array_equal(getattr(a.cloud, f), getattr(b.cloud, f)):
                return False
    if (a.skeleton is None) != (b.skeleton is None):
        return False
    if a.skeleton is not None:
        if not np.array_equal(a.skeleton.joints, b.skeleton.joints):
            return False
        if not np.array_equal(a.skeleton.parents, b.skeleton.parents):
            return False
        if a.skeleton.names != b.skeleton.names:
            return False
    if (a.poses is None) != (b.poses is None):
        return False
    if a.poses is not None:
        if not (np.array_equal(a.poses.theta, b.poses.theta)
                and np.array_equal(a.poses.root_translation, b.poses.root_translation)):
            return False
    if (a.field is None) != (b.field is None):
        return False
    if a.field is not None:
        for pa, pb in zip(a.field.planes, b.field.planes):
            if not torch.equal(pa, pb):
                return False
        if not np.array_equal(a.field.spatial_bounds, b.field.spatial_bounds):
            return False
        if a.field.time_bounds != b.field.time_bounds:
            return False
        for ta, tb in zip(a.field.decoder.parameters(), b.field.decoder.parameters()):
            if not torch.equal(ta, tb):
                return False
    return True


class TestSceneRoundTrip:
    def test_chain2_round_trip_bitwise(self):
        doc = fixture_doc(splats=100)
        assert doc.cloud.count == 200
        data = save(doc)
        again = load(data)
        assert docs_equal(doc, again)
        assert save(again) == data  # bytes-level inverse

    def test_round_trip_with_field_and_names(self):
        doc = fixture_doc(with_field=True)
        named = Skeleton(doc.skeleton.joints, doc.skeleton.parents,
                         names=("hip", "spine", "head"))
        doc = doc.replace(skeleton=named)
        again = load(save(doc))
        assert again.skeleton.names == ("hip", "spine", "head")
        assert docs_equal(doc, again)

    def test_partial_documents_valid(self):
        doc = fixture_doc()
        skeleton_only = SceneDocument(skeleton=doc.skeleton)
        again = load(save(skeleton_only))
        assert again.cloud is None and again.poses is None
        assert np.array_equal(again.skeleton.joints, doc.skeleton.joints)

    def test_seventy_joint_document(self, rng):
        joints = rng.normal(size=(70, 3))
        parents = np.concatenate([[-1], rng.integers(0, np.arange(1, 70))]).astype(np.int64)
        doc = SceneDocument(skeleton=Skeleton(joints, parents))
        again = load(save(doc))
        assert again.skeleton.joint_count == 70
        assert validate(again.skeleton) is None

    def test_truncated_payload_reports_offset(self):
        data = save(fixture_doc())
        with pytest.raises(TruncatedDocumentError, match="byte"):
            load(data[:-1])

    def test_bad_magic_rejected(self):
        with pytest.raises(DocumentError, match="magic"):
            load(b"NOPE" + b"\x00" * 64)

    def test_version_mismatch_rejected(self):
        data = bytearray(save(fixture_doc()))
        data[4:8] = (99).to_bytes(4, "little")
        with pytest.raises(VersionError, match="99"):
            load(bytes(data))

    def test_pose_skeleton_joint_count_cross_check(self):
        doc = fixture_doc()
        poses_bad = PoseSequence.identity(2, 5)
        raw = save(SceneDocument(skeleton=doc.skeleton))[:]
        # splice a mismatched POSE document manually via two docs
        d1 = SceneDocument(skeleton=doc.skeleton)
        d2 = SceneDocument(poses=poses_bad)
        # construct combined bytes: easiest is to save both sections through one doc,
        # bypassing construction-time checks by assigning after init
        d1.poses = poses_bad
        with pytest.raises(CountMismatchError, match="joint count"):
            load(save(d1))

    @settings(max_examples=20, deadline=None)
    @given(
        template=st.sampled_from(["chain-1", "chain-3", "star-4", "pendulum"]),
        frames=st.integers(min_value=1, max_value=6),
        splats=st.integers(min_value=1, max_value=25),
        seed=st.integers(min_value=0, max_value=10**6),
        with_field=st.booleans(),
    )
    def test_round_trip_property(self, template, frames, splats, seed, with_field):
        doc = fixture_doc(template, frames, splats, seed, with_field)
        data = save(doc)
        again = load(data)
        assert docs_equal(doc, again)
        assert save(again) == data


class TestBvhExport:
    def test_identity_poses_zero_rotations_and_root_positions(self):
        _, skel, _ = make_synthetic_scene(SyntheticSpec(template="chain-2", frame_count=3))
        root_t = np.array([[0.5, 0, 0], [0, 0.25, 0], [0, 0, -1.0]])
        poses = PoseSequence(PoseSequence.identity(3, 3).theta, root_t)
        text = export_bvh(skel, poses, 1 / 16)
        joints, frames, frame_time, rows = parse_bvh(text)
        assert frames == 3 and frame_time == pytest.approx(1 / 16)
        for t in range(3):
            assert np.allclose(rows[t, 0:3], root_t[t], atol=1e-6)
            assert np.allclose(rows[t, 3:], 0.0, atol=1e-12)

    def test_single_joint_ninety_degrees_z(self):
        skel = Skeleton(np.zeros((1, 3)), np.array([-1]))
        theta = np.array([[axis_angle_quat([0, 0, 1], np.pi / 2)]])
        poses = PoseSequence(theta, np.zeros((1, 3)))
        text = export_bvh(skel, poses, 0.0625)
        joints, frames, _, rows = parse_bvh(text)
        # root channels: 3 positions then Z X Y rotations
        assert rows[0, 3] == pytest.approx(90.0, abs=1e-6)
        assert np.allclose(rows[0, 4:6], 0.0, atol=1e-6)

    def test_thirty_two_frame_block(self):
        _, skel, poses = make_synthetic_scene(SyntheticSpec(template="pendulum", frame_count=32))
        text = export_bvh(skel, poses, 1 / 16)
        assert "Frames: 32" in text
        _, frames, _, rows = parse_bvh(text)
        assert frames == 32 and rows.shape[0] == 32

    def test_reparse_matches_source_rotations(self, rng):
        _, skel, _ = make_synthetic_scene(SyntheticSpec(template="star-3", frame_count=5))
        b = skel.joint_count
        theta = random_unit_quats(rng, 5 * b).reshape(5, b, 4)
        poses = PoseSequence(theta, rng.normal(size=(5, 3)))
        text = export_bvh(skel, poses, 1 / 24)
        joints, frames, _, rows = parse_bvh(text)
        assert len(joints) == b and frames == 5
        # root translation exact (6-decimal text round trip)
        assert np.allclose(rows[:, :3], np.round(poses.root_translation, 6), atol=1e-12)
        # per-joint rotations match to 1e-3 degrees after the Euler round trip
        name_to_source = {f"joint{j}": j for j in range(b)}
        offset = 0
        for joint in joints:
            src = name_to_source[joint.name]
            for t in range(frames):
                got = bvh_joint_rotation(joint, rows[t], offset)
                src_q = poses.theta[t, src]
                got_e = quat_to_euler_zxy_deg(got[None])[0]
                src_e = quat_to_euler_zxy_deg(src_q[None])[0]
                assert np.abs(got_e - src_e).max() < 1e-3
                assert quats_equivalent(got, src_q, atol=1e-7)
            offset += len(joint.channels)

    def test_hierarchy_offsets_are_rest_differences(self):
        _, skel, poses = make_synthetic_scene(SyntheticSpec(template="chain-2", frame_count=1))
        text = export_bvh(skel, poses, 0.1)
        joints, _, _, _ = parse_bvh(text)
        # template chains root at joint 0; offsets mirror rest-position steps
        assert skel.root == 0
        assert np.allclose(joints[0].offset, skel.joints[0], atol=1e-6)
        assert np.allclose(joints[1].offset, skel.joints[1] - skel.joints[0], atol=1e-6)
        assert np.allclose(joints[2].offset, skel.joints[2] - skel.joints[1], atol=1e-6)

    def test_gimbal_rotation_absorbed_into_z(self):
        q = axis_angle_quat([1, 0, 0], np.pi / 2)  # pitch exactly +90
        e = quat_to_euler_zxy_deg(q[None])[0]
        assert e[1] == pytest.approx(90.0)
        assert e[2] == 0.0
        # round trip through scipy: same rotation
        from scipy.spatial.transform import Rotation
        r = Rotation.from_euler("ZXY", e, degrees=True)
        x, y, z, w = r.as_quat()
        assert quats_equivalent(np.array([w, x, y, z]), q, atol=1e-9)

    def test_euler_zxy_matches_scipy_everywhere(self, rng):
        from scipy.spatial.transform import Rotation
        qs = random_unit_quats(rng, 200)
        ours = quat_to_euler_zxy_deg(qs)
        for q, e in zip(qs, ours):
            r = Rotation.from_euler("ZXY", e, degrees=True)
            x, y, z, w = r.as_quat()
            assert quats_equivalent(np.array([w, x, y, z]), q, atol=1e-9)

    def test_header_comment_toggle(self):
        _, skel, poses = make_synthetic_scene(SyntheticSpec(template="chain-1", frame_count=1))
        with_comment = export_bvh(skel, poses, 0.1)
        without = export_bvh(skel, poses, 0.1, include_header_comment=False)
        assert with_comment.startswith("//")
        assert without.startswith("HIERARCHY")

    def test_bad_frame_time_rejected(self):
        _, skel, poses = make_synthetic_scene(SyntheticSpec(template="chain-1", frame_count=1))
        with pytest.raises(ValueError):
            export_bvh(skel, poses, 0.0)


class TestImportSkeleton:
    def test_three_joint_chain(self):
        doc = {"joints": [
            {"position": [0, 0, 0], "parent": None},
            {"position": [1, 0, 0], "parent": 0},
            {"position": [2, 0, 0], "parent": 1},
        ]}
        skel = import_skeleton(doc)
        assert skel.parents.tolist() == [-1, 0, 1]
        assert validate(skel) is None

    def test_json_text_accepted(self):
        text = json.dumps({"joints": [{"position": [0, 0, 0], "parent": -1},
                                      {"position": [0, 1, 0], "parent": 0}]})
        skel = import_skeleton(text)
        assert skel.joint_count == 2

    def test_two_node_cycle_rejected(self):
        doc = {"joints": [
            {"position": [0, 0, 0], "parent": 1},
            {"position": [1, 0, 0], "parent": 0},
        ]}
        with pytest.raises(DocumentError, match="cycl"):
            import_skeleton(doc)

    def test_forest_rejected_with_component_listing(self):
        doc = {"joints": [
            {"position": [0, 0, 0], "parent": None},
            {"position": [1, 0, 0], "parent": 0},
            {"position": [5, 0, 0], "parent": None},
            {"position": [6, 0, 0], "parent": 2},
        ]}
        with pytest.raises(DocumentError, match="forest") as err:
            import_skeleton(doc)
        assert "2" in str(err.value)

    def test_identifiers_preserved_and_round_trip(self):
        doc = {"joints": [
            {"position": [0, 0, 0], "parent": None, "name": "spine"},
            {"position": [0, 1, 0], "parent": 0, "name": "head"},
        ]}
        skel = import_skeleton(doc)
        assert skel.names == ("spine", "head")
        again = load(save(SceneDocument(skeleton=skel)))
        assert again.skeleton.names == ("spine", "head")

    def test_self_parent_marks_root(self):
        doc = {"joints": [{"position": [0, 0, 0], "parent": 0},
                          {"position": [1, 0, 0], "parent": 0}]}
        skel = import_skeleton(doc)
        assert skel.root == 0

    def test_dangling_parent_re_roots(self):
        doc = {"joints": [{"position": [0, 0, 0], "parent": 7},
                          {"position": [1, 0, 0], "parent": 0}]}
        skel = import_skeleton(doc)
        assert skel.root == 0

    def test_empty_document_rejected(self):
        with pytest.raises(DocumentError):
            import_skeleton({"joints": []})
        with pytest.raises(DocumentError):
            import_skeleton({"bones": []})

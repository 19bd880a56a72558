"""Serialization: scene container, BVH motion export, skeleton import.

Scene container layout (all integers and floats little-endian):

    magic   4 bytes  b"ASG1"
    version u32      currently 1
    count   u32      number of sections
    table   count * (tag: 4 bytes, offset: u64, length: u64)
    payloads at the listed offsets

Sections: ``CLOU`` (u32 N; f32 positions N*3, rotations N*4 wxyz,
scales N*3, opacities N, colors N*3), ``SKEL`` (u32 B; f32 joints B*3;
i32 parents B; u8 named flag; per-joint u16-length-prefixed UTF-8 names),
``POSE`` (u32 T; u32 B; f32 theta T*B*4 wxyz; f32 root T*3) and ``HEXF``
(f32 spatial bounds 3*2; f32 time bounds 2; u32 channels; u32 plane count;
per plane u32 r1, u32 r2, f32 data; u32 decoder-array count; per array
u8-length-prefixed name, u8 ndim, u32 dims, f32 data).

Float payloads are stored as float32. A :class:`SceneDocument` quantizes
its contents through float32 on construction, which is what makes
``load(save(doc))`` reproduce the document bit for bit.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field as dc_field
from typing import List, Optional, Tuple

import numpy as np
import torch

from .hexplane import DecoderWeights, HexplaneField
from .rotation import quat_to_matrix
from .scene_core import GaussianCloud, PoseSequence, ROOT_PARENT, Skeleton

log = logging.getLogger(__name__)

MAGIC = b"ASG1"
FORMAT_VERSION = 1

_F4 = np.dtype("<f4")
_I4 = np.dtype("<i4")


class DocumentError(ValueError):
    """Malformed scene document."""


class TruncatedDocumentError(DocumentError):
    def __init__(self, offset: int, wanted: int, have: int):
        self.offset = offset
        super().__init__(f"truncated payload at byte {offset}: needed {wanted} more bytes, have {have}")


class VersionError(DocumentError):
    pass


class CountMismatchError(DocumentError):
    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


def _f32_roundtrip(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def _quantize_cloud(cloud: GaussianCloud) -> GaussianCloud:
    return GaussianCloud(
        _f32_roundtrip(cloud.positions), _f32_roundtrip(cloud.rotations),
        _f32_roundtrip(cloud.scales), _f32_roundtrip(cloud.opacities),
        _f32_roundtrip(cloud.colors))


def _quantize_skeleton(s: Skeleton) -> Skeleton:
    # the inverse bind transforms are derived from the joints, not stored
    return Skeleton(_f32_roundtrip(s.joints), s.parents, names=s.names)


def _quantize_poses(p: PoseSequence) -> PoseSequence:
    return PoseSequence(_f32_roundtrip(p.theta), _f32_roundtrip(p.root_translation))


def _quantize_field(f: HexplaneField) -> HexplaneField:
    planes = [torch.from_numpy(_f32_roundtrip(pl.detach().numpy())) for pl in f.planes]
    d = f.decoder
    q = lambda t: torch.from_numpy(_f32_roundtrip(t.detach().numpy()))
    decoder = DecoderWeights(q(d.w1), q(d.b1), q(d.w2), q(d.b2),
                             (q(d.head_position[0]), q(d.head_position[1])),
                             (q(d.head_rotation[0]), q(d.head_rotation[1])),
                             (q(d.head_scale[0]), q(d.head_scale[1])))
    return HexplaneField(planes, _f32_roundtrip(f.spatial_bounds),
                         (float(np.float32(f.time_bounds[0])), float(np.float32(f.time_bounds[1]))),
                         decoder)


@dataclass
class SceneDocument:
    """Container for any subset of {cloud, skeleton, poses, field}.

    Construction rounds every float payload through float32, matching the
    on-disk precision, so save/load round-trips are exact.
    """

    cloud: Optional[GaussianCloud] = None
    skeleton: Optional[Skeleton] = None
    poses: Optional[PoseSequence] = None
    field: Optional[HexplaneField] = None
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.cloud is not None:
            self.cloud = _quantize_cloud(self.cloud)
        if self.skeleton is not None:
            self.skeleton = _quantize_skeleton(self.skeleton)
        if self.poses is not None:
            self.poses = _quantize_poses(self.poses)
        if self.field is not None:
            self.field = _quantize_field(self.field)

    def replace(self, **updates) -> "SceneDocument":
        data = {"cloud": self.cloud, "skeleton": self.skeleton,
                "poses": self.poses, "field": self.field, "version": self.version}
        data.update(updates)
        return SceneDocument(**data)


# --- encoding ---------------------------------------------------------------


def _pack_f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype=_F4).tobytes()


def _encode_cloud(c: GaussianCloud) -> bytes:
    parts = [struct.pack("<I", c.count)]
    for a in (c.positions, c.rotations, c.scales, c.opacities, c.colors):
        parts.append(_pack_f32(a))
    return b"".join(parts)


def _encode_skeleton(s: Skeleton) -> bytes:
    parts = [struct.pack("<I", s.joint_count), _pack_f32(s.joints),
             np.ascontiguousarray(s.parents, dtype=_I4).tobytes()]
    if s.names is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        for name in s.names:
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(parts)


def _encode_poses(p: PoseSequence) -> bytes:
    return b"".join([struct.pack("<II", p.frame_count, p.joint_count),
                     _pack_f32(p.theta), _pack_f32(p.root_translation)])


def _encode_field(f: HexplaneField) -> bytes:
    parts = [_pack_f32(f.spatial_bounds),
             _pack_f32(np.asarray(f.time_bounds)),
             struct.pack("<II", f.channels, len(f.planes))]
    for plane in f.planes:
        r1, r2, _ = plane.shape
        parts.append(struct.pack("<II", r1, r2))
        parts.append(_pack_f32(plane.detach().numpy()))
    d = f.decoder
    arrays = [("w1", d.w1), ("b1", d.b1), ("w2", d.w2), ("b2", d.b2),
              ("hp.w", d.head_position[0]), ("hp.b", d.head_position[1]),
              ("hr.w", d.head_rotation[0]), ("hr.b", d.head_rotation[1]),
              ("hs.w", d.head_scale[0]), ("hs.b", d.head_scale[1])]
    parts.append(struct.pack("<I", len(arrays)))
    for name, tensor in arrays:
        raw = name.encode("ascii")
        a = tensor.detach().numpy()
        parts.append(struct.pack("<B", len(raw)) + raw)
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(_pack_f32(a))
    return b"".join(parts)


def save(doc: SceneDocument) -> bytes:
    """Serialize a document to bytes."""
    sections: List[Tuple[bytes, bytes]] = []
    if doc.cloud is not None:
        sections.append((b"CLOU", _encode_cloud(doc.cloud)))
    if doc.skeleton is not None:
        sections.append((b"SKEL", _encode_skeleton(doc.skeleton)))
    if doc.poses is not None:
        sections.append((b"POSE", _encode_poses(doc.poses)))
    if doc.field is not None:
        sections.append((b"HEXF", _encode_field(doc.field)))

    header_size = 4 + 4 + 4 + len(sections) * (4 + 8 + 8)
    table = []
    offset = header_size
    for tag, payload in sections:
        table.append(tag + struct.pack("<QQ", offset, len(payload)))
        offset += len(payload)
    return b"".join([MAGIC, struct.pack("<II", doc.version, len(sections)),
                     *table, *(payload for _, payload in sections)])


# --- decoding ---------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.off = offset

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise TruncatedDocumentError(self.off, n, len(self.data) - self.off)
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f32_array(self, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * 4)
        return np.frombuffer(raw, dtype=_F4).astype(np.float64).reshape(shape)

    def i32_array(self, count: int) -> np.ndarray:
        raw = self.take(count * 4)
        return np.frombuffer(raw, dtype=_I4).astype(np.int64)


def _decode_cloud(r: _Reader) -> GaussianCloud:
    start = r.off
    n = r.u32()
    if n < 1:
        raise CountMismatchError(start, f"cloud declares {n} splats")
    return GaussianCloud(r.f32_array((n, 3)), r.f32_array((n, 4)), r.f32_array((n, 3)),
                         r.f32_array((n,)), r.f32_array((n, 3)))


def _decode_skeleton(r: _Reader) -> Skeleton:
    start = r.off
    b = r.u32()
    if b < 1:
        raise CountMismatchError(start, f"skeleton declares {b} joints")
    joints = r.f32_array((b, 3))
    parents = r.i32_array(b)
    names = None
    if r.u8():
        names = tuple(r.take(r.u16()).decode("utf-8") for _ in range(b))
    return Skeleton(joints, parents, names=names)


def _decode_poses(r: _Reader) -> PoseSequence:
    start = r.off
    t, b = r.u32(), r.u32()
    if t < 1 or b < 1:
        raise CountMismatchError(start, f"pose payload declares T={t}, B={b}")
    return PoseSequence(r.f32_array((t, b, 4)), r.f32_array((t, 3)))


def _decode_field(r: _Reader) -> HexplaneField:
    bounds = r.f32_array((3, 2))
    t_lo, t_hi = r.f32_array((2,))
    start = r.off
    channels, plane_count = r.u32(), r.u32()
    if plane_count != 6:
        raise CountMismatchError(start, f"expected 6 planes, document declares {plane_count}")
    planes = []
    for _ in range(6):
        r1, r2 = r.u32(), r.u32()
        planes.append(torch.from_numpy(r.f32_array((r1, r2, channels))))
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u8()).decode("ascii")
        dims = tuple(r.u32() for _ in range(r.u8()))
        arrays[name] = torch.from_numpy(r.f32_array(dims))
    try:
        decoder = DecoderWeights(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"],
                                 (arrays["hp.w"], arrays["hp.b"]),
                                 (arrays["hr.w"], arrays["hr.b"]),
                                 (arrays["hs.w"], arrays["hs.b"]))
    except KeyError as exc:
        raise CountMismatchError(r.off, f"decoder array {exc} missing") from None
    return HexplaneField(planes, bounds, (float(t_lo), float(t_hi)), decoder)


def load(data: bytes) -> SceneDocument:
    """Parse bytes into a document; errors carry the failing byte offset."""
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise DocumentError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported document version {version} (supported: {FORMAT_VERSION})")
    section_count = r.u32()
    table = []
    for _ in range(section_count):
        tag = r.take(4)
        offset, length = r.u64(), r.u64()
        table.append((tag, offset, length))

    doc = SceneDocument(version=version)
    decoders = {b"CLOU": ("cloud", _decode_cloud), b"SKEL": ("skeleton", _decode_skeleton),
                b"POSE": ("poses", _decode_poses), b"HEXF": ("field", _decode_field)}
    for tag, offset, length in table:
        if offset + length > len(data):
            raise TruncatedDocumentError(offset, length, len(data) - offset)
        if tag not in decoders:
            log.warning("skipping unknown section %r", tag)
            continue
        attr, fn = decoders[tag]
        section = _Reader(data[:offset + length], offset)
        value = fn(section)
        if section.off != offset + length:
            raise CountMismatchError(section.off,
                                     f"section {tag.decode()} payload length mismatch: "
                                     f"declared {length}, consumed {section.off - offset}")
        setattr(doc, attr, value)
    if doc.poses is not None and doc.skeleton is not None \
            and doc.poses.joint_count != doc.skeleton.joint_count:
        raise CountMismatchError(0, f"pose joint count {doc.poses.joint_count} != "
                                    f"skeleton joint count {doc.skeleton.joint_count}")
    return doc


def save_scene(path, doc: SceneDocument) -> None:
    with open(path, "wb") as f:
        f.write(save(doc))


def load_scene(path) -> SceneDocument:
    with open(path, "rb") as f:
        return load(f.read())


# --- BVH export ---------------------------------------------------------------

GIMBAL_EPS_DEG = 1e-4


def quat_to_euler_zxy_deg(q: np.ndarray) -> np.ndarray:
    """Intrinsic Z-X-Y Euler angles (degrees) of quaternions: R = Rz Rx Ry.

    Returns (..., 3) as (z, x, y). In the gimbal-locked zone (|x| within
    ``GIMBAL_EPS_DEG`` of 90 degrees) the free rotation is absorbed into the
    Z channel and Y is set to zero.
    """
    m = quat_to_matrix(np.asarray(q, dtype=np.float64))
    batch = m.shape[:-2]
    m = m.reshape((-1, 3, 3))
    out = np.empty((m.shape[0], 3), dtype=np.float64)
    for i, r in enumerate(m):
        sx = np.clip(r[2, 1], -1.0, 1.0)
        x = np.arcsin(sx)
        if 90.0 - abs(np.rad2deg(x)) < GIMBAL_EPS_DEG:
            if sx > 0:
                z = np.arctan2(r[0, 2], r[0, 0])
            else:
                z = np.arctan2(-r[0, 2], r[0, 0])
            y = 0.0
        else:
            z = np.arctan2(-r[0, 1], r[1, 1])
            y = np.arctan2(-r[2, 0], r[2, 2])
        out[i] = (np.rad2deg(z), np.rad2deg(x), np.rad2deg(y))
    return out.reshape(batch + (3,))


def _bvh_joint_name(skeleton: Skeleton, j: int) -> str:
    if skeleton.names is not None:
        return skeleton.names[j].replace(" ", "_") or f"joint{j}"
    return f"joint{j}"


def export_bvh(skeleton: Skeleton, poses: PoseSequence, frame_time: float,
               include_header_comment: bool = True) -> str:
    """Serialize the kinematic tree and motion as BVH text.

    The hierarchy mirrors the tree with offsets equal to rest-position
    differences; the root carries six channels (translation then Z-X-Y
    rotation), other joints three. Rotation channels hold the per-joint
    local quaternions converted to intrinsic Z-X-Y degrees. LF line endings,
    six decimal places.
    """
    if frame_time <= 0:
        raise ValueError("frame_time must be positive")
    if poses.joint_count != skeleton.joint_count:
        raise ValueError("pose/skeleton joint count mismatch")

    kids = skeleton.children()
    root = skeleton.root
    dfs_order: List[int] = []

    lines: List[str] = []
    if include_header_comment:
        lines.append("// exported by splatrig; gimbal-locked rotations (|X| ~ 90deg) "
                     "absorb the free rotation into the Z channel")
    lines.append("HIERARCHY")

    def emit(j: int, depth: int):
        indent = "  " * depth
        dfs_order.append(j)
        if j == root:
            lines.append(f"{indent}ROOT {_bvh_joint_name(skeleton, j)}")
        else:
            lines.append(f"{indent}JOINT {_bvh_joint_name(skeleton, j)}")
        lines.append(f"{indent}{{")
        inner = "  " * (depth + 1)
        parent = skeleton.parents[j]
        offset = skeleton.joints[j] - (skeleton.joints[int(parent)] if parent != ROOT_PARENT
                                       else np.zeros(3))
        lines.append(f"{inner}OFFSET {offset[0]:.6f} {offset[1]:.6f} {offset[2]:.6f}")
        if j == root:
            lines.append(f"{inner}CHANNELS 6 Xposition Yposition Zposition "
                         f"Zrotation Xrotation Yrotation")
        else:
            lines.append(f"{inner}CHANNELS 3 Zrotation Xrotation Yrotation")
        if kids[j]:
            for c in kids[j]:
                emit(c, depth + 1)
        else:
            lines.append(f"{inner}End Site")
            lines.append(f"{inner}{{")
            lines.append(f"{inner}  OFFSET 0.000000 0.000000 0.000000")
            lines.append(f"{inner}}}")
        lines.append(f"{indent}}}")

    emit(root, 0)
    lines.append("MOTION")
    lines.append(f"Frames: {poses.frame_count}")
    lines.append(f"Frame Time: {frame_time:.6f}")

    euler = quat_to_euler_zxy_deg(poses.theta)  # (T,B,3) as (z,x,y)
    for t in range(poses.frame_count):
        values = list(poses.root_translation[t])
        for j in dfs_order:
            values.extend(euler[t, j])
        lines.append(" ".join(f"{v:.6f}" for v in values))
    return "\n".join(lines) + "\n"


# --- external skeleton import --------------------------------------------------


def import_skeleton(document) -> Skeleton:
    """Build a Skeleton from an external rig description.

    ``document`` is a dict (or JSON text) with a ``joints`` list of entries
    carrying ``position`` and ``parent`` (index; null, -1 or self-reference
    marks the root) plus an optional ``name``. A parent index pointing
    outside the document re-roots that joint. Forests and cyclic links are
    rejected.
    """
    if isinstance(document, (str, bytes)):
        document = json.loads(document)
    try:
        entries = document["joints"]
    except (TypeError, KeyError):
        raise DocumentError("skeleton document must carry a 'joints' list")
    if not entries:
        raise DocumentError("skeleton document lists no joints")

    b = len(entries)
    joints = np.zeros((b, 3))
    parents = np.zeros(b, dtype=np.int64)
    names: List[str] = []
    any_named = False
    for i, e in enumerate(entries):
        joints[i] = np.asarray(e["position"], dtype=np.float64)
        p = e.get("parent", None)
        if p is None or int(p) == -1 or int(p) == i:
            parents[i] = ROOT_PARENT
        elif not (0 <= int(p) < b):
            log.warning("joint %d parent %s outside document; re-rooting there", i, p)
            parents[i] = ROOT_PARENT
        else:
            parents[i] = int(p)
        name = e.get("name")
        any_named = any_named or name is not None
        names.append(str(name) if name is not None else f"joint{i}")

    roots = np.flatnonzero(parents == ROOT_PARENT)
    if len(roots) == 0:
        raise DocumentError("skeleton document has no root; parent links are cyclic")
    if len(roots) > 1:
        comp = np.arange(b)

        def find(i):
            while comp[i] != i:
                comp[i] = comp[comp[i]]
                i = comp[i]
            return i

        for i, p in enumerate(parents):
            if p != ROOT_PARENT:
                comp[find(i)] = find(int(p))
        groups = {}
        for i in range(b):
            groups.setdefault(find(i), []).append(i)
        listing = "; ".join(f"root {r}: joints {groups[find(r)]}" for r in roots)
        raise DocumentError(f"skeleton document is a forest with {len(roots)} roots ({listing})")

    # cycle check: every joint must reach the root
    root = int(roots[0])
    for j in range(b):
        seen = set()
        node = j
        while parents[node] != ROOT_PARENT:
            if node in seen:
                raise DocumentError(f"cyclic parent links involving joints {sorted(seen)}")
            seen.add(node)
            node = int(parents[node])
    return Skeleton(joints, parents, names=tuple(names) if any_named else None)

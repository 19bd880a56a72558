"""Independent oracle implementations used to cross-check the library.

Everything here is deliberately written from scratch (plain loops, scipy
where convenient) and must not call into the code paths it checks.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation


# --- rotations ----------------------------------------------------------------


def axis_angle_to_quat(axis, angle):
    """Hand-rolled axis-angle to (w, x, y, z)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.sqrt(np.sum(axis * axis))
    return np.array([np.cos(angle / 2.0),
                     np.sin(angle / 2.0) * axis[0],
                     np.sin(angle / 2.0) * axis[1],
                     np.sin(angle / 2.0) * axis[2]])


def quat_wxyz_to_scipy(q):
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat(np.concatenate([q[..., 1:], q[..., :1]], axis=-1))


def quats_equivalent(a, b, atol=1e-6):
    """Rotation equality up to sign: |<a, b>| -> 1."""
    dot = abs(float(np.dot(np.asarray(a), np.asarray(b))))
    return abs(dot - 1.0) < atol


# --- forward kinematics --------------------------------------------------------


def _rigid(mat3, vec3):
    m = np.eye(4)
    m[:3, :3] = mat3
    m[:3, 3] = vec3
    return m


def brute_force_fk(joints, parents, frame_pose, root_translation):
    """Per-joint skinning transforms by explicit ancestor-chain products.

    Each joint's local transform rotates about its own rest position
    (T(j) R T(-j)); a joint's world transform is the product of the local
    transforms along the path root -> joint, recomputed independently per
    joint. Root translation is added at the end.
    """
    joints = np.asarray(joints, dtype=np.float64)
    b = joints.shape[0]
    out = np.zeros((b, 4, 4))
    for k in range(b):
        chain = [k]
        while parents[chain[-1]] != -1:
            chain.append(int(parents[chain[-1]]))
        chain.reverse()  # root first
        m = np.eye(4)
        for j in chain:
            r = quat_wxyz_to_scipy(frame_pose[j]).as_matrix()
            local = _rigid(np.eye(3), joints[j]) @ _rigid(r, np.zeros(3)) @ _rigid(np.eye(3), -joints[j])
            m = m @ local
        m[:3, 3] += np.asarray(root_translation, dtype=np.float64)
        out[k] = m
    return out


def random_tree(rng, b):
    """Random rooted tree: node i > 0 attaches to a random earlier node."""
    parents = np.full(b, -1, dtype=np.int64)
    for i in range(1, b):
        parents[i] = rng.integers(0, i)
    # shuffle labels so the root is not always index 0
    perm = rng.permutation(b)
    inv = np.argsort(perm)
    new_parents = np.full(b, -1, dtype=np.int64)
    for i in range(b):
        p = parents[i]
        new_parents[perm[i]] = -1 if p == -1 else perm[p]
    joints = rng.normal(size=(b, 3))
    return joints, new_parents


# --- minimum spanning tree -------------------------------------------------------


def kruskal_mst(points):
    """Brute-force Kruskal over all pairs; returns (edges, total_weight)."""
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    edges = []
    for i in range(m):
        for j in range(i + 1, m):
            edges.append((float(np.linalg.norm(points[i] - points[j])), i, j))
    edges.sort()
    parent = list(range(m))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    chosen = []
    total = 0.0
    for w, i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            chosen.append((i, j))
            total += w
        if len(chosen) == m - 1:
            break
    return chosen, total


def random_spanning_tree_weight(points, rng):
    """Weight of a random spanning tree (random attachment order)."""
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    order = rng.permutation(m)
    in_tree = [order[0]]
    total = 0.0
    for idx in order[1:]:
        attach = in_tree[rng.integers(0, len(in_tree))]
        total += float(np.linalg.norm(points[idx] - points[attach]))
        in_tree.append(idx)
    return total


def farthest_point_sample(points, start, m):
    """Loop-based farthest-point sampling from a fixed start index."""
    points = np.asarray(points, dtype=np.float64)
    chosen = [start]
    for _ in range(m - 1):
        best_i, best_d = -1, -1.0
        for i in range(len(points)):
            d = min(float(np.linalg.norm(points[i] - points[c])) for c in chosen)
            if d > best_d:
                best_d, best_i = d, i
        chosen.append(best_i)
    return chosen


# --- hexplane -------------------------------------------------------------------

PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))


def hexplane_query(planes, spatial_bounds, time_bounds, point, t):
    """Loop-based six-plane bilinear sample with product fusion.

    Follows the documented contract: coordinates normalize to [0, R-1] grid
    space (spatial axes clamp to the box), each plane is sampled bilinearly
    and the six feature vectors multiply elementwise.
    """
    spatial_bounds = np.asarray(spatial_bounds, dtype=np.float64)
    coords = np.zeros(4)
    for a in range(3):
        lo, hi = spatial_bounds[a]
        coords[a] = min(1.0, max(0.0, (point[a] - lo) / (hi - lo)))
    t_lo, t_hi = time_bounds
    coords[3] = 0.0 if t_hi == t_lo else (t - t_lo) / (t_hi - t_lo)

    out = None
    for plane, (a, b) in zip(planes, PLANE_AXES):
        grid = np.asarray(plane, dtype=np.float64)
        r1, r2, c = grid.shape
        u = coords[a] * (r1 - 1)
        v = coords[b] * (r2 - 1)
        u0, v0 = int(np.floor(u)), int(np.floor(v))
        u0 = min(max(u0, 0), r1 - 1)
        v0 = min(max(v0, 0), r2 - 1)
        u1, v1 = min(u0 + 1, r1 - 1), min(v0 + 1, r2 - 1)
        fu, fv = u - u0, v - v0
        sample = ((grid[u0, v0] * (1 - fu) + grid[u1, v0] * fu) * (1 - fv)
                  + (grid[u0, v1] * (1 - fu) + grid[u1, v1] * fu) * fv)
        out = sample if out is None else out * sample
    return out


# --- finite differences -----------------------------------------------------------


def central_difference(fn, array, index, step=1e-4):
    """Central finite difference of scalar fn() w.r.t. one entry of array."""
    original = array[index]
    array[index] = original + step
    f_plus = fn()
    array[index] = original - step
    f_minus = fn()
    array[index] = original
    return (f_plus - f_minus) / (2.0 * step)


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


# --- minimal BVH reader ------------------------------------------------------------


class BvhJoint:
    def __init__(self, name, parent, offset, channels):
        self.name = name
        self.parent = parent
        self.offset = offset
        self.channels = channels


def parse_bvh(text):
    """Tiny BVH reader for tests: hierarchy, frames and channel rows.

    Returns (joints, frames, frame_time, rows) where rows is a (T, total
    channels) float array in file order. Lines starting with // are skipped.
    """
    lines = [l.strip() for l in text.split("\n")]
    lines = [l for l in lines if l and not l.startswith("//")]
    assert lines[0] == "HIERARCHY", lines[0]
    joints = []
    stack = []
    i = 1
    while lines[i] != "MOTION":
        tokens = lines[i].split()
        if tokens[0] in ("ROOT", "JOINT"):
            parent = stack[-1] if stack else None
            assert lines[i + 1] == "{"
            off_tokens = lines[i + 2].split()
            assert off_tokens[0] == "OFFSET"
            offset = np.array([float(x) for x in off_tokens[1:4]])
            ch_tokens = lines[i + 3].split()
            assert ch_tokens[0] == "CHANNELS"
            channels = ch_tokens[2:2 + int(ch_tokens[1])]
            joints.append(BvhJoint(tokens[1], parent, offset, channels))
            stack.append(len(joints) - 1)
            i += 4
        elif tokens[0] == "End":
            assert lines[i + 1] == "{"
            i += 4  # {, OFFSET, }
        elif tokens[0] == "}":
            if stack:
                stack.pop()
            i += 1
        else:
            raise AssertionError(f"unexpected BVH line: {lines[i]}")
    assert lines[i] == "MOTION"
    frames = int(lines[i + 1].split(":")[1])
    frame_time = float(lines[i + 2].split(":")[1])
    rows = np.array([[float(x) for x in lines[i + 3 + t].split()] for t in range(frames)])
    return joints, frames, frame_time, rows


def bvh_joint_rotation(joint, row, channel_offset):
    """Quaternion (wxyz) from one joint's rotation channels in a motion row."""
    order = ""
    angles = []
    for k, ch in enumerate(joint.channels):
        if ch.endswith("rotation"):
            order += ch[0].upper()
            angles.append(row[channel_offset + k])
    r = Rotation.from_euler(order, angles, degrees=True)
    x, y, z, w = r.as_quat()
    return np.array([w, x, y, z])

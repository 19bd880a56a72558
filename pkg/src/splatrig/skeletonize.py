"""Joint-candidate extraction and kinematic-tree construction.

Candidates come from farthest-point sampling over the splat positions; the
tree is the exact Euclidean minimum spanning tree of the complete graph over
the candidates, rooted at the joint of maximum degree. Externally rigged
skeletons can be imported through :mod:`splatrig.io_formats` instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene_core import GaussianCloud, ROOT_PARENT, Skeleton

DEFAULT_CANDIDATE_COUNT = 70


@dataclass(frozen=True)
class CandidateSet:
    """M candidate joint positions plus the cloud-coverage radius.

    ``coverage_radius`` is the largest distance from any splat of the source
    cloud to its nearest candidate, so every splat lies within it.
    """

    points: np.ndarray
    coverage_radius: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
            raise ValueError(f"points must have shape (M >= 2, 3), got {pts.shape}")
        pts = np.ascontiguousarray(pts).copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "coverage_radius", float(self.coverage_radius))

    @property
    def count(self) -> int:
        return self.points.shape[0]


def sample_candidates(cloud: GaussianCloud, m: int = DEFAULT_CANDIDATE_COUNT, seed: int = 0) -> CandidateSet:
    """Farthest-point sample ``m`` joint candidates from the splat positions.

    The walk starts at the splat nearest the centroid (ties by index; the
    seed only perturbs degenerate starts where several splats coincide), so
    the result is deterministic for a fixed seed.
    """
    pts = cloud.positions
    n = pts.shape[0]
    if not (2 <= m <= n):
        raise ValueError(f"candidate count m={m} must satisfy 2 <= m <= N={n}")

    centroid = pts.mean(axis=0)
    d_centroid = np.linalg.norm(pts - centroid, axis=1)
    start_pool = np.flatnonzero(d_centroid == d_centroid.min())
    rng = np.random.default_rng(seed)
    start = int(start_pool[0]) if len(start_pool) == 1 else int(rng.choice(start_pool))

    chosen = [start]
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(dist))  # argmax takes the lowest index on ties
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    coverage = float(dist.max())
    return CandidateSet(pts[chosen], coverage)


def _mst_parents(points: np.ndarray):
    """Prim's algorithm on the complete Euclidean graph.

    Ties are broken by (weight, tree index, new index) so the edge choice is
    deterministic. Returns (edges, total_weight).
    """
    m = points.shape[0]
    diffs = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diffs * diffs, axis=-1))

    in_tree = np.zeros(m, dtype=bool)
    in_tree[0] = True
    best_d = dist[0].copy()
    best_src = np.zeros(m, dtype=np.int64)
    edges = []
    total = 0.0
    for _ in range(m - 1):
        cand = np.flatnonzero(~in_tree)
        keys = [(best_d[j], best_src[j], j) for j in cand]
        w, src, j = min(keys)
        edges.append((int(src), int(j)))
        total += float(w)
        in_tree[j] = True
        closer = dist[j] < best_d
        tie_lower = (dist[j] == best_d) & (j < best_src)
        update = (closer | tie_lower) & ~in_tree
        best_d[update] = dist[j][update]
        best_src[update] = j
    return edges, total


def build_tree(candidates: CandidateSet) -> Skeleton:
    """Connect candidates into a rooted kinematic tree via the exact MST.

    The root is the candidate of maximum MST degree (lowest index on ties);
    parents follow BFS orientation from it. Exact duplicate candidate
    positions are rejected, they indicate a degenerate cloud.
    """
    pts = candidates.points
    m = pts.shape[0]
    diffs = pts[:, None, :] - pts[None, :, :]
    coincident = np.all(diffs == 0.0, axis=-1)
    np.fill_diagonal(coincident, False)
    if coincident.any():
        i, j = np.argwhere(coincident)[0]
        raise ValueError(f"duplicate candidate positions at indices {int(i)} and {int(j)}")

    edges, _ = _mst_parents(pts)
    adjacency = [[] for _ in range(m)]
    for a, b in edges:
        adjacency[a].append(b)
        adjacency[b].append(a)

    degrees = np.array([len(adjacency[i]) for i in range(m)])
    root = int(np.argmax(degrees))  # argmax takes the lowest index on ties

    parents = np.full(m, ROOT_PARENT, dtype=np.int64)
    visited = np.zeros(m, dtype=bool)
    visited[root] = True
    queue = [root]
    while queue:
        node = queue.pop(0)
        for nb in sorted(adjacency[node]):
            if not visited[nb]:
                visited[nb] = True
                parents[nb] = node
                queue.append(nb)
    return Skeleton(pts, parents)


def skeletonize(cloud: GaussianCloud, m: int = DEFAULT_CANDIDATE_COUNT, seed: int = 0) -> Skeleton:
    """Convenience composition: sample candidates, then build the tree."""
    return build_tree(sample_candidates(cloud, m=m, seed=seed))

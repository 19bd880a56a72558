"""Six-plane factorized 4D refinement field with an MLP decoder.

The field stores one 2D feature grid per coordinate-axis pair (xy, xz, yz,
xt, yt, zt). A query bilinearly samples each plane at the projected 2D
coordinate and fuses the six samples by elementwise product; the decoder
turns the fused feature into per-splat position/rotation/scale deltas.
Decoder heads start at exactly zero, so an untrained field is an identity
refinement.

Parameters live in torch float64 tensors; the fitting stage flips their
``requires_grad`` and updates them in place. Everything else treats a field
as read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import List, Sequence, Tuple

import numpy as np
import torch

from .rotation import quat_normalize_t
from .tensors import as_tensor
from .scene_core import GaussianCloud

PLANE_AXES: Tuple[Tuple[int, int], ...] = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")
TIME_AXIS = 3

DEFAULT_SPATIAL_RESOLUTION = 64
DEFAULT_CHANNELS = 32
DEFAULT_HIDDEN = 64
SPATIOTEMPORAL_INIT_NOISE = 1e-2


@dataclass
class DecoderWeights:
    """Two hidden layers plus three zero-initialized linear heads."""

    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    head_position: Tuple[torch.Tensor, torch.Tensor]
    head_rotation: Tuple[torch.Tensor, torch.Tensor]
    head_scale: Tuple[torch.Tensor, torch.Tensor]

    @property
    def in_width(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> List[torch.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2,
                *self.head_position, *self.head_rotation, *self.head_scale]

    def scalar_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def make_decoder(channels: int = DEFAULT_CHANNELS, hidden: int = DEFAULT_HIDDEN,
                 seed: int = 0) -> DecoderWeights:
    if channels < 1:
        raise ValueError("feature width must be >= 1")
    gen = torch.Generator().manual_seed(seed)

    def layer(n_in, n_out):
        bound = 1.0 / np.sqrt(n_in)
        w = (torch.rand((n_in, n_out), generator=gen, dtype=torch.float64) * 2 - 1) * bound
        b = (torch.rand(n_out, generator=gen, dtype=torch.float64) * 2 - 1) * bound
        return w, b

    w1, b1 = layer(channels, hidden)
    w2, b2 = layer(hidden, hidden)
    zeros = lambda n: (torch.zeros((hidden, n), dtype=torch.float64), torch.zeros(n, dtype=torch.float64))
    return DecoderWeights(w1, b1, w2, b2, zeros(3), zeros(4), zeros(3))


@dataclass
class HexplaneField:
    """Six feature planes plus decoder over a spatial box and a time range.

    ``planes[i]`` has shape (R1, R2, C) over the axis pair ``PLANE_AXES[i]``
    where axis 3 is time; ``spatial_bounds`` is (3, 2) [lo, hi] per axis and
    ``time_bounds`` is (t_lo, t_hi), normally (0, T-1).
    """

    planes: List[torch.Tensor]
    spatial_bounds: np.ndarray
    time_bounds: Tuple[float, float]
    decoder: DecoderWeights

    def __post_init__(self):
        if len(self.planes) != 6:
            raise ValueError("expected exactly six planes")
        widths = {p.shape[-1] for p in self.planes}
        if len(widths) != 1:
            raise ValueError(f"planes disagree on feature width: {sorted(widths)}")
        if self.channels < 1:
            raise ValueError("feature width must be >= 1")
        bounds = np.asarray(self.spatial_bounds, dtype=np.float64)
        if bounds.shape != (3, 2) or np.any(bounds[:, 1] <= bounds[:, 0]):
            raise ValueError("spatial_bounds must be (3,2) with positive extent per axis")
        self.spatial_bounds = bounds

    @property
    def channels(self) -> int:
        return self.planes[0].shape[-1]

    def parameters(self) -> List[torch.Tensor]:
        return [*self.planes, *self.decoder.parameters()]

    def plane_scalar_count(self) -> int:
        return sum(p.numel() for p in self.planes)


def make_field(spatial_bounds, frame_count: int,
               spatial_resolution: int = DEFAULT_SPATIAL_RESOLUTION,
               time_resolution: int = None,
               channels: int = DEFAULT_CHANNELS,
               hidden: int = DEFAULT_HIDDEN,
               seed: int = 0) -> HexplaneField:
    """Build a field over the given box and [0, frame_count-1] time range.

    Planes start at the multiplicative identity (all ones); the three
    spatio-temporal planes get small seeded noise to break symmetry. The
    time axis resolution defaults to the frame count (one node per frame).
    """
    if time_resolution is None:
        time_resolution = max(2, frame_count)
    gen = torch.Generator().manual_seed(seed)
    planes = []
    for (a, b) in PLANE_AXES:
        r1 = spatial_resolution
        r2 = time_resolution if b == TIME_AXIS else spatial_resolution
        plane = torch.ones((r1, r2, channels), dtype=torch.float64)
        if b == TIME_AXIS:
            noise = (torch.rand(plane.shape, generator=gen, dtype=torch.float64) * 2 - 1)
            plane = plane + SPATIOTEMPORAL_INIT_NOISE * noise
        planes.append(plane)
    decoder = make_decoder(channels, hidden, seed=seed)
    return HexplaneField(planes, np.asarray(spatial_bounds, dtype=np.float64),
                         (0.0, float(max(frame_count - 1, 0))), decoder)


def bounds_from_cloud(cloud: GaussianCloud, margin: float = 0.25) -> np.ndarray:
    lo = cloud.positions.min(axis=0) - margin
    hi = cloud.positions.max(axis=0) + margin
    return np.stack([lo, hi], axis=1)


def _bilinear_t(plane: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample (R1,R2,C) plane at fractional grid coords u, v (already clamped)."""
    r1, r2, _ = plane.shape
    u0 = u.floor().clamp(0, r1 - 1)
    v0 = v.floor().clamp(0, r2 - 1)
    u1 = (u0 + 1).clamp(max=r1 - 1)
    v1 = (v0 + 1).clamp(max=r2 - 1)
    fu = (u - u0).unsqueeze(-1)
    fv = (v - v0).unsqueeze(-1)
    i0, i1 = u0.long(), u1.long()
    j0, j1 = v0.long(), v1.long()
    return ((plane[i0, j0] * (1 - fu) + plane[i1, j0] * fu) * (1 - fv)
            + (plane[i0, j1] * (1 - fu) + plane[i1, j1] * fu) * fv)


def query_features_t(field: HexplaneField, points: torch.Tensor, t: float) -> torch.Tensor:
    """Fused (N,C) features at spatial points and frame time t."""
    t_lo, t_hi = field.time_bounds
    if not (t_lo <= t <= t_hi):
        raise ValueError(f"query time {t} outside time bounds [{t_lo}, {t_hi}]")
    bounds = as_tensor(field.spatial_bounds)
    lo, hi = bounds[:, 0], bounds[:, 1]
    # normalized coordinates in [0,1]; spatial queries clamp to the box
    coords01 = ((points - lo) / (hi - lo)).clamp(0.0, 1.0)
    t01 = 0.0 if t_hi == t_lo else (t - t_lo) / (t_hi - t_lo)

    out = None
    for plane, (a, b) in zip(field.planes, PLANE_AXES):
        r1, r2, _ = plane.shape
        u = coords01[:, a] * (r1 - 1)
        if b == TIME_AXIS:
            v = torch.full_like(u, t01 * (r2 - 1))
        else:
            v = coords01[:, b] * (r2 - 1)
        sample = _bilinear_t(plane, u, v)
        out = sample if out is None else out * sample
    return out


def query_features(field: HexplaneField, points: np.ndarray, t: float) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N,3), got {pts.shape}")
    with torch.no_grad():
        return query_features_t(field, as_tensor(pts), t).numpy()


@dataclass(frozen=True)
class GaussianDeltas:
    """Per-splat refinement outputs: (N,3) position, (N,4) rotation, (N,3) scale."""

    d_position: np.ndarray
    d_rotation: np.ndarray
    d_scale: np.ndarray

    def __post_init__(self):
        dp = np.asarray(self.d_position, dtype=np.float64)
        dr = np.asarray(self.d_rotation, dtype=np.float64)
        ds = np.asarray(self.d_scale, dtype=np.float64)
        n = dp.shape[0]
        if dp.shape != (n, 3) or dr.shape != (n, 4) or ds.shape != (n, 3):
            raise ValueError("delta shapes must be (N,3)/(N,4)/(N,3)")
        if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(dr)) and np.all(np.isfinite(ds))):
            raise ValueError("deltas must be finite")
        object.__setattr__(self, "d_position", dp)
        object.__setattr__(self, "d_rotation", dr)
        object.__setattr__(self, "d_scale", ds)


def decode_t(decoder: DecoderWeights, features: torch.Tensor):
    """Feed-forward decode; returns (d_position, d_rotation, d_scale) tensors."""
    if features.shape[-1] != decoder.in_width:
        raise ValueError(f"feature width {features.shape[-1]} != decoder input width {decoder.in_width}")
    h = torch.relu(features @ decoder.w1 + decoder.b1)
    h = torch.relu(h @ decoder.w2 + decoder.b2)
    wp, bp = decoder.head_position
    wr, br = decoder.head_rotation
    ws, bs = decoder.head_scale
    return h @ wp + bp, h @ wr + br, h @ ws + bs


def decode(decoder: DecoderWeights, features: np.ndarray) -> GaussianDeltas:
    feats = as_tensor(np.asarray(features, dtype=np.float64))
    with torch.no_grad():
        dp, dr, ds = decode_t(decoder, feats)
    return GaussianDeltas(dp.numpy(), dr.numpy(), ds.numpy())


def refine_t(positions: torch.Tensor, rotations: torch.Tensor, scales: torch.Tensor,
             dp: torch.Tensor, dr: torch.Tensor, ds: torch.Tensor):
    """Apply deltas: shift positions, nudge-and-renormalize quaternions,
    scale multiplicatively through the exponential map."""
    return positions + dp, quat_normalize_t(rotations + dr), scales * torch.exp(ds)


def apply_refinement(cloud_r: GaussianCloud, deltas: GaussianDeltas) -> GaussianCloud:
    """Turn a rigidly-deformed cloud into the refined observation cloud."""
    if deltas.d_position.shape[0] != cloud_r.count:
        raise ValueError(f"deltas cover {deltas.d_position.shape[0]} splats, cloud has {cloud_r.count}")
    pos, rot, sc = refine_t(
        as_tensor(cloud_r.positions), as_tensor(cloud_r.rotations),
        as_tensor(cloud_r.scales), as_tensor(deltas.d_position),
        as_tensor(deltas.d_rotation), as_tensor(deltas.d_scale))
    return cloud_r.with_(positions=pos.numpy(), rotations=rot.numpy(), scales=sc.numpy())


def field_deltas_t(field: HexplaneField, points: torch.Tensor, t: float):
    """Query + decode in one step (the F_nr evaluation at frame t)."""
    return decode_t(field.decoder, query_features_t(field, points, t))


def tv_regularizer_t(field: HexplaneField) -> torch.Tensor:
    """Total-variation penalty: per plane, the mean squared difference of
    adjacent grid nodes along each of its two axes, summed over planes."""
    total = torch.zeros((), dtype=torch.float64)
    for plane in field.planes:
        d0 = plane[1:, :, :] - plane[:-1, :, :]
        d1 = plane[:, 1:, :] - plane[:, :-1, :]
        total = total + d0.pow(2).mean() + d1.pow(2).mean()
    return total


def tv_regularizer(field: HexplaneField) -> float:
    with torch.no_grad():
        return float(tv_regularizer_t(field))

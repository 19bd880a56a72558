"""Deterministic software splat renderer.

Splats are projected through a pinhole camera, their 3D covariances mapped
to screen space by the local affine Jacobian, and composited front-to-back
with per-pixel transmittance. The Gaussian footprint is truncated at the
3-sigma Mahalanobis ellipse through a C1 Hermite taper (weight and first
derivative reach zero together at the boundary): a hard cutoff would make
the image non-smooth in the splat parameters and fail the central
finite-difference checks the fitting stages rely on. A small isotropic
dilation keeps sub-pixel footprints visible after projection, as in
standard splatting implementations.

The same tensor code path serves forward rendering and gradient-carrying
evaluations inside the fitting stages; identical inputs produce bitwise
identical images.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .hexplane import HexplaneField, field_deltas_t, refine_t
from .kinematics import fk_transforms_t, smooth_theta_t, smooth_translation_t
from .scene_core import GaussianCloud, PoseSequence, Skeleton
from .skinning import SkinBinding, lbs_apply_t
from .tensors import as_tensor

CUTOFF_SIGMA = 3.0
CUTOFF_MSQ = CUTOFF_SIGMA**2          # squared Mahalanobis radius of the footprint
TAPER_START_MSQ = 7.0                 # taper begins here, ends at CUTOFF_MSQ
DILATION = 0.3  # px^2 added to the projected covariance diagonal
MAX_ALPHA = 0.999


@dataclass(frozen=True)
class CameraSpec:
    """Pinhole camera: position, look-at target, up hint, vertical fov.

    Image coordinates follow array order: u grows rightward, v downward,
    pixel centers at integer coordinates, principal point at
    (width/2, height/2).
    """

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov_y: float
    width: int
    height: int
    near: float = 0.05

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        tgt = np.asarray(self.look_at, dtype=np.float64)
        up = np.asarray(self.up, dtype=np.float64)
        if pos.shape != (3,) or tgt.shape != (3,) or up.shape != (3,):
            raise ValueError("position, look_at and up must be 3-vectors")
        if not (0.0 < self.fov_y < np.pi):
            raise ValueError("fov_y must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        forward = tgt - pos
        n = np.linalg.norm(forward)
        if n < 1e-12:
            raise ValueError("camera position coincides with look-at target")
        if np.linalg.norm(np.cross(forward / n, up)) < 1e-8:
            raise ValueError("up vector is parallel to the view direction")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "look_at", tgt)
        object.__setattr__(self, "up", up)

    def basis(self):
        """World-to-camera rotation rows (right, down, forward) and focal/center."""
        forward = self.look_at - self.position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        fy = 0.5 * self.height / np.tan(0.5 * self.fov_y)
        return rot, fy, fy, 0.5 * self.width, 0.5 * self.height


def camera_from_orbit(target, distance: float, azimuth_deg: float, elevation_deg: float,
                      fov_y: float = np.deg2rad(50.0), width: int = 256, height: int = 256,
                      near: float = 0.05) -> CameraSpec:
    """Camera orbiting ``target``: azimuth about the world +y axis (0 deg on
    the +z axis), elevation toward +y."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    target = np.asarray(target, dtype=np.float64)
    offset = distance * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    return CameraSpec(target + offset, target, np.array([0.0, 1.0, 0.0]),
                      fov_y, width, height, near)


@dataclass(frozen=True)
class RenderedFrame:
    """RGB (H,W,3) and alpha (H,W), both in [0,1]."""

    rgb: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or alpha.shape != rgb.shape[:2]:
            raise ValueError(f"inconsistent frame shapes {rgb.shape} / {alpha.shape}")
        rgb = rgb.copy()
        alpha = alpha.copy()
        rgb.flags.writeable = False
        alpha.flags.writeable = False
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "alpha", alpha)

    def to_rgba8(self) -> np.ndarray:
        rgba = np.concatenate([self.rgb, self.alpha[..., None]], axis=-1)
        return np.round(np.clip(rgba, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_image_t(positions: torch.Tensor, rotations: torch.Tensor, scales: torch.Tensor,
                   opacities: torch.Tensor, colors: torch.Tensor, camera: CameraSpec,
                   chunk_pixels: int = 4_000_000):
    """Differentiable render; returns (rgb (H,W,3), alpha (H,W)) tensors."""
    from .rotation import quat_to_matrix_t

    rot_wc, fx, fy, cx, cy = camera.basis()
    rot_wc_t = as_tensor(rot_wc)
    cam_pos = as_tensor(camera.position)
    h, w = camera.height, camera.width
    hw = h * w

    p_cam = (positions - cam_pos) @ rot_wc_t.T
    z = p_cam[:, 2]
    keep = z > camera.near
    rgb = torch.zeros((hw, 3), dtype=positions.dtype)
    alpha = torch.zeros(hw, dtype=positions.dtype)
    if int(keep.sum()) == 0:
        return rgb.reshape(h, w, 3), alpha.reshape(h, w)

    p_cam = p_cam[keep]
    z = z[keep]
    x, y = p_cam[:, 0], p_cam[:, 1]
    mean2d = torch.stack([fx * x / z + cx, fy * y / z + cy], dim=-1)

    rot_mat = quat_to_matrix_t(rotations[keep])
    s = scales[keep]
    rs = rot_mat * s[:, None, :]
    cov3d = rs @ rs.transpose(-1, -2)
    cov_cam = rot_wc_t @ cov3d @ rot_wc_t.T

    zero = torch.zeros_like(z)
    jac = torch.stack(
        [
            torch.stack([fx / z, zero, -fx * x / (z * z)], dim=-1),
            torch.stack([zero, fy / z, -fy * y / (z * z)], dim=-1),
        ],
        dim=1,
    )  # (N,2,3)
    cov2d = jac @ cov_cam @ jac.transpose(-1, -2)
    cov2d = cov2d + DILATION * torch.eye(2, dtype=positions.dtype)

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    det = det.clamp_min(1e-12)
    inv_a = cov2d[:, 1, 1] / det
    inv_d = cov2d[:, 0, 0] / det
    inv_b = -cov2d[:, 0, 1] / det

    order = torch.argsort(z, stable=True)
    mean2d = mean2d[order]
    inv_a, inv_b, inv_d = inv_a[order], inv_b[order], inv_d[order]
    opac = opacities[keep][order]
    cols = colors[keep][order]

    vv, uu = torch.meshgrid(
        torch.arange(h, dtype=positions.dtype), torch.arange(w, dtype=positions.dtype),
        indexing="ij")
    pix = torch.stack([uu.reshape(-1), vv.reshape(-1)], dim=-1)  # (HW,2)

    n = mean2d.shape[0]
    chunk = max(1, chunk_pixels // hw)
    transmittance = torch.ones(hw, dtype=positions.dtype)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        d = pix[None, :, :] - mean2d[lo:hi, None, :]  # (C,HW,2)
        du, dv = d[..., 0], d[..., 1]
        maha = inv_a[lo:hi, None] * du * du + 2.0 * inv_b[lo:hi, None] * du * dv \
            + inv_d[lo:hi, None] * dv * dv
        taper = ((CUTOFF_MSQ - maha) / (CUTOFF_MSQ - TAPER_START_MSQ)).clamp(0.0, 1.0)
        taper = taper * taper * (3.0 - 2.0 * taper)
        g = torch.exp(-0.5 * maha) * taper
        a = (opac[lo:hi, None] * g).clamp(0.0, MAX_ALPHA)
        one_minus = 1.0 - a
        cum = torch.cumprod(one_minus, dim=0)
        shifted = torch.cat([torch.ones((1, hw), dtype=positions.dtype), cum[:-1]], dim=0)
        contrib = a * shifted * transmittance[None, :]
        rgb = rgb + (contrib[..., None] * cols[lo:hi, None, :]).sum(dim=0)
        alpha = alpha + contrib.sum(dim=0)
        transmittance = transmittance * cum[-1]

    return rgb.clamp(0.0, 1.0).reshape(h, w, 3), alpha.clamp(0.0, 1.0).reshape(h, w)


def render(cloud: GaussianCloud, camera: CameraSpec) -> RenderedFrame:
    """Render a cloud to an RGB + alpha frame over a transparent black background."""
    with torch.no_grad():
        rgb, alpha = render_image_t(
            as_tensor(cloud.positions), as_tensor(cloud.rotations),
            as_tensor(cloud.scales), as_tensor(cloud.opacities),
            as_tensor(cloud.colors), camera)
    return RenderedFrame(rgb.numpy(), alpha.numpy())


def deformed_cloud_t(positions: torch.Tensor, rotations: torch.Tensor, scales: torch.Tensor,
                     skeleton: Skeleton, binding: SkinBinding,
                     theta: torch.Tensor, root: torch.Tensor, t: int,
                     field: Optional[HexplaneField] = None,
                     joints_t: Optional[torch.Tensor] = None):
    """Canonical -> posed (-> refined) splat tensors for frame t.

    ``theta``/``root`` are the full (already smoothed if desired) pose
    tensors; gradients flow to whichever inputs carry them.
    """
    if joints_t is None:
        joints_t = as_tensor(skeleton.joints)
    mats = fk_transforms_t(joints_t, skeleton.parents, skeleton.topological_order(),
                           theta[t], root[t])
    idx = as_tensor(binding.joint_indices)
    wts = as_tensor(binding.weights)
    pos, rot = lbs_apply_t(positions, rotations, idx, wts, mats)
    if field is not None:
        dp, dr, ds = field_deltas_t(field, pos, float(t))
        pos, rot, scales = refine_t(pos, rot, scales, dp, dr, ds)
    return pos, rot, scales


def render_sequence(cloud: GaussianCloud, skeleton: Skeleton, binding: SkinBinding,
                    poses: PoseSequence, camera: CameraSpec,
                    frames: Optional[Sequence[int]] = None,
                    field: Optional[HexplaneField] = None,
                    smoothing_w: int = 0) -> List[RenderedFrame]:
    """Render selected frames of the articulated scene (all frames by default)."""
    t_count = poses.frame_count
    if frames is None:
        frames = range(t_count)
    frames = [int(t) for t in frames]
    for t in frames:
        if not (0 <= t < t_count):
            raise ValueError(f"frame {t} outside [0, {t_count})")

    with torch.no_grad():
        theta = smooth_theta_t(as_tensor(poses.theta), smoothing_w)
        root = smooth_translation_t(as_tensor(poses.root_translation), smoothing_w)
        pos_c = as_tensor(cloud.positions)
        rot_c = as_tensor(cloud.rotations)
        sc_c = as_tensor(cloud.scales)
        opac = as_tensor(cloud.opacities)
        cols = as_tensor(cloud.colors)
        out = []
        for t in frames:
            pos, rot, sc = deformed_cloud_t(pos_c, rot_c, sc_c, skeleton, binding,
                                            theta, root, t, field)
            rgb, alpha = render_image_t(pos, rot, sc, opac, cols, camera)
            out.append(RenderedFrame(rgb.numpy(), alpha.numpy()))
    return out


def frame_to_png_bytes(frame: RenderedFrame) -> bytes:
    """Encode as 8-bit RGBA PNG (alpha channel carries the rendered alpha)."""
    image = Image.fromarray(frame.to_rgba8(), mode="RGBA")
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


def save_png(frame: RenderedFrame, path) -> None:
    with open(path, "wb") as f:
        f.write(frame_to_png_bytes(frame))

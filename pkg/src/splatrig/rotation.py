"""Quaternion and rotation-matrix helpers.

Quaternions are stored as (w, x, y, z) throughout the package. Functions come
in two flavours: numpy versions operating on float64 arrays (used by the
public data types and the I/O layer) and torch versions (suffix ``_t``) used
inside the differentiable deformation pipeline. Both accept a trailing batch
dimension, i.e. shapes ``(..., 4)`` and ``(..., 3, 3)``.
"""

from __future__ import annotations

import numpy as np
import torch


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return unit quaternions; raises on zero norm.

    Rows already unit to machine precision pass through untouched, which
    makes renormalization idempotent bitwise.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("cannot normalize zero-norm quaternion")
    return np.where(np.abs(norm - 1.0) <= 4e-15, q, q / norm)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, composing rotation b followed by a."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    """Unit quaternion rotating by ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ValueError("axis must be nonzero")
    axis = axis / n
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of (batched) unit quaternions, shape (..., 3, 3)."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Quaternion of (batched) rotation matrices (Shepperd's method).

    Returns the representative with nonnegative w.
    """
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    m = m.reshape((-1, 3, 3))
    out = np.empty((m.shape[0], 4), dtype=np.float64)
    # Four candidate pivots; pick the numerically largest per matrix.
    t0 = 1.0 + m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    t1 = 1.0 + m[:, 0, 0] - m[:, 1, 1] - m[:, 2, 2]
    t2 = 1.0 - m[:, 0, 0] + m[:, 1, 1] - m[:, 2, 2]
    t3 = 1.0 - m[:, 0, 0] - m[:, 1, 1] + m[:, 2, 2]
    choice = np.argmax(np.stack([t0, t1, t2, t3], axis=1), axis=1)
    for i in range(m.shape[0]):
        r = m[i]
        c = choice[i]
        if c == 0:
            s = 2.0 * np.sqrt(t0[i])
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif c == 1:
            s = 2.0 * np.sqrt(t1[i])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif c == 2:
            s = 2.0 * np.sqrt(t2[i])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(t3[i])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        out[i] = q
    out = quat_normalize(out)
    out[out[:, 0] < 0] *= -1.0
    return out.reshape(batch + (4,))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by quaternions q (..., 4)."""
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), np.asarray(v, dtype=np.float64))


def random_unit_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform random unit quaternions with nonnegative w."""
    q = rng.normal(size=(n, 4))
    q = quat_normalize(q)
    q[q[:, 0] < 0] *= -1.0
    return q


# --- torch variants (differentiable, float64) ---


def quat_normalize_t(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def quat_multiply_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_to_matrix_t(q: torch.Tensor) -> torch.Tensor:
    q = quat_normalize_t(q)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def _sqrt_positive(x: torch.Tensor) -> torch.Tensor:
    # sqrt clamped at 0 so tiny negative round-off cannot produce NaN
    return torch.sqrt(torch.clamp(x, min=0.0))


def matrix_to_quat_t(m: torch.Tensor) -> torch.Tensor:
    """Differentiable rotation-matrix -> quaternion, nonnegative w.

    Builds the four pivot candidates and gathers the best-conditioned one
    per matrix; the selection is piecewise constant so gradients are valid
    almost everywhere.
    """
    batch = m.shape[:-2]
    m = m.reshape((-1, 3, 3))
    m00, m01, m02 = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    m10, m11, m12 = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    m20, m21, m22 = m[:, 2, 0], m[:, 2, 1], m[:, 2, 2]

    q_abs = torch.stack(
        [
            _sqrt_positive(1.0 + m00 + m11 + m22),
            _sqrt_positive(1.0 + m00 - m11 - m22),
            _sqrt_positive(1.0 - m00 + m11 - m22),
            _sqrt_positive(1.0 - m00 - m11 + m22),
        ],
        dim=-1,
    )
    cand = torch.stack(
        [
            torch.stack([q_abs[:, 0] ** 2, m21 - m12, m02 - m20, m10 - m01], dim=-1),
            torch.stack([m21 - m12, q_abs[:, 1] ** 2, m01 + m10, m02 + m20], dim=-1),
            torch.stack([m02 - m20, m01 + m10, q_abs[:, 2] ** 2, m12 + m21], dim=-1),
            torch.stack([m10 - m01, m02 + m20, m12 + m21, q_abs[:, 3] ** 2], dim=-1),
        ],
        dim=1,
    )  # (B, 4 candidates, 4 components)
    denom = 2.0 * q_abs.clamp_min(1e-12)
    cand = cand / denom.unsqueeze(-1)
    best = q_abs.argmax(dim=-1)
    q = cand[torch.arange(cand.shape[0], device=m.device), best]
    q = quat_normalize_t(q)
    q = torch.where(q[:, :1] < 0, -q, q)
    return q.reshape(batch + (4,))


def polar_rotation_t(m: torch.Tensor, iterations: int = 8) -> torch.Tensor:
    """Nearest rotation to (batched) 3x3 matrices via Newton polar iteration.

    ``X <- (X + X^-T)/2`` converges quadratically for well-conditioned input
    with positive determinant, which blended skinning matrices are in
    practice. A fixed iteration count keeps evaluation deterministic and
    autograd-friendly.
    """
    x = m
    for _ in range(iterations):
        x = 0.5 * (x + torch.inverse(x).transpose(-1, -2))
    return x

"""Staged fitting of poses and the refinement field.

Stage R optimizes the pose sequence (theta and the root translation)
against per-frame targets with the cloud and binding frozen; stage N
freezes the poses and optimizes the hexplane field (optionally also the
cloud attributes). Optimization is plain gradient descent with an
exponentially decaying learning rate; gradients come from reverse-mode
autodiff through the same forward code the renderer and deformers use, and
are contractually required to match central finite differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from .hexplane import HexplaneField, PLANE_NAMES, tv_regularizer_t
from .kinematics import smooth_theta_t, smooth_translation_t
from .render import CameraSpec, deformed_cloud_t, render_image_t
from .rotation import quat_normalize_t
from .scene_core import GaussianCloud, PoseSequence, Skeleton
from .skinning import SkinBinding
from .tensors import as_tensor

TERM_NAMES = ("rec", "mask", "reg", "chamfer", "pose_smooth")
DATA_TERMS = ("rec", "chamfer")
BYTES_PER_SCALAR = 4  # float32 storage estimate


class FitDivergedError(RuntimeError):
    """Raised when the loss turns non-finite during a fit."""

    def __init__(self, step: int, breakdown: Dict[str, float]):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step}: {breakdown}")


@dataclass(frozen=True)
class Objective:
    """Weighted loss terms. Term names: rec, mask, reg, chamfer, pose_smooth."""

    terms: Tuple[Tuple[str, float], ...]

    def __post_init__(self):
        seen = set()
        for name, weight in self.terms:
            if name not in TERM_NAMES:
                raise ValueError(f"unknown loss term {name!r}; expected one of {TERM_NAMES}")
            if name in seen:
                raise ValueError(f"duplicate loss term {name!r}")
            if weight < 0:
                raise ValueError(f"term {name!r} has negative weight {weight}")
            seen.add(name)
        if not seen.intersection(DATA_TERMS):
            raise ValueError("objective needs at least one data term (rec or chamfer)")

    @staticmethod
    def of(**weights: float) -> "Objective":
        return Objective(tuple(weights.items()))

    def weight(self, name: str) -> float:
        for n, w in self.terms:
            if n == name:
                return w
        return 0.0

    def names(self) -> Tuple[str, ...]:
        return tuple(n for n, _ in self.terms)


@dataclass(frozen=True)
class TargetSet:
    """Per-frame fitting targets.

    ``images`` (T,H,W,3) and ``masks`` (T,H,W) are references already
    composited over the renderer's transparent-black background;
    ``point_sets`` holds one (M_t,3) array per frame. ``camera`` is required
    whenever images or masks are present.
    """

    frame_count: int
    images: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None
    point_sets: Optional[Tuple[np.ndarray, ...]] = None
    camera: Optional[CameraSpec] = None

    def __post_init__(self):
        t = self.frame_count
        if t < 1:
            raise ValueError("frame_count must be >= 1")
        if self.images is not None:
            img = np.asarray(self.images, dtype=np.float64)
            if img.ndim != 4 or img.shape[0] != t or img.shape[3] != 3:
                raise ValueError(f"images must be (T,H,W,3) with T={t}, got {img.shape}")
            object.__setattr__(self, "images", img)
        if self.masks is not None:
            msk = np.asarray(self.masks, dtype=np.float64)
            if msk.ndim != 3 or msk.shape[0] != t:
                raise ValueError(f"masks must be (T,H,W) with T={t}, got {msk.shape}")
            object.__setattr__(self, "masks", msk)
        if self.point_sets is not None:
            pts = tuple(np.asarray(p, dtype=np.float64) for p in self.point_sets)
            if len(pts) != t or any(p.ndim != 2 or p.shape[1] != 3 for p in pts):
                raise ValueError("point_sets must hold one (M,3) array per frame")
            object.__setattr__(self, "point_sets", pts)
        if (self.images is not None or self.masks is not None) and self.camera is None:
            raise ValueError("image/mask targets require a camera")


def make_targets(cloud: GaussianCloud, skeleton: Skeleton, binding: SkinBinding,
                 poses: PoseSequence, camera: Optional[CameraSpec] = None,
                 want_points: bool = True, want_images: bool = False,
                 field: Optional[HexplaneField] = None, smoothing_w: int = 0,
                 point_transform: Optional[Callable[[np.ndarray, int], np.ndarray]] = None
                 ) -> TargetSet:
    """Synthesize fitting targets by driving the scene with known poses.

    ``point_transform(positions, t)`` post-processes the deformed splat
    positions per frame (e.g. to add non-rigid motion a rigid fit cannot
    explain) before they are recorded and/or rendered.
    """
    t_count = poses.frame_count
    with torch.no_grad():
        theta = smooth_theta_t(as_tensor(poses.theta), smoothing_w)
        root = smooth_translation_t(as_tensor(poses.root_translation), smoothing_w)
        pos_c = as_tensor(cloud.positions)
        rot_c = as_tensor(cloud.rotations)
        sc_c = as_tensor(cloud.scales)
        points, images, masks = [], [], []
        for t in range(t_count):
            pos, rot, sc = deformed_cloud_t(pos_c, rot_c, sc_c, skeleton, binding,
                                            theta, root, t, field)
            if point_transform is not None:
                pos = as_tensor(np.asarray(point_transform(pos.numpy(), t), dtype=np.float64))
            if want_points:
                points.append(pos.numpy().copy())
            if want_images:
                if camera is None:
                    raise ValueError("image targets require a camera")
                rgb, alpha = render_image_t(pos, rot, sc, as_tensor(cloud.opacities),
                                            as_tensor(cloud.colors), camera)
                images.append(rgb.numpy())
                masks.append(alpha.numpy())
    return TargetSet(
        frame_count=t_count,
        images=np.stack(images) if images else None,
        masks=np.stack(masks) if masks else None,
        point_sets=tuple(points) if points else None,
        camera=camera,
    )


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameters for one fitting stage.

    Stage R defaults follow the pose-training recipe (2500 steps, learning
    rate decaying 5e-5 -> 5e-6); stage N defaults follow the refinement
    recipe (7000 steps, 1.6e-4 -> 1.6e-6). The loss weights default to
    lambda_rec=2e4 and lambda_mask=1e3; the regularizer weight is not pinned
    upstream and defaults to 1. Chamfer and pose-smoothness are desk-scale
    extras, off by default.
    """

    stage: str = "R"
    steps: int = 2500
    lr_start: float = 5e-5
    lr_end: float = 5e-6
    lr_decay: str = "exponential"
    smoothing_w: int = 1
    lambda_rec: float = 2e4
    lambda_mask: float = 1e3
    lambda_reg: float = 1.0
    lambda_chamfer: float = 0.0
    lambda_pose_smooth: float = 0.0
    seed: int = 0
    unfreeze_cloud: bool = False

    def __post_init__(self):
        if self.stage not in ("R", "N"):
            raise ValueError(f"stage must be 'R' or 'N', got {self.stage!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_start < self.lr_end:
            raise ValueError("lr_start must be >= lr_end")
        if self.lr_decay not in ("exponential", "linear"):
            raise ValueError("lr_decay must be 'exponential' or 'linear'")
        if self.smoothing_w < 0:
            raise ValueError("smoothing_w must be >= 0")

    @staticmethod
    def stage_n_defaults(**overrides) -> "FitConfig":
        base = dict(stage="N", steps=7000, lr_start=1.6e-4, lr_end=1.6e-6)
        base.update(overrides)
        return FitConfig(**base)

    def learning_rate(self, step: int) -> float:
        if self.steps == 1:
            return self.lr_start
        frac = step / (self.steps - 1)
        if self.lr_decay == "linear":
            return self.lr_start + frac * (self.lr_end - self.lr_start)
        return self.lr_start * (self.lr_end / self.lr_start) ** frac

    def objective(self, targets: TargetSet) -> Objective:
        """Default objective: every positively weighted term with target data."""
        weights = {"rec": self.lambda_rec, "mask": self.lambda_mask,
                   "reg": self.lambda_reg if self.stage == "N" else 0.0,
                   "chamfer": self.lambda_chamfer, "pose_smooth": self.lambda_pose_smooth}
        terms = {n: w for n, w in weights.items() if w > 0}
        if targets.images is None:
            terms.pop("rec", None)
        if targets.masks is None:
            terms.pop("mask", None)
        if targets.point_sets is None:
            terms.pop("chamfer", None)
        return Objective.of(**terms)


@dataclass
class FitReport:
    """Outcome of one fit: trace, parameter counts, timing, final metrics."""

    stage: str
    steps: int
    loss_trace: List[Dict[str, float]]
    parameter_counts: Dict[str, "ParamCount"]
    wall_clock_seconds: float
    final_metrics: Dict[str, float]
    fitted_cloud: Optional[GaussianCloud] = None


@dataclass(frozen=True)
class ParamCount:
    """Scalar count and float32 storage estimate for one component."""

    scalars: int

    @property
    def bytes(self) -> int:
        return self.scalars * BYTES_PER_SCALAR

    @property
    def mib(self) -> float:
        return self.bytes / (1024.0 * 1024.0)


def count_parameters(obj) -> Dict[str, ParamCount]:
    """Exact learnable-scalar counts per component, plus a total."""
    if isinstance(obj, PoseSequence):
        counts = {
            "theta": ParamCount(obj.theta.size),
            "root_translation": ParamCount(obj.root_translation.size),
        }
    elif isinstance(obj, HexplaneField):
        counts = {
            "planes": ParamCount(obj.plane_scalar_count()),
            "decoder": ParamCount(obj.decoder.scalar_count()),
        }
    else:
        raise TypeError(f"cannot count parameters of {type(obj).__name__}")
    counts["total"] = ParamCount(sum(c.scalars for c in counts.values()))
    return counts


# --- loss evaluation ---------------------------------------------------------


def _require(condition: bool, term: str, what: str):
    if not condition:
        raise ValueError(f"loss term {term!r} requires {what}")


def _chamfer_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Symmetric mean squared closest-point distance between point sets."""
    # exact per-pair differences (the mm expansion would make d(x, x) != 0)
    d2 = torch.cdist(a, b, compute_mode="donot_use_mm_for_euclid_dist").pow(2)
    return d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()


class _Forward:
    """Shared differentiable forward pass for loss, gradient and fit paths.

    ``cloud_tensors`` may override canonical cloud attributes with
    gradient-carrying tensors (stage N with the cloud unfrozen); ``theta``
    and ``root`` are the raw pose tensors, smoothing happens inside so that
    gradients flow through the window.
    """

    def __init__(self, cloud: GaussianCloud, skeleton: Skeleton, binding: SkinBinding,
                 targets: TargetSet, objective: Objective, smoothing_w: int,
                 field: Optional[HexplaneField],
                 cloud_tensors: Optional[Dict[str, torch.Tensor]] = None):
        self.skeleton = skeleton
        self.binding = binding
        self.targets = targets
        self.objective = objective
        self.w = smoothing_w
        self.field = field
        self.ct = cloud_tensors or {}
        self.pos_c = as_tensor(cloud.positions)
        self.rot_c = as_tensor(cloud.rotations)
        self.sc_c = as_tensor(cloud.scales)
        self.opac = as_tensor(cloud.opacities)
        self.cols = as_tensor(cloud.colors)
        names = objective.names()
        if "rec" in names:
            _require(targets.images is not None, "rec", "reference images")
        if "mask" in names:
            _require(targets.masks is not None, "mask", "reference masks")
        if "chamfer" in names:
            _require(targets.point_sets is not None, "chamfer", "target point sets")
        if "reg" in names:
            _require(field is not None, "reg", "a hexplane field")
        self.frame_terms = [n for n in names if n in ("rec", "mask", "chamfer")]
        self.global_terms = [n for n in names if n in ("reg", "pose_smooth")]

    def derived(self, theta: torch.Tensor, root: torch.Tensor):
        """(Re)build the graph pieces shared across frames."""
        theta_s = smooth_theta_t(theta, self.w)
        root_s = smooth_translation_t(root, self.w)
        pos_c = self.ct.get("positions", self.pos_c)
        rot_c = self.ct.get("rotations", self.rot_c)
        sc_c = torch.exp(self.ct["log_scales"]) if "log_scales" in self.ct else self.sc_c
        opac = self.ct.get("opacities", self.opac)
        cols = self.ct.get("colors", self.cols)
        return theta_s, root_s, pos_c, rot_c, sc_c, opac, cols

    def frame_losses(self, shared, t: int) -> Dict[str, torch.Tensor]:
        """Per-frame data terms at frame t (not yet frame-averaged)."""
        theta_s, root_s, pos_c, rot_c, sc_c, opac, cols = shared
        pos, rot, sc = deformed_cloud_t(pos_c, rot_c, sc_c, self.skeleton, self.binding,
                                        theta_s, root_s, t, self.field)
        out: Dict[str, torch.Tensor] = {}
        if "chamfer" in self.frame_terms:
            out["chamfer"] = _chamfer_t(pos, as_tensor(self.targets.point_sets[t]))
        if "rec" in self.frame_terms or "mask" in self.frame_terms:
            rgb, alpha = render_image_t(pos, rot, sc, opac, cols, self.targets.camera)
            if "rec" in self.frame_terms:
                out["rec"] = (rgb - as_tensor(self.targets.images[t])).pow(2).mean()
            if "mask" in self.frame_terms:
                out["mask"] = (alpha - as_tensor(self.targets.masks[t])).pow(2).mean()
        return out

    def global_losses(self, theta_raw: torch.Tensor) -> Dict[str, torch.Tensor]:
        out: Dict[str, torch.Tensor] = {}
        if "reg" in self.global_terms:
            out["reg"] = tv_regularizer_t(self.field)
        if "pose_smooth" in self.global_terms:
            if theta_raw.shape[0] > 1:
                out["pose_smooth"] = (theta_raw[1:] - theta_raw[:-1]).pow(2).mean()
            else:
                out["pose_smooth"] = torch.zeros((), dtype=theta_raw.dtype)
        return out

    def accumulate(self, theta: torch.Tensor, root: torch.Tensor,
                   backprop: bool = False) -> Dict[str, float]:
        """Evaluate all terms (frame terms averaged over frames).

        With ``backprop`` the weighted total is backpropagated frame by
        frame, so one frame's autograd graph is the peak memory cost.
        """
        t_count = self.targets.frame_count
        values: Dict[str, float] = {n: 0.0 for n in self.frame_terms}
        shared = self.derived(theta, root)
        for t in range(t_count):
            frame = self.frame_losses(shared, t)
            if backprop:
                weighted = sum(self.objective.weight(n) * v / t_count
                               for n, v in frame.items() if self.objective.weight(n) != 0.0)
                if isinstance(weighted, torch.Tensor) and weighted.requires_grad:
                    weighted.backward()
                    shared = self.derived(theta, root)  # the backward pass freed the shared graph
            for n, v in frame.items():
                values[n] += float(v.detach()) / t_count
        glob = self.global_losses(theta)
        if backprop and glob:
            weighted = sum(self.objective.weight(n) * v for n, v in glob.items())
            if isinstance(weighted, torch.Tensor) and weighted.requires_grad:
                weighted.backward()
        values.update({n: float(v.detach()) for n, v in glob.items()})
        return values

    def total(self, values: Dict[str, float]) -> float:
        return float(sum(self.objective.weight(n) * v for n, v in values.items()))


def evaluate_loss(cloud: GaussianCloud, skeleton: Skeleton, binding: SkinBinding,
                  poses: PoseSequence, targets: TargetSet, objective: Objective,
                  field: Optional[HexplaneField] = None, smoothing_w: int = 0
                  ) -> Tuple[float, Dict[str, float]]:
    """Weighted total loss and the per-term (pre-weighting) breakdown."""
    fwd = _Forward(cloud, skeleton, binding, targets, objective, smoothing_w, field)
    with torch.no_grad():
        breakdown = fwd.accumulate(as_tensor(poses.theta), as_tensor(poses.root_translation))
    return fwd.total(breakdown), breakdown


def _stage_params(stage: str, theta: torch.Tensor, root: torch.Tensor,
                  field: Optional[HexplaneField], cloud: GaussianCloud,
                  unfreeze_cloud: bool):
    """Name -> tensor map of the stage's free parameters (grad enabled)."""
    params: Dict[str, torch.Tensor] = {}
    if stage == "R":
        params["theta"] = theta.requires_grad_(True)
        params["root_translation"] = root.requires_grad_(True)
    else:
        if field is None:
            raise ValueError("stage N requires a hexplane field")
        for name, plane in zip(PLANE_NAMES, field.planes):
            params[f"plane_{name}"] = plane.requires_grad_(True)
        dec = field.decoder
        params.update({"decoder.w1": dec.w1.requires_grad_(True),
                       "decoder.b1": dec.b1.requires_grad_(True),
                       "decoder.w2": dec.w2.requires_grad_(True),
                       "decoder.b2": dec.b2.requires_grad_(True)})
        for head, (w, b) in (("position", dec.head_position),
                             ("rotation", dec.head_rotation),
                             ("scale", dec.head_scale)):
            params[f"decoder.head_{head}.w"] = w.requires_grad_(True)
            params[f"decoder.head_{head}.b"] = b.requires_grad_(True)
        if unfreeze_cloud:
            params["positions"] = as_tensor(cloud.positions).requires_grad_(True)
            params["log_scales"] = torch.log(as_tensor(cloud.scales)).detach().requires_grad_(True)
            params["opacities"] = as_tensor(cloud.opacities).requires_grad_(True)
            params["colors"] = as_tensor(cloud.colors).requires_grad_(True)
            params["rotations"] = as_tensor(cloud.rotations).requires_grad_(True)
    return params


def _release(params: Dict[str, torch.Tensor]):
    for p in params.values():
        p.requires_grad_(False)
        p.grad = None


def gradients(cloud: GaussianCloud, skeleton: Skeleton, binding: SkinBinding,
              poses: PoseSequence, targets: TargetSet, objective: Objective,
              stage: str = "R", field: Optional[HexplaneField] = None,
              smoothing_w: int = 0, unfreeze_cloud: bool = False
              ) -> Dict[str, np.ndarray]:
    """Gradients of the weighted loss w.r.t. the stage's free parameters.

    These are contractually required to match central finite differences of
    :func:`evaluate_loss` (step 1e-4) at relative error < 1e-3.
    """
    theta = as_tensor(poses.theta)
    root = as_tensor(poses.root_translation)
    params = _stage_params(stage, theta, root, field, cloud, unfreeze_cloud)
    cloud_tensors = {k: params[k] for k in ("positions", "rotations", "log_scales",
                                            "opacities", "colors") if k in params}
    fwd = _Forward(cloud, skeleton, binding, targets, objective, smoothing_w, field,
                   cloud_tensors=cloud_tensors)
    fwd.accumulate(theta, root, backprop=True)
    out = {name: (p.grad if p.grad is not None else torch.zeros_like(p)).numpy().copy()
           for name, p in params.items()}
    _release(params)
    return out


def fit(cloud: GaussianCloud, skeleton: Skeleton, binding: SkinBinding,
        targets: TargetSet, config: FitConfig,
        field: Optional[HexplaneField] = None,
        poses: Optional[PoseSequence] = None,
        objective: Optional[Objective] = None):
    """Run one fitting stage; returns (PoseSequence | HexplaneField, FitReport).

    Stage R starts from identity quaternions and zero root translation and
    returns the fitted PoseSequence. Stage N treats ``poses`` as frozen,
    updates ``field`` in place and returns it; with ``config.unfreeze_cloud``
    the cloud attributes are optimized too and the result lands in
    ``report.fitted_cloud``.
    """
    t_count = targets.frame_count
    if config.stage == "R":
        theta = torch.zeros((t_count, skeleton.joint_count, 4), dtype=torch.float64)
        theta[..., 0] = 1.0
        root = torch.zeros((t_count, 3), dtype=torch.float64)
    else:
        if poses is None:
            raise ValueError("stage N requires the fitted (frozen) poses")
        if field is None:
            raise ValueError("stage N requires a hexplane field")
        if poses.frame_count != t_count:
            raise ValueError("pose frame count does not match the targets")
        theta = as_tensor(poses.theta)
        root = as_tensor(poses.root_translation)

    params = _stage_params(config.stage, theta, root, field, cloud, config.unfreeze_cloud)
    if objective is None:
        objective = config.objective(targets)
    cloud_tensors = {k: params[k] for k in ("positions", "rotations", "log_scales",
                                            "opacities", "colors") if k in params}
    fwd = _Forward(cloud, skeleton, binding, targets, objective, config.smoothing_w,
                   field, cloud_tensors=cloud_tensors)

    trace: List[Dict[str, float]] = []
    started = time.perf_counter()
    breakdown: Dict[str, float] = {}
    for step in range(config.steps):
        for p in params.values():
            p.grad = None
        breakdown = fwd.accumulate(theta, root, backprop=True)
        total = fwd.total(breakdown)
        if not np.isfinite(total):
            raise FitDivergedError(step, breakdown)
        lr = config.learning_rate(step)
        with torch.no_grad():
            for p in params.values():
                if p.grad is not None:
                    p -= lr * p.grad
            if config.stage == "R":
                theta.copy_(quat_normalize_t(theta))
            if "opacities" in params:
                params["opacities"].clamp_(0.0, 1.0)
            if "colors" in params:
                params["colors"].clamp_(0.0, 1.0)
            if "rotations" in params:
                params["rotations"].copy_(quat_normalize_t(params["rotations"]))
        trace.append({"step": step, "lr": lr, "total": total, **breakdown})

    wall = time.perf_counter() - started
    _release(params)

    final_metrics = dict(breakdown)
    final_metrics["total"] = trace[-1]["total"]
    fitted_cloud = None
    if config.stage == "R":
        result = PoseSequence(quat_normalize_t(theta).numpy(), root.numpy())
        counts = count_parameters(result)
    else:
        result = field
        counts = count_parameters(field)
        if config.unfreeze_cloud:
            fitted_cloud = cloud.with_(
                positions=params["positions"].numpy().copy(),
                rotations=params["rotations"].numpy().copy(),
                scales=np.exp(params["log_scales"].numpy()),
                opacities=params["opacities"].numpy().copy(),
                colors=params["colors"].numpy().copy())
    report = FitReport(stage=config.stage, steps=config.steps, loss_trace=trace,
                       parameter_counts=counts, wall_clock_seconds=wall,
                       final_metrics=final_metrics, fitted_cloud=fitted_cloud)
    return result, report

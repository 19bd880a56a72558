"""splatrig: skeleton-driven animation of 3D Gaussian point clouds.

Pipeline: skeletonize a static cloud into a kinematic tree, bind splats to
joints, pose the skeleton via forward kinematics and linear blend skinning,
refine residual non-rigid motion with a six-plane factorized field, fit the
whole thing to target data by gradient descent, then edit and export.
"""

from .scene_core import (
    GaussianCloud,
    PoseSequence,
    RigidTransform,
    Skeleton,
    SyntheticSpec,
    Violation,
    make_synthetic_scene,
    validate,
)
from .skeletonize import CandidateSet, build_tree, sample_candidates, skeletonize
from .kinematics import JointWorldTransforms, forward_kinematics, smooth_poses
from .skinning import SkinBinding, bind, lbs_deform
from .hexplane import (
    DecoderWeights,
    GaussianDeltas,
    HexplaneField,
    apply_refinement,
    decode,
    make_field,
    query_features,
    tv_regularizer,
)
from .render import (
    CameraSpec,
    RenderedFrame,
    camera_from_orbit,
    render,
    render_sequence,
    save_png,
)
from .optimize import (
    FitConfig,
    FitReport,
    Objective,
    TargetSet,
    count_parameters,
    evaluate_loss,
    fit,
    gradients,
    make_targets,
)
from .io_formats import SceneDocument, export_bvh, import_skeleton, load, load_scene, save, save_scene
from .editing import EditCommand, EditSession, slerp

__version__ = "0.1.0"

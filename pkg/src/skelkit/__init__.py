"""Implicit skeletons for articulated meshes: contraction, Gaussian bones,
blend skinning, flow-driven merge/split refinement and a synthetic test bed."""

from .contraction import ContractionConfig, connectivity_surgery, contract
from .geometry import TriMesh, load_mesh, save_mesh
from .kinematics import PoseFrame, RigidTransform, backward_blend_skin, blend_skin, fit_pose_procrustes
from .refine import FrameData, RefineConfig, refine_skeleton, sios2
from .skeleton import Bone, Joint, Skeleton, load_skeleton, save_skeleton
from .skinning import SkinningWeights, compute_skinning_weights, one_hot_parts, rigidity_coefficients
from .synth import SynthSpec, generate, preset

__version__ = "0.1.0"

__all__ = [
    "Bone",
    "ContractionConfig",
    "FrameData",
    "Joint",
    "PoseFrame",
    "RefineConfig",
    "RigidTransform",
    "Skeleton",
    "SkinningWeights",
    "SynthSpec",
    "TriMesh",
    "backward_blend_skin",
    "blend_skin",
    "compute_skinning_weights",
    "connectivity_surgery",
    "contract",
    "fit_pose_procrustes",
    "generate",
    "load_mesh",
    "load_skeleton",
    "one_hot_parts",
    "preset",
    "refine_skeleton",
    "rigidity_coefficients",
    "save_mesh",
    "save_skeleton",
    "sios2",
]

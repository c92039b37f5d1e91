"""Pseudo-healthy synthesis of head CT with subdural hematoma and deformation biomarkers."""

from .align import AlignConfig, RigidTransform, align_symmetry, apply_rigid
from .biomarkers import BiomarkerRecord, extract_biomarkers
from .classify import cross_validate, logistic_fit, roc_auc
from .config import PipelineConfig
from .diffeo import VelocityField, compose, integrate_velocity, jacobian_determinant
from .phantom import PhantomSpec, generate_phantom, inject_hematoma, make_case
from .synthesis import LossWeights, SynthConfig, compound_loss, optimize_velocity
from .volume import MaskVolume, ScalarVolume, VectorField, resample, sagittal_flip, warp

__all__ = [
    "AlignConfig", "RigidTransform", "align_symmetry", "apply_rigid",
    "BiomarkerRecord", "extract_biomarkers",
    "cross_validate", "logistic_fit", "roc_auc",
    "PipelineConfig",
    "VelocityField", "compose", "integrate_velocity", "jacobian_determinant",
    "PhantomSpec", "generate_phantom", "inject_hematoma", "make_case",
    "LossWeights", "SynthConfig", "compound_loss", "optimize_velocity",
    "MaskVolume", "ScalarVolume", "VectorField", "resample", "sagittal_flip", "warp",
]

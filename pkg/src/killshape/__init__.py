"""Learned implicit shape spaces regularised towards locally rigid deformations.

A shared network f(x, z) represents every shape as a zero level set; moving
the latent code z induces a velocity field on the surface, and the training
prior penalises how far that field is from a rigid motion (its Killing
energy), piecewise over k learned parts.
"""

from .deformation import (AffineField, DeformationBatch, SolvedFields, consistent_field_v,
                          deformation_loss, jacobian_v, killing_energy, solve_affine_fields)
from .diffnet import DerivativeBundle, MlpConfig, ShapeNetwork, derivative_bundle, geometric_init
from .estimator import ShapeSpaceEstimator
from .evaluation import (TriangleMesh, chamfer, extract_mesh, interpolation_report,
                         wasserstein)
from .exceptions import KillShapeError
from .geometry import PointCloud, ToySpec, generate_toy
from .losses import LossWeights, Schedule
from .shapespace import LatentTable, interpolate, interpolate_linear, interpolate_spiral
from .training import (Checkpoint, TrainConfig, fit_test_latent, load_checkpoint,
                       save_checkpoint, toy_preset, train)

__version__ = "0.1.0"

__all__ = [
    "AffineField", "Checkpoint", "DeformationBatch", "DerivativeBundle", "KillShapeError",
    "LatentTable", "LossWeights", "MlpConfig", "PointCloud", "Schedule", "ShapeNetwork",
    "ShapeSpaceEstimator", "SolvedFields", "ToySpec", "TrainConfig", "TriangleMesh",
    "chamfer", "consistent_field_v", "deformation_loss", "derivative_bundle", "extract_mesh",
    "fit_test_latent", "generate_toy", "geometric_init", "interpolate", "interpolate_linear",
    "interpolate_spiral", "interpolation_report", "jacobian_v", "killing_energy",
    "load_checkpoint", "save_checkpoint", "solve_affine_fields", "toy_preset", "train",
    "wasserstein",
]

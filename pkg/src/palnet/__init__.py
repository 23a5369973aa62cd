"""Patch-attention network for 3D facial landmark localisation, in numpy."""
from .atlas import LandmarkSet, mean_template, project_to_surface, read_landmarks, write_landmarks
from .estimators import LandmarkAtlas, PALNetRegressor, PatchExtractor, RigidAligner
from .evaluation import EvalReport, aggregate_folds, evaluate
from .geometry import BoundingBox, Mesh, PointCloud, RigidTransform
from .meshio import load_cloud, load_mesh, save_ply
from .network import ArchConfig, ModelParams, forward, init_params, predict
from .pipeline import PipelineConfig, __version__
from .registration import RegistrationConfig, align_subject
from .training import TrainConfig, composite_loss, train

__all__ = [
    "ArchConfig", "BoundingBox", "EvalReport", "LandmarkAtlas", "LandmarkSet", "Mesh",
    "ModelParams", "PALNetRegressor", "PatchExtractor", "PipelineConfig", "PointCloud",
    "RegistrationConfig", "RigidAligner", "RigidTransform", "TrainConfig", "aggregate_folds",
    "align_subject", "composite_loss", "evaluate", "forward", "init_params", "load_cloud",
    "load_mesh", "mean_template", "predict", "project_to_surface", "read_landmarks", "save_ply",
    "train", "write_landmarks", "__version__",
]

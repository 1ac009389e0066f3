"""Graph-based multi-view multi-person 3D pose estimation on synthetic scenes."""

from .config import PipelineConfig
from .crg import CenterRefinementGraph, MLPBaseline, SearchSchedule
from .errors import (BehindCameraError, ConfigError, ContractError, DegenerateRigError,
                     GraphPoseError, IllConditionedError, InsufficientViewsError,
                     OutOfBoundsError, PlacementError, TrainingDivergedError)
from .experiment import EvalReport, run_experiment
from .geometry import CameraView, FeatureGrid
from .mmg import EpipolarMatcher, GroundTruthMatcher, MatchingGraph
from .prg import PoseRegressionGraph, RefinedPose
from .synth import NoiseConfig, RigSpec, Scene, generate_scene, make_frame

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError", "CameraView", "CenterRefinementGraph", "ConfigError", "ContractError",
    "DegenerateRigError", "EpipolarMatcher", "EvalReport", "FeatureGrid", "GraphPoseError",
    "GroundTruthMatcher", "IllConditionedError", "InsufficientViewsError", "MLPBaseline",
    "MatchingGraph", "NoiseConfig", "OutOfBoundsError", "PipelineConfig", "PlacementError",
    "PoseRegressionGraph", "RefinedPose", "RigSpec", "Scene", "SearchSchedule",
    "TrainingDivergedError", "generate_scene", "make_frame", "run_experiment",
]

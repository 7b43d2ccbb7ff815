"""Object-level SLAM with semantic graph matching for loop closure."""
from .geom import Pose, compose, inverse, se3_exp, se3_log
from .semgraph import SemanticGraph, build_reward_matrix, match_graphs, principal_eigenvector, verify_loop
from .sim import NoiseConfig, SceneConfig, generate_scene, simulate_frame
from .pipeline import Pipeline, PipelineParams

__version__ = "0.1.0"

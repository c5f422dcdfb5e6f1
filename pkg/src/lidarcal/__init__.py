"""Target-based LiDAR-camera calibration with a synthetic LiDAR simulator."""
from .baseline import BaselineVertexEstimator, InsufficientEdgePoints, baseline_vertices
from .camera import CameraIntrinsics, project_point, project_points, sort_correspondences
from .extrinsic import ExtrinsicCalibrator, calibrate_iou, calibrate_pnp, iou, shoelace_area
from .geom import RigidTransform3, Sim3Transform, so3_exp, so3_log
from .harness import Scene, load_scene, pixel_rms, pose_error, round_robin, save_scene, simulate_suite, vertex_rmse
from .intrinsic import RingIntrinsicCalibrator, calibrate_rings, p2p_cost, placement_matrix
from .shapeopt import ShapeScoreConfig, optimize_shape, robust_score
from .simlidar import LidarSpec, Scan, simulate_scan
from .targets import PolygonTarget, load_optimal_shape, make_diamond, make_square
from .vertexfit import FitError, L1TargetFitter, TemplateFitter, fit_target_l1, fit_template_p2l

__version__ = "0.1.0"

__all__ = [
    "BaselineVertexEstimator", "CameraIntrinsics", "ExtrinsicCalibrator", "FitError", "InsufficientEdgePoints",
    "L1TargetFitter", "LidarSpec", "PolygonTarget", "RigidTransform3", "RingIntrinsicCalibrator", "Scan",
    "Scene", "ShapeScoreConfig", "Sim3Transform", "TemplateFitter", "baseline_vertices", "calibrate_iou",
    "calibrate_pnp", "calibrate_rings", "fit_target_l1", "fit_template_p2l", "iou", "load_optimal_shape",
    "load_scene", "make_diamond", "make_square", "optimize_shape", "p2p_cost", "pixel_rms", "placement_matrix",
    "pose_error", "project_point", "project_points", "robust_score", "round_robin", "save_scene", "shoelace_area",
    "simulate_scan", "simulate_suite", "so3_exp", "so3_log", "sort_correspondences", "vertex_rmse",
]

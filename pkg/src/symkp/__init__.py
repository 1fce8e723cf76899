"""Unsupervised, ordered, category-specific 3D keypoints from point clouds.

A numpy library that fits a symmetric low-rank keypoint basis to a shape
category end to end, without labels or alignment, then evaluates the
learned keypoints and uses them for intra-category registration.
"""

from .dataio import (DatasetManifest, PointCloud, SyntheticCategorySpec,
                     generate_synthetic_category, load_manifest, load_point_cloud,
                     normalize, random_misalign, resample, save_manifest, save_xyz)
from .evaluation import (CategoryEvaluation, MetricsRecord, coefficient_distribution_check,
                         correspondence_metric, coverage_metric, evaluate_category,
                         inclusivity_metric, label_transfer, model_error_metric,
                         registration_experiment, run_registration_experiment,
                         semantic_consistency, symmetry_error_metric)
from .geom import (SimilarityTransform, chamfer, farthest_point_sampling, knn,
                   nms_select, one_sided_chamfer, reflection_from_normal,
                   rotation_about_up, similarity_registration)
from .losses import LossWeights, chamfer_loss, coverage_loss, inclusivity_loss, total_loss
from .model import (CategoryParams, PoseCoeffs, Prediction, decode_keypoints,
                    init_category_params, node_branch, pose_coeff_branch, predict)
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CategoryEvaluation", "CategoryParams", "DatasetManifest", "LossWeights",
    "MetricsRecord", "PointCloud", "PoseCoeffs", "Prediction", "SimilarityTransform",
    "SyntheticCategorySpec", "TrainConfig", "chamfer", "chamfer_loss",
    "coefficient_distribution_check", "correspondence_metric", "coverage_loss",
    "coverage_metric", "decode_keypoints", "evaluate_category", "farthest_point_sampling",
    "generate_synthetic_category", "inclusivity_loss", "inclusivity_metric",
    "init_category_params", "knn", "label_transfer", "load_checkpoint", "load_manifest",
    "load_point_cloud", "model_error_metric", "nms_select", "node_branch", "normalize",
    "one_sided_chamfer", "pose_coeff_branch", "predict", "random_misalign",
    "reflection_from_normal", "registration_experiment", "resample", "rotation_about_up",
    "run_registration_experiment", "save_checkpoint", "save_manifest", "save_xyz",
    "semantic_consistency", "similarity_registration", "symmetry_error_metric", "total_loss",
    "train",
]

"""Two-stage unsupervised anomaly detection.

Stage one (:mod:`.ienet`) reconstructs an anomaly-free impression of an
image; stage two (:mod:`.expertnet`) restores its detail; the perceptual
head (:mod:`.perceptual`) compares the four images to localize anomalies.
"""

from .config import ExperimentConfig, apply_overrides
from .data import (DatasetHandle, build_one_class_protocol, load_digits_dataset,
                   load_folder_dataset, preprocess, synth_defect_dataset)
from .errors import AnomalyError
from .expertnet import ExpertNet, adain, expert_loss
from .ienet import IENet, kl_gaussian, mi_discriminator_loss
from .metrics import EvaluationReport, aggregate_report, auroc, iou
from .perceptual import anomaly_map, build_backbone, image_score, layer_distance, segment
from .training import (ABLATION_ROWS, compute_impressions, detect, evaluate,
                       generate_impression_set, images_of, run_ablation, train_expert_net,
                       train_ie_net)

__all__ = [
    "ABLATION_ROWS", "AnomalyError", "DatasetHandle", "EvaluationReport", "ExperimentConfig",
    "ExpertNet", "IENet", "adain", "aggregate_report", "anomaly_map", "apply_overrides", "auroc",
    "build_backbone", "build_one_class_protocol", "compute_impressions", "detect", "evaluate",
    "expert_loss", "generate_impression_set", "image_score", "images_of", "iou", "kl_gaussian",
    "layer_distance", "load_digits_dataset", "load_folder_dataset", "mi_discriminator_loss",
    "preprocess", "run_ablation", "segment", "synth_defect_dataset", "train_expert_net",
    "train_ie_net",
]

__version__ = "0.1.0"

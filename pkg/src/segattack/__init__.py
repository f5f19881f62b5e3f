"""Adversarial attack workbench for small multi-class segmentation networks.

The package trains a pair of compact encoder-decoder segmentation networks
(attacked network + surrogate) on procedurally generated chest-like phantoms
and evaluates L-infinity adversarial attacks against them: untargeted
degradation, targeted insertion of a heart symbol, and targeted resizing of
anatomical structures, each in white-box and black-box (transfer) settings.
"""

from .attacks import AttackConfig, fgsm, make_noise_mask, pgd
from .autodiff import Tensor
from .data import (CLASS_NAMES, STRUCTURE_CLASSES, PhantomConfig,
                   SegmentationSample, SplitPlan, elastic_deform,
                   generate_phantom, make_split)
from .harness import (ExperimentConfig, MetricsRecord, SuiteResult,
                      emit_report, run_full_suite, run_heart_suite,
                      run_resize_suite, run_untargeted_suite)
from .metrics import (SCOPE_ALL, SCOPE_STRUCTURES, ClassScope, iou, mean_iou,
                      soft_iou_loss)
from .model import (DESK_SPEC, REFERENCE_SPEC, Network, UNetSpec, build_unet,
                    load_weights, predict, receptive_field, save_weights)
from .targets import TargetSpec, compose_target, heart_symbol_mask, resize_mask
from .training import TrainConfig, train, train_pair

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "fgsm", "make_noise_mask", "pgd",
    "Tensor",
    "CLASS_NAMES", "STRUCTURE_CLASSES", "PhantomConfig", "SegmentationSample",
    "SplitPlan", "elastic_deform", "generate_phantom", "make_split",
    "ExperimentConfig", "MetricsRecord", "SuiteResult", "emit_report",
    "run_full_suite", "run_heart_suite", "run_resize_suite",
    "run_untargeted_suite",
    "SCOPE_ALL", "SCOPE_STRUCTURES", "ClassScope", "iou", "mean_iou",
    "soft_iou_loss",
    "DESK_SPEC", "REFERENCE_SPEC", "Network", "UNetSpec", "build_unet",
    "load_weights", "predict", "receptive_field", "save_weights",
    "TargetSpec", "compose_target", "heart_symbol_mask", "resize_mask",
    "TrainConfig", "train", "train_pair",
    "__version__",
]

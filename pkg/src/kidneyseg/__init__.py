"""Coarse-to-fine kidney, tumor and cyst segmentation for abdominal CT."""

from .data import CaseRecord, CtVolume, LabelMask, RoiBox, build_manifest, load_mask, load_volume, save_mask
from .evaluation import HECS, dice, evaluate_case, evaluate_dataset, surface_dice
from .inference import PipelineConfig, filter_connected_components, run_pipeline, tta_zflip
from .network import NetworkSpec, build_network, coarse_spec, fine_spec
from .preprocessing import AugmentConfig, clip_and_normalize, compute_roi, crop_roi, resample_volume
from .training import StageConfig, train_stage

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "CaseRecord", "CtVolume", "HECS", "LabelMask", "NetworkSpec", "PipelineConfig",
    "RoiBox", "StageConfig", "build_manifest", "build_network", "clip_and_normalize", "coarse_spec",
    "compute_roi", "crop_roi", "dice", "evaluate_case", "evaluate_dataset", "filter_connected_components",
    "fine_spec", "load_mask", "load_volume", "resample_volume", "run_pipeline", "save_mask",
    "surface_dice", "train_stage", "tta_zflip",
]

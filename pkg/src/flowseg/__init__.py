"""Morphology-independent cell instance segmentation (distance field + gradient
flow + boundary) with few-shot contrastive domain adaptation."""

__version__ = "0.1.0"

from .datamodel import (Checkpoint, Dataset, FeatureMap, Image, InstanceMask,
                        TargetField, load_checkpoint, read_pgm, save_checkpoint,
                        write_pgm)
from .labelgen import boundary_mask, distance_field, flow_field, make_targets
from .losses import AdaptConfig, LossConfig
from .net import ModelConfig, OptimState, forward, init_params, radam_step
from .segmenter import HeadConfig, segment
from .synthgen import SynthConfig, crop_patches, gen_dataset, load_dataset, write_dataset

__all__ = [
    "AdaptConfig", "Checkpoint", "Dataset", "FeatureMap", "HeadConfig", "Image",
    "InstanceMask", "LossConfig", "ModelConfig", "OptimState", "SynthConfig",
    "TargetField", "boundary_mask", "crop_patches", "distance_field", "flow_field",
    "forward", "gen_dataset", "init_params", "load_checkpoint", "load_dataset",
    "make_targets", "radam_step", "read_pgm", "save_checkpoint", "segment",
    "write_dataset", "write_pgm",
]

"""Desk-scale interactive avatar head generation and evaluation toolkit."""

from .config import Config, ConfigError, load_config
from .datamodel import (AudioFeatureSeq, ConversationSample, DialogueHistory, LoadError,
                        MaskLayout, MotionLatentCodec, MotionSeq, RegionMasks, SpatialLatent,
                        ValidationError, VisualTokenSeq, build_region_masks, codec_from_config,
                        load_sample, masks_from_config, save_sample)

__all__ = [
    "AudioFeatureSeq", "Config", "ConfigError", "ConversationSample", "DialogueHistory",
    "LoadError", "MaskLayout", "MotionLatentCodec", "MotionSeq", "RegionMasks",
    "SpatialLatent", "ValidationError", "VisualTokenSeq", "build_region_masks",
    "codec_from_config", "load_config", "load_sample", "masks_from_config", "save_sample",
]

__version__ = "0.1.0"

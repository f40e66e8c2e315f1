"""Dual-attention (CBAM + channel recalibration) fundus image classifier."""

__version__ = "0.1.0"

from .attention import CBAM, ChannelAttention, ChannelRecalibration, SpatialAttention, build_composite, channel_stats, edge_map
from .model import BackboneSpec, ClassifierModel, ablation_variant, build_model

__all__ = [
    "CBAM",
    "ChannelAttention",
    "ChannelRecalibration",
    "SpatialAttention",
    "build_composite",
    "channel_stats",
    "edge_map",
    "BackboneSpec",
    "ClassifierModel",
    "ablation_variant",
    "build_model",
]

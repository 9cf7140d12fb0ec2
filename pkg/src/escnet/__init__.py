"""Desk-scale open-vocabulary segmentation with correlation-driven pseudo
prompts, promptable two-way attention refinement, and vision-language
fusion, plus a synthetic training and evaluation harness."""

from .config import ModelConfig, tiny_config
from .correlation import CorrelationMap, correlate
from .encoders import (TextFeature, ToyTextEncoder, ToyVisionEncoder,
                       VisionFeature, load_fixture, save_fixture)
from .metrics import EvalReport, MiouAccumulator, miou
from .model import ESCNet, SegmentationOutput, load_checkpoint, loss, save_checkpoint
from .ppg import (PromptEmbeddings, PromptEncoder, PseudoPrompts, binarize,
                  cluster_regions, extract_prompts, generate_prompts,
                  spatial_softmax)
from .samblock import TwoWayBlock, load_block_weights, refine_vision, save_block_weights
from .vlf import VLF, EmbeddedCorrelation

__all__ = [
    "CorrelationMap", "EmbeddedCorrelation", "ESCNet", "EvalReport",
    "MiouAccumulator", "ModelConfig", "PromptEmbeddings", "PromptEncoder",
    "PseudoPrompts", "SegmentationOutput", "TextFeature", "ToyTextEncoder",
    "ToyVisionEncoder", "TwoWayBlock", "VLF", "VisionFeature", "binarize",
    "cluster_regions", "correlate", "extract_prompts", "generate_prompts",
    "load_block_weights", "load_checkpoint", "load_fixture", "loss", "miou",
    "refine_vision", "save_block_weights", "save_checkpoint", "save_fixture",
    "spatial_softmax", "tiny_config",
]

"""Autoregressive triangle-mesh generation with latent subsequence pathways."""

from .mesh import Mesh, PointCloudSet, load_obj, make_pointcloud_set, save_obj, synth_shape
from .model import MICRO_CONFIG, TOY_CONFIG, LaneModel, ModelConfig
from .tokenizer import Scheme, TokenSequence, detokenize, tokenize

__version__ = "0.1.0"

__all__ = [
    "Mesh", "PointCloudSet", "load_obj", "save_obj", "make_pointcloud_set", "synth_shape",
    "ModelConfig", "LaneModel", "TOY_CONFIG", "MICRO_CONFIG",
    "Scheme", "TokenSequence", "tokenize", "detokenize",
]

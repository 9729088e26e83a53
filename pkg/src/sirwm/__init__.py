"""Semantic-invariant watermarking of language-model output, at desk scale."""

from .core import DimMap, Embedding, InvalidArgument, TokenSeq, Vocab, WatermarkLogits, build_dim_map, token_score
from .detect import DetectionResult, calibrate_threshold, metrics, score_kgw, score_text
from .generate import GenerationConfig, GenerationTrace, KgwConfig, KgwWatermark, SirWatermark, generate
from .net import LossConfig, NetParams, forward, init_params, shape_transform
from .train import Checkpoint, TrainConfig, train

__version__ = "0.1.0"

from .io import decode_features, encode_features, load_dataset, read_features, read_manifest, save_dataset, write_features
from .sequences import (
    FeatureSequence, PipelineConfig, Rejection, UtteranceRecord, alignment_check, confidence_filter, downsample,
    fill_missing, pipeline_fingerprint, preprocess_pair,
)
from .splits import split, subsample_training
from .synthetic import SyntheticSpec, generate_synthetic, make_generator

__all__ = [
    "FeatureSequence",
    "PipelineConfig",
    "Rejection",
    "SyntheticSpec",
    "UtteranceRecord",
    "alignment_check",
    "confidence_filter",
    "decode_features",
    "downsample",
    "encode_features",
    "fill_missing",
    "generate_synthetic",
    "load_dataset",
    "make_generator",
    "pipeline_fingerprint",
    "preprocess_pair",
    "read_features",
    "read_manifest",
    "save_dataset",
    "split",
    "subsample_training",
    "write_features",
]

"""Landmark recognition with center-loss embeddings, multi-centroid indexing and gated inference."""

from .clustering import (CentroidSet, ClusteringConfig, ThresholdAgglomerativeClustering, agglomerate,
                         build_centroid_set, mean_centroid_set, read_centroids, write_centroids)
from .config import ConfigError
from .data import (CodecError, Dataset, LandmarkMetadata, MetadataError, SyntheticSpec, generate_synthetic,
                   partition_by_region, read_embeddings, read_metadata, write_embeddings, write_metadata)
from .evaluation import (EvalReport, UnreachableTarget, calibrate_threshold, retrieval_metrics,
                         sensitivity_specificity)
from .index import CentroidIndex, build_cell_index, build_exact_index, geo_scope
from .pipeline import (InferenceConfig, LandmarkRecognizer, RecognitionResult, ReferenceCleaner, clean_dataset,
                       infer)
from .training import LandmarkEmbedder, TrainingConfig, curriculum_train, embed

__version__ = "0.1.0"

__all__ = [
    "CentroidIndex", "CentroidSet", "ClusteringConfig", "CodecError", "ConfigError", "Dataset", "EvalReport",
    "InferenceConfig", "LandmarkEmbedder", "LandmarkMetadata", "LandmarkRecognizer", "MetadataError",
    "RecognitionResult", "ReferenceCleaner", "SyntheticSpec", "ThresholdAgglomerativeClustering", "TrainingConfig",
    "UnreachableTarget", "agglomerate", "build_cell_index", "build_centroid_set", "build_exact_index",
    "calibrate_threshold", "clean_dataset", "curriculum_train", "embed", "generate_synthetic", "geo_scope", "infer",
    "mean_centroid_set", "partition_by_region", "read_centroids", "read_embeddings", "read_metadata",
    "retrieval_metrics", "sensitivity_specificity", "write_centroids", "write_embeddings", "write_metadata",
]

"""Cognitive diagnosis on response graphs.

Students, exercises and concepts form one graph whose student-exercise
edges are typed by response correctness.  A response-aware convolution
embeds all nodes, a pluggable base model (IRT or a monotone MLP) turns
embeddings into predictions, and an edge-flip consistency penalty keeps
the two edge channels from collapsing into each other.
"""

__version__ = "0.1.0"

from .cat import RandomStrategy, run_cat, split_students
from .cdm import IrtModel, MonotoneMlpModel, monotonicity_check
from .checkpoint import load_trained, save_trained
from .data import (
    Dataset,
    Split,
    SyntheticSpec,
    build_interaction_matrix,
    generate_synthetic,
    inject_noise,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    LatentMasteryError,
    NumericsError,
    UndefinedMetricError,
)
from .graph import ResponseGraph, build_response_graph, flip_edges, normalize_adjacency
from .metrics import MetricReport, accuracy, auc, doa, mnd, top_concepts
from .training import TrainConfig, TrainedModel, train

__all__ = [
    "ConfigError",
    "DataError",
    "Dataset",
    "IrtModel",
    "LatentMasteryError",
    "MetricReport",
    "MonotoneMlpModel",
    "NumericsError",
    "RandomStrategy",
    "ResponseGraph",
    "Split",
    "SyntheticSpec",
    "TrainConfig",
    "TrainedModel",
    "UndefinedMetricError",
    "accuracy",
    "auc",
    "build_interaction_matrix",
    "build_response_graph",
    "doa",
    "flip_edges",
    "generate_synthetic",
    "inject_noise",
    "load_dataset",
    "load_trained",
    "mnd",
    "monotonicity_check",
    "normalize_adjacency",
    "run_cat",
    "save_dataset",
    "save_trained",
    "split_dataset",
    "split_students",
    "top_concepts",
    "train",
]

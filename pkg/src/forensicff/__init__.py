"""Toolkit for discovering and characterizing forensic feature maps in
CNN-based counterfeit detectors: relevance propagation, per-feature-map
relevance scoring, peak-relevance explanations, dropout sensitivity and
color-ablation statistics.
"""

__version__ = "0.1.0"

from .colorstats import (
    collect_max_activations,
    color_conditional_fraction,
    moods_median_test,
    run_color_test,
)
from .errors import ForensicError, UsageError
from .evaluation import average_precision, evaluate, oracle_threshold, sample_median
from .explain import extract_patch, lrp_max_explain
from .fixture import FixtureSpec, build_fixture_dataset, build_fixture_model, emit_fixture
from .imageio import grayscale, load_png, normalize, scan_dataset
from .lrp import beta0_redistribute, epsilon_redistribute, lrp_backward
from .model import (
    DropoutMask,
    ForwardTrace,
    LayerSpec,
    ModelGraph,
    forward,
    fuse_batchnorm,
    load_model,
    load_model_dir,
    save_model,
    sigmoid,
)
from .relevance import FeatureMapId, FeatureMapSet, OmegaTable, compute_ff_rs, default_k, select
from .tensor import reduce_max_spatial, relu_clip, sum_abs

__all__ = [
    "FeatureMapId",
    "FeatureMapSet",
    "FixtureSpec",
    "ForensicError",
    "ForwardTrace",
    "DropoutMask",
    "LayerSpec",
    "ModelGraph",
    "OmegaTable",
    "UsageError",
    "average_precision",
    "beta0_redistribute",
    "build_fixture_dataset",
    "build_fixture_model",
    "collect_max_activations",
    "color_conditional_fraction",
    "compute_ff_rs",
    "default_k",
    "emit_fixture",
    "epsilon_redistribute",
    "evaluate",
    "extract_patch",
    "forward",
    "fuse_batchnorm",
    "grayscale",
    "load_model",
    "load_model_dir",
    "load_png",
    "lrp_backward",
    "lrp_max_explain",
    "moods_median_test",
    "normalize",
    "oracle_threshold",
    "reduce_max_spatial",
    "relu_clip",
    "run_color_test",
    "sample_median",
    "save_model",
    "scan_dataset",
    "select",
    "sigmoid",
    "sum_abs",
]

"""Camera-based batch normalization on a small numpy network.

Training-time per-camera standardization, test-time per-camera statistics
estimation, incremental learning with exemplar replay, weak (intra-camera)
supervision and a synthetic multi-camera retrieval benchmark.
"""

from .adaptation import CameraStatsTable, estimate_adabn_stats, estimate_camera_stats, inject_stats
from .data import (
    Dataset,
    MiniBatch,
    SynthConfig,
    build_exemplar_memory,
    generate_synthetic,
    load_dataset,
    mixed_replay_batches,
    pk_sample,
    relabel_intra_camera,
    save_dataset,
)
from .evaluation import EvalReport, FeatureSet, evaluate, evaluate_model, extract_features
from .network import ArchConfig, Model, forward_eval, forward_train, load_checkpoint, model_build, save_checkpoint
from .numerics import RngStream, affine, gaussian, reduce_moments
from .training import SequenceSpec, TrainConfig, cross_entropy, lr_at, run_incremental, train, warmup_classifier

__version__ = "0.1.0"

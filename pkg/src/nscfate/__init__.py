"""Neural-stem-cell fate classification pipeline."""

from .data import (
    DatasetManifest,
    ImageSample,
    LabelTaxonomy,
    PreprocessSpec,
    encode_labels,
    load_manifest,
    preprocess_image,
    split_dataset,
)
from .metrics import (
    ConfusionMatrix,
    EvalReport,
    RocCurve,
    compute_accuracy,
    compute_confusion_matrix,
    compute_roc_curve,
    one_vs_rest_auc,
)
from .model import ModelConfig, NetworkState, Prediction, build_model, forward, load_checkpoint, predict, save_checkpoint
from .report import evaluate, render_figures
from .synth import MorphologyParams, SyntheticSpec, generate_dataset, render_cell, sample_morphology
from .training import TrainConfig, TrainHistory, cross_entropy_loss, gradient_check, train

__version__ = "0.1.0"

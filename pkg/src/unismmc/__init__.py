"""Multimodal classification with unimodality-supervised contrastive alignment.

The package is organized bottom-up: `autodiff` is the reverse-mode engine,
`model` the encoders/classifiers, `losses` the objectives and the
positive / semi-positive / negative pair machinery, `synthgen` the
deterministic benchmark generator, `trainer` the optimization loop, and
`cli` the experiment front end.
"""

from . import autodiff, cli, container, losses, model, synthgen, trainer
from .autodiff import Tensor, backward
from .losses import (
    LossBundle,
    PairDiagnostics,
    PairSets,
    baseline_contrastive,
    categorize_pairs,
    multimodal_loss,
    pairwise_mmc_loss,
    total_mmc_loss,
    total_objective,
    unimodal_loss,
)
from .model import (
    ClassifierSpec,
    EncoderSpec,
    ModelSpec,
    ModelState,
    encode,
    fuse_and_predict,
    init_model,
    load_model,
    make_model_spec,
    predict_unimodal,
    save_model,
)
from .synthgen import MultimodalBatch, SynthDataset, SynthSpec, generate, load, save
from .trainer import RunMetrics, TrainConfig, adam_step, evaluate, export_embeddings, train

__version__ = "0.1.0"

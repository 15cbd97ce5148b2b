"""Adaptive feature transfer at desk scale.

Train a small downstream model whose features are pulled toward the
weighted span of precomputed pretrained features through a mini-batch
kernel distance, alongside the distillation baselines and ablations needed
to study the mechanism.
"""

from .autodiff import Tape, sigmoid
from .errors import AftError
from .evaluation import (
    AggregateReport,
    ProbeResult,
    RunCell,
    aggregate_normalized_error,
    linear_probe,
    mu_distribution_report,
    noise_robustness_sweep,
    weighted_probe_comparison,
)
from .featurestore import (
    Dataset,
    DatasetManifest,
    SyntheticSpec,
    append_noise_features,
    concat_sources,
    load_dataset,
    make_splits,
    read_features,
    read_labels,
    synth_planted,
    write_features,
    write_labels,
)
from .models import ExtractorSpec, tensor_product_features
from .regularizers import (
    FtNets,
    KdTransform,
    MuWeights,
    RegularizerSpec,
    aft_regularizer,
    ft_regularizer,
    kd_regularizer,
    l2_regularizer,
    pretrain_paraphraser,
    rkd_regularizer,
)
from .trainer import RunRecord, TrainConfig, run_training, select_beta, train_step

__version__ = "0.1.0"

"""imuclr: multi-objective contrastive pretraining for IMU encoders.

The pretraining objective combines a unimodal self-supervision term, a
multimodal alignment term against frozen video/text embeddings, and a
nearest-neighbor term driven by a fixed-size feature queue. Evaluation is
few-shot linear probing of the frozen encoder.
"""

__version__ = "0.1.0"

from .augment import AugmentConfig, apply_h, random_scale, time_reverse
from .data import (
    AlignedTriplet,
    SyntheticSpec,
    TripletDataset,
    gen_synthetic,
    import_csv,
    load_dataset,
    sample_few_shot,
    save_dataset,
    strip_alignment,
    window_stream,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    encode_backbone,
    head_mm,
    head_ss,
    init_encoder,
    load_encoder,
    param_count,
    save_encoder,
)
from .evaluation import (
    ProbeConfig,
    ProbeReport,
    collapse_diagnostic,
    extract_features,
    few_shot_eval,
    linear_probe,
)
from .experiments import ExperimentGrid, GridPoint, emit_results, preset_grid, run_ablation
from .feature_queue import FeatureQueue, QueueEntry
from .losses import BatchView, LossConfig, combined_loss, loss_mm, loss_nn, loss_ss
from .nn_ops import (
    GruParams,
    conv1d,
    cross_entropy,
    group_norm,
    gru_forward,
    info_nce,
    l2_normalize,
    linear,
    max_pool1d,
)
from .optim import AdamState, adam_step, grad_check
from .seeding import make_rng
from .tensor import Tape, Tensor
from .training import TrainConfig, load_checkpoint, pretrain, save_checkpoint

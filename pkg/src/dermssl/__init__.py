"""Self-supervised VAE pretraining vs external pretraining for lesion triage."""
from .backbones import BackboneSpec, build_decoder, build_encoder, checksum, stage_checksums
from .config import ExperimentConfig, load_config
from .dataset import (
    ImageRecord,
    Modality,
    Priority,
    PriorityMap,
    Source,
    SplitSpec,
    dedupe_by_patient,
    filter_modality,
    map_to_priority,
    merge_sources,
    split,
    synth_dataset,
)
from .dynamics import overall_change, overfitting_gap, table_report, window_slope
from .head import ClassifierHead, FocalParams, HeadSpec, classify, extract_features, focal_loss, freeze, unfreeze_final_stage
from .logs import EpochLog, EpochRow, read_epoch_log
from .optim import AdamWScheduleFree
from .pipeline import compare, pretrain, train_classifier
from .vae import VAE, LatentStats, beta_schedule, elbo_loss, kl_divergence, reconstruction_loss, reparameterize

__version__ = "0.1.0"

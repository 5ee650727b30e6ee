"""Detail-condensing query tokenizers at desk scale.

A frozen vision-transformer backbone provides patch latents; learnable
queries condense its intermediate features through cross-attention
without touching the main path; a dual-stream decoder reconstructs
pixels from both; and a joint flow-matching model generates both latent
streams for class-conditional synthesis. Baseline tokenizer paradigms
(freeze, finetune, distill, feat_concat) share the same interfaces, and
an accounting module tracks the exact compute and parameter overhead of
the queries.
"""

from .backbone import BackboneConfig, VisionBackbone, patchify, sincos_1d, sincos_2d, unpatchify
from .common import ConfigError, LatentPair, ShapeError, TrainingDiverged, token_layernorm
from .condenser import CondenserConfig, CrossAttention, CondenserBlock, QueryCondenser, encode
from .config import ExperimentConfig, GenSettings, PretrainConfig, load_experiment
from .data import DataConfig, FolderDataset, SyntheticShapes, SyntheticSpec, ingest, split_train_val
from .decoder import DecoderConfig, DualStreamDecoder
from .flow import autoguide, euler_sample, fm_loss, interpolate, sample, time_shift, velocity_target
from .losses import ConvFeatures, distill_loss, recon_loss
from .metrics import (
    fid_proxy,
    frechet_distance,
    knn_precision_recall,
    nearest_neighbors,
    psnr,
    ssim,
)
from .overhead import (
    ArchConfig,
    condenser_macs,
    condenser_params,
    generation_report,
    layer_macs,
    tokenizer_report,
)
from .tokenizer import Tokenizer, TokenizerConfig, build_tokenizer
from .training import TrainSchedule, pretrain_backbone, train_generator, train_tokenizer
from .velocity_model import GenConfig, JointVelocityModel

__version__ = "0.1.0"

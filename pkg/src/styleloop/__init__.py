"""styleloop: unsupervised image style transfer at desk scale.

Pipeline: distill pseudo-pairs from a frozen stylizer, train a one-step
latent translator with two domain-adapted text encoders under cycle
consistency, then stylize / destylize with a single forward pass and score
the results with FID / SSIM / LPIPS / aesthetic metrics.
"""

from .config import ExperimentConfig, load_config, save_config, validate_config
from .datasets import DatasetManifest, PseudoPair, load_image, read_manifest, save_image, write_manifest
from .distill import DistillationJob, FrozenGeneratorClient, distill, stub_stylize
from .generator import GeneratorWeights, build_generator, translate, vae_decode, vae_encode
from .lora import LoRAAdapter, apply_adapted, init_adapter, merge
from .metrics import MetricsReport, aesthetic_score, evaluate, extract_features, fid, lpips, ssim
from .text_encoder import (
    ConditioningEmbedding,
    TokenSequence,
    embedding_separation,
    encode_base,
    encode_domain,
    separation_loss,
    tokenize,
)
from .training import LossBreakdown, TrainState, build_models, cycle_loss, perceptual_loss, train

__version__ = "0.1.0"

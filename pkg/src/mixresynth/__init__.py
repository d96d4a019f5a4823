"""Adversarial resynthesis of mixed auto-encoder codes.

Auto-encoders whose latent codes are recombined by pluggable mixing
functions (convex, simplex, feature-map crossover, label-conditioned) and
decoded into outputs trained to fool an adversarial discriminator, plus the
surrounding training loop and evaluation protocols.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, parse_config
from .errors import ConfigError, DataError, NumericsError
from .mixing import (
    FeatureMask,
    LatentMixer,
    MixWeights,
    mix_categorical,
    mix_convex,
    mix_labels,
    mix_masked,
    mix_supervised,
    sample_convex_weight,
    sample_feature_mask,
    sample_partners,
    sample_simplex_weights,
)
from .objectives import (
    Batch,
    LossReport,
    LossWeights,
    acai_losses,
    aegan_losses,
    amr_losses,
    consistency_loss,
    gan_loss,
    gan_loss_logits,
    recon_loss,
    supervised_losses,
)

__all__ = [name for name in dir() if not name.startswith("_")]

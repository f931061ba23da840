"""Unsupervised contrastive single-image dehazing."""

__version__ = "0.1.0"

from .discriminator import PatchDiscriminator, lsgan_discriminator_loss, lsgan_generator_loss
from .errors import (ConfigError, DimensionError, InputError, IntegrityError, NonFiniteLossError,
                     VersionError)
from .generator import (FeatureStack, Generator, GeneratorConfig, SCConv, sc_conv,
                        spectral_normalize)
from .losses import (LossBundle, LossWeights, PatchSampleSet, ProjectionHead, VGGFeatures,
                     identity_loss, nce_single, patch_nce_loss, sample_and_project, scp_loss,
                     total_generator_loss)
from .trainer import (TrainConfig, TrainState, VARIANTS, fit, load_generator, lr_schedule, train_step,
                      variant_flags)
from .data import load_checkpoint, load_image, save_checkpoint, save_image, scan_unpaired
from .metrics import ciede2000, evaluate_dirs, evaluate_pair, psnr, ssim, visible_edge_metrics

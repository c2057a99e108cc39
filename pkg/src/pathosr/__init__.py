"""pathosr: multi-scale GAN super-resolution for pathology tiles.

Builds 10X, 20X and 40X images from a 5X scan through three chained x2
super-resolution stages, trained with a weighted pixel/perceptual/adversarial
loss and a variance-based patch curriculum.
"""

from .dataset import FlatnessSchedule, PatchPair, TileRecord, build_pyramid, sample_patches, tile_image
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import GeneratorConfig, MultiScaleGenerator, count_parameters, generator_forward
from .imaging import MagLevel, MetricReport, bicubic_resize, psnr, ssim
from .inference import StitchPlan, super_resolve_image, super_resolve_tile
from .losses import (
    FeatureExtractor,
    LossBreakdown,
    LossWeights,
    adversarial_generator_term,
    discriminator_loss,
    generator_loss,
    perceptual_loss,
    total_loss,
)
from .trainer import TrainConfig, learning_rate, train, train_step, validate

__version__ = "0.1.0"

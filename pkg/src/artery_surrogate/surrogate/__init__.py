"""Neural surrogates: U-Net regressor and conditional GAN."""
from .checkpoint import (Checkpoint, FingerprintMismatch, load_checkpoint, save_checkpoint,
                         transfer_init)
from .estimators import CGANRegressor, MeanImageBaseline, UNetRegressor, load_estimator
from .losses import discriminator_loss, generator_loss, l1_loss, mse_loss
from .networks import (DiscriminatorConfig, PatchDiscriminator, UNet, UNetConfig,
                       build_discriminator, build_unet, count_parameters)

__all__ = ["Checkpoint", "FingerprintMismatch", "load_checkpoint", "save_checkpoint",
           "transfer_init", "CGANRegressor", "MeanImageBaseline", "UNetRegressor",
           "load_estimator", "discriminator_loss", "generator_loss", "l1_loss", "mse_loss",
           "DiscriminatorConfig", "PatchDiscriminator", "UNet", "UNetConfig",
           "build_discriminator", "build_unet", "count_parameters"]

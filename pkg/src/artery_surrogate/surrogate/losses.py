"""Training objectives for the regressor and the conditional GAN."""
import torch
import torch.nn.functional as F


def mse_loss(pred, target):
    """Mean over batch and pixels of the squared difference."""
    return torch.mean((pred - target) ** 2)


def l1_loss(pred, target):
    return torch.mean(torch.abs(pred - target))


def _bce(logits, value):
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, value))


def generator_loss(disc_fake_logits, gen_img, target_img, lam):
    """Returns (total, gan_loss, l1) with total = lam * gan_loss + l1."""
    gan = _bce(disc_fake_logits, 1.0)
    l1 = l1_loss(gen_img, target_img)
    return lam * gan + l1, gan, l1


def discriminator_loss(real_logits, fake_logits):
    return _bce(real_logits, 1.0) + _bce(fake_logits, 0.0)

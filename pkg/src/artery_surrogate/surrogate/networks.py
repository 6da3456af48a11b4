"""U-Net generator/regressor and the patch discriminator."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
from torch import nn

__all__ = ["UNetConfig", "DiscriminatorConfig", "UNet", "PatchDiscriminator",
           "build_unet", "build_discriminator", "count_parameters", "fingerprint"]


def fingerprint(kind: str, arch: dict) -> str:
    text = json.dumps({"kind": kind, **arch}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class UNetConfig:
    """``depth`` is the number of 2x2 down-sampling steps."""

    depth: int = 6
    base_channels: int = 64
    channel_cap: int = 512
    dropout: float = 0.0
    batch_norm: bool = True
    extra_stem_32: bool = False
    in_channels: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("U-Net depth must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def channels(self) -> list[int]:
        return [min(self.base_channels * 2 ** level, self.channel_cap)
                for level in range(self.depth + 1)]

    def architecture(self) -> dict:
        # Dropout does not change tensor shapes, so it is not part of the fingerprint.
        arch = asdict(self)
        arch.pop("dropout")
        return arch

    @property
    def fingerprint(self) -> str:
        return fingerprint("unet", self.architecture())


@dataclass(frozen=True)
class DiscriminatorConfig:
    filters: tuple = (64, 128, 256, 512, 1024)
    kernel_size: int = 4
    leaky_slope: float = 0.25
    l1_weight: float = 1e-4
    in_channels: int = 4

    def architecture(self) -> dict:
        arch = asdict(self)
        arch["filters"] = list(self.filters)
        arch.pop("l1_weight")
        return arch

    @property
    def fingerprint(self) -> str:
        return fingerprint("patch-discriminator", self.architecture())


def _conv_block(c_in, c_out, batch_norm, dropout=0.0):
    layers = []
    for k, (a, b) in enumerate(((c_in, c_out), (c_out, c_out))):
        layers.append(nn.Conv2d(a, b, 3, padding=1, bias=not batch_norm))
        if batch_norm:
            layers.append(nn.BatchNorm2d(b))
        layers.append(nn.ReLU(inplace=True))
    if dropout > 0:
        layers.append(nn.Dropout(dropout))
    return nn.Sequential(*layers)


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        ch = config.channels()
        bn = config.batch_norm
        c_in = config.in_channels
        self.stem = None
        if config.extra_stem_32:
            self.stem = _conv_block(c_in, 32, bn)
            c_in = 32
        self.pool = nn.MaxPool2d(2)
        self.encoder = nn.ModuleList()
        for level, c in enumerate(ch):
            self.encoder.append(_conv_block(c_in if level == 0 else ch[level - 1], c, bn,
                                            config.dropout))
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in reversed(range(config.depth)):
            self.up.append(nn.ConvTranspose2d(ch[level + 1], ch[level], 2, stride=2))
            deep = level >= config.depth - 2
            self.decoder.append(_conv_block(2 * ch[level], ch[level], bn,
                                            config.dropout if deep else 0.0))
        c_out = ch[0]
        self.tail = None
        if config.extra_stem_32:
            self.tail = _conv_block(c_out, 32, bn)
            c_out = 32
        self.head = nn.Conv2d(c_out, 1, 1)

    def forward(self, x):
        if self.stem is not None:
            x = self.stem(x)
        skips = []
        for level, block in enumerate(self.encoder):
            if level > 0:
                x = self.pool(x)
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, block in zip(self.up, self.decoder):
            x = up(x)
            x = block(torch.cat([x, skips.pop()], dim=1))
        if self.tail is not None:
            x = self.tail(x)
        return self.head(x)


class PatchDiscriminator(nn.Module):
    """Grid of realness logits for a (condition, field) pair."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        layers = []
        c = config.in_channels
        k = config.kernel_size
        for f in config.filters:
            layers += [nn.Conv2d(c, f, k, stride=2, padding=(k - 1) // 2 if k % 2 else k // 2 - 1),
                       nn.LeakyReLU(config.leaky_slope)]
            c = f
        lo = (k - 1) // 2
        layers += [nn.ZeroPad2d((lo, k - 1 - lo, lo, k - 1 - lo)), nn.Conv2d(c, 1, k)]
        self.net = nn.Sequential(*layers)

    def forward(self, condition, candidate):
        return self.net(torch.cat([condition, candidate], dim=1))

    def kernel_l1(self):
        return sum(m.weight.abs().sum() for m in self.net if isinstance(m, nn.Conv2d))


def build_unet(config: UNetConfig | None = None) -> UNet:
    return UNet(config or UNetConfig())


def build_discriminator(config: DiscriminatorConfig | None = None) -> PatchDiscriminator:
    return PatchDiscriminator(config or DiscriminatorConfig())


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)

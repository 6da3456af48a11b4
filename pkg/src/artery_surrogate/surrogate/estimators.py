"""Scikit-learn style estimators wrapping the networks.

Images follow the channels-last layout of the dataset: ``X`` is (N, H, W, 3)
and targets are (N, H, W).  Predictions are clipped to [0, 1].
"""
from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ..validation import check_images, check_targets
from .checkpoint import (Checkpoint, load_checkpoint, save_checkpoint, state_to_numpy,
                         transfer_init)
from .losses import discriminator_loss, generator_loss, l1_loss, mse_loss
from .networks import DiscriminatorConfig, UNetConfig, build_discriminator, build_unet

logger = logging.getLogger(__name__)

__all__ = ["UNetRegressor", "CGANRegressor", "MeanImageBaseline", "load_estimator"]

_UNET_PARAMS = ("depth", "base_channels", "channel_cap", "dropout", "batch_norm", "extra_stem_32")


def _to_nchw(X):
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(X, -1, 1)))


def _as_checkpoint(obj):
    if obj is None or isinstance(obj, Checkpoint):
        return obj
    return load_checkpoint(obj)


def _jsonable(params):
    out = {}
    for k, v in params.items():
        if isinstance(v, (Checkpoint, Path)) or k in ("init_checkpoint", "log_path"):
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


class _ImageNetEstimator(BaseEstimator, RegressorMixin):
    """Shared plumbing: config, prediction, checkpoints."""

    _kind = ""

    def _unet_config(self) -> UNetConfig:
        return UNetConfig(**{k: getattr(self, k) for k in _UNET_PARAMS})

    def _check_X(self, X):
        return check_images(X, channels=3, divisor=2 ** self.depth)

    def _split_validation(self, X, y, validation_data, rng):
        if validation_data is not None:
            Xv = check_images(validation_data[0], channels=3, divisor=2 ** self.depth)
            return X, y, Xv, check_targets(validation_data[1], Xv)
        if self.validation_fraction and self.validation_fraction > 0:
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            order = rng.permutation(len(X))
            val, tr = order[:n_val], order[n_val:]
            return X[tr], y[tr], X[val], y[val]
        return X, y, None, None

    def _fit_gain(self, y):
        """Factor applied to targets during training.

        Solved fields often occupy a small corner of [0, 1]; fitting them at
        that scale leaves Adam's step noise comparable to the signal.  With
        ``target_scaling="p99"`` the network sees targets whose 99th
        percentile is 1 and predictions are divided back before clipping.
        """
        if self.target_scaling in (None, "none"):
            return 1.0
        if self.target_scaling != "p99":
            raise ValueError(f"unknown target_scaling {self.target_scaling!r}")
        q = float(np.percentile(y, 99))
        return 1.0 / q if q > 1e-12 else 1.0

    def _log_epoch(self, record):
        self.history_.append(record)
        if self.log_path:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if self.verbose:
            logger.info("%s epoch %s", self._kind, record)

    @staticmethod
    def _check_finite(value, epoch, batch, what):
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite {what} ({value}) at epoch {epoch}, batch {batch}")

    def _net_for_predict(self):
        return self.net_

    def _set_inference_mode(self, net):
        net.eval()

    @torch.no_grad()
    def predict(self, X):
        """Field maps (N, H, W) in [0, 1].

        Samples go through the network one at a time so results do not depend
        on how the caller batches them (conv kernels pick batch-dependent
        summation orders).
        """
        check_is_fitted(self, "net_")
        X = self._check_X(X)
        net = self._net_for_predict()
        self._set_inference_mode(net)
        out = [net(_to_nchw(X[i:i + 1]))[:, 0].numpy() for i in range(len(X))]
        out = np.concatenate(out) / np.float32(getattr(self, "target_gain_", 1.0))
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    def score(self, X, y, sample_weight=None):
        """Negative mean squared error (higher is better)."""
        pred = self.predict(X)
        y = check_targets(y, self._check_X(X))
        return -float(np.mean((pred.astype(np.float64) - y) ** 2))

    def checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "net_")
        tensors, dtypes = state_to_numpy(self._net_for_predict())
        cfg = self._unet_config()
        return Checkpoint(tensors, cfg.fingerprint,
                          {"estimator": type(self).__name__, "params": _jsonable(self.get_params()),
                           "architecture": cfg.architecture()},
                          list(self.history_), {"dtypes": dtypes, "best_epoch": self.best_epoch_,
                                                "seed": self.seed,
                                                "target_gain": self.target_gain_})

    def save(self, path) -> Path:
        return save_checkpoint(self.checkpoint(), path)

    @classmethod
    def from_checkpoint(cls, ckpt):
        ckpt = _as_checkpoint(ckpt)
        params = dict(ckpt.config.get("params", {}))
        valid = cls().get_params()
        est = cls(**{k: tuple(v) if isinstance(v, list) else v
                     for k, v in params.items() if k in valid})
        net = build_unet(est._unet_config())
        transfer_init(net, ckpt, est._unet_config().fingerprint)
        est.net_ = net
        est.history_ = list(ckpt.history)
        est.best_epoch_ = ckpt.metadata.get("best_epoch", -1)
        est.target_gain_ = float(ckpt.metadata.get("target_gain", 1.0))
        return est


class UNetRegressor(_ImageNetEstimator):
    """U-Net regressor from label maps to one normalized field.

    Parameters
    ----------
    depth : int
        Number of 2x2 down-sampling steps; image sides must be divisible by
        ``2 ** depth``.
    loss : {"mse", "l1"}
    validation_fraction : float
        Held-out share of the training data scored each epoch when no
        ``validation_data`` is given; the lowest validation loss selects the
        returned weights.
    init_checkpoint : Checkpoint or path, optional
        Warm start (transfer learning); the architecture must match.
    target_scaling : {"none", "p99"}
        Optional rescaling of the targets during training.  Logged losses
        stay in the original target units.
    """

    _kind = "unet"

    def __init__(self, depth=6, base_channels=64, channel_cap=512, dropout=0.0, batch_norm=True,
                 extra_stem_32=False, loss="mse", epochs=100, batch_size=4, learning_rate=1e-3,
                 beta1=0.9, beta2=0.999, validation_fraction=0.0, target_scaling="none", seed=0,
                 init_checkpoint=None, log_path=None, verbose=False):
        self.depth = depth
        self.base_channels = base_channels
        self.channel_cap = channel_cap
        self.dropout = dropout
        self.batch_norm = batch_norm
        self.extra_stem_32 = extra_stem_32
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.validation_fraction = validation_fraction
        self.target_scaling = target_scaling
        self.seed = seed
        self.init_checkpoint = init_checkpoint
        self.log_path = log_path
        self.verbose = verbose

    def _criterion(self):
        try:
            return {"mse": mse_loss, "l1": l1_loss}[self.loss]
        except KeyError:
            raise ValueError(f"unknown loss {self.loss!r}") from None

    def _build(self):
        torch.manual_seed(self.seed)
        net = build_unet(self._unet_config())
        init = _as_checkpoint(self.init_checkpoint)
        if init is not None:
            transfer_init(net, init, self._unet_config().fingerprint)
        return net

    def fit(self, X, y, validation_data=None):
        X = self._check_X(X)
        y = check_targets(y, X)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        rng = np.random.default_rng(self.seed)
        X, y, Xv, yv = self._split_validation(X, y, validation_data, rng)
        criterion = self._criterion()
        self.target_gain_ = g = self._fit_gain(y)
        # back to original units: MSE scales with g**2, L1 with g
        unit = g ** 2 if self.loss == "mse" else g
        y = y * np.float32(g)
        yv = None if yv is None else yv * np.float32(g)
        self.net_ = net = self._build()
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate,
                               betas=(self.beta1, self.beta2))
        torch.manual_seed(self.seed + 1)
        self.history_ = []
        self.best_epoch_ = -1
        best_val, best_state = np.inf, None
        xt, yt = _to_nchw(X), torch.from_numpy(y[:, None])
        for epoch in range(1, self.epochs + 1):
            net.train()
            total = 0.0
            for b, idx in enumerate(np.array_split(rng.permutation(len(X)),
                                                   max(1, int(np.ceil(len(X) / self.batch_size))))):
                idx = torch.from_numpy(idx)
                opt.zero_grad()
                loss = criterion(net(xt[idx]), yt[idx])
                self._check_finite(loss.item(), epoch, b, "training loss")
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            record = {"epoch": epoch, "train_loss": total / len(X) / unit}
            if Xv is not None:
                record["val_loss"] = self._evaluate_loss(Xv, yv, criterion) / unit
                self._check_finite(record["val_loss"], epoch, -1, "validation loss")
                if record["val_loss"] < best_val:
                    best_val = record["val_loss"]
                    best_state = copy.deepcopy(net.state_dict())
                    self.best_epoch_ = epoch
            self._log_epoch(record)
        if best_state is not None:
            net.load_state_dict(best_state)
        else:
            self.best_epoch_ = self.epochs
        net.eval()
        return self

    @torch.no_grad()
    def _evaluate_loss(self, X, y, criterion, batch_size=16):
        self.net_.eval()
        total = 0.0
        for start in range(0, len(X), batch_size):
            xb = _to_nchw(X[start:start + batch_size])
            yb = torch.from_numpy(y[start:start + batch_size, None])
            total += criterion(self.net_(xb), yb).item() * len(xb)
        return total / len(X)


class CGANRegressor(_ImageNetEstimator):
    """Conditional GAN: U-Net generator and patch discriminator.

    With ``stochastic_inference`` the generator's dropout stays active at
    prediction time and acts as the noise source; turn it off for
    reproducible outputs.
    """

    _kind = "cgan"

    def __init__(self, depth=6, base_channels=64, channel_cap=512, dropout=0.2, batch_norm=True,
                 extra_stem_32=False, lam=0.01, epochs=500, batch_size=4, learning_rate=2e-4,
                 beta1=0.5, beta2=0.999, disc_filters=(64, 128, 256, 512, 1024),
                 disc_kernel_size=4, disc_leaky_slope=0.25, disc_l1_weight=1e-4,
                 validation_fraction=0.0, stochastic_inference=True, target_scaling="none",
                 seed=0, init_checkpoint=None, log_path=None, verbose=False):
        self.depth = depth
        self.base_channels = base_channels
        self.channel_cap = channel_cap
        self.dropout = dropout
        self.batch_norm = batch_norm
        self.extra_stem_32 = extra_stem_32
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.disc_filters = disc_filters
        self.disc_kernel_size = disc_kernel_size
        self.disc_leaky_slope = disc_leaky_slope
        self.disc_l1_weight = disc_l1_weight
        self.validation_fraction = validation_fraction
        self.stochastic_inference = stochastic_inference
        self.target_scaling = target_scaling
        self.seed = seed
        self.init_checkpoint = init_checkpoint
        self.log_path = log_path
        self.verbose = verbose

    def _disc_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(tuple(self.disc_filters), self.disc_kernel_size,
                                   self.disc_leaky_slope, self.disc_l1_weight)

    def _set_inference_mode(self, net):
        net.eval()
        if self.stochastic_inference:
            for m in net.modules():
                if isinstance(m, torch.nn.Dropout):
                    m.train()

    def fit(self, X, y, validation_data=None):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        X = self._check_X(X)
        y = check_targets(y, X)
        rng = np.random.default_rng(self.seed)
        X, y, Xv, yv = self._split_validation(X, y, validation_data, rng)
        self.target_gain_ = g = self._fit_gain(y)
        y = y * np.float32(g)
        yv = None if yv is None else yv * np.float32(g)
        torch.manual_seed(self.seed)
        gen = build_unet(self._unet_config())
        init = _as_checkpoint(self.init_checkpoint)
        if init is not None:
            transfer_init(gen, init, self._unet_config().fingerprint)
        disc = build_discriminator(self._disc_config())
        opt_g = torch.optim.Adam(gen.parameters(), lr=self.learning_rate,
                                 betas=(self.beta1, self.beta2))
        opt_d = torch.optim.Adam(disc.parameters(), lr=self.learning_rate,
                                 betas=(self.beta1, self.beta2))
        torch.manual_seed(self.seed + 1)
        self.net_, self.disc_ = gen, disc
        self.history_ = []
        self.best_epoch_ = -1
        best_val, best_state = np.inf, None
        xt, yt = _to_nchw(X), torch.from_numpy(y[:, None])
        n_batches = max(1, int(np.ceil(len(X) / self.batch_size)))
        for epoch in range(1, self.epochs + 1):
            gen.train()
            disc.train()
            sums = np.zeros(3)
            for b, idx in enumerate(np.array_split(rng.permutation(len(X)), n_batches)):
                idx = torch.from_numpy(idx)
                xb, yb = xt[idx], yt[idx]
                fake = gen(xb)

                opt_d.zero_grad()
                d_loss = discriminator_loss(disc(xb, yb), disc(xb, fake.detach()))
                (d_loss + self.disc_l1_weight * disc.kernel_l1()).backward()
                opt_d.step()

                opt_g.zero_grad()
                g_total, gan, l1 = generator_loss(disc(xb, fake), fake, yb, self.lam)
                g_total.backward()
                opt_g.step()

                vals = (gan.item(), l1.item(), d_loss.item())
                for name, v in zip(("gan_loss", "l1_loss", "disc_loss"), vals):
                    self._check_finite(v, epoch, b, name)
                sums += np.array(vals) * len(idx)
            sums /= len(X)
            record = {"epoch": epoch, "gan_loss": float(sums[0]), "l1_loss": float(sums[1]) / g,
                      "disc_loss": float(sums[2])}
            if Xv is not None:
                record["val_l1"] = self._val_l1(Xv, yv) / g
                self._check_finite(record["val_l1"], epoch, -1, "validation L1")
                if record["val_l1"] < best_val:
                    best_val = record["val_l1"]
                    best_state = copy.deepcopy(gen.state_dict())
                    self.best_epoch_ = epoch
            self._log_epoch(record)
        if best_state is not None:
            gen.load_state_dict(best_state)
        else:
            self.best_epoch_ = self.epochs
        gen.eval()
        return self

    @torch.no_grad()
    def _val_l1(self, X, y, batch_size=16):
        self.net_.eval()
        total = 0.0
        for start in range(0, len(X), batch_size):
            xb = _to_nchw(X[start:start + batch_size])
            yb = torch.from_numpy(y[start:start + batch_size, None])
            total += l1_loss(self.net_(xb), yb).item() * len(xb)
        return total / len(X)

    def discriminator_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "disc_")
        tensors, dtypes = state_to_numpy(self.disc_)
        cfg = self._disc_config()
        return Checkpoint(tensors, cfg.fingerprint,
                          {"estimator": "PatchDiscriminator", "architecture": cfg.architecture()},
                          list(self.history_), {"dtypes": dtypes})


class MeanImageBaseline(BaseEstimator, RegressorMixin):
    """Predicts the pixelwise mean training target for every input."""

    def fit(self, X, y):
        X = check_images(X)
        y = check_targets(y, X)
        self.mean_image_ = y.mean(axis=0, dtype=np.float64).astype(np.float32)
        return self

    def predict(self, X):
        check_is_fitted(self, "mean_image_")
        X = check_images(X)
        return np.broadcast_to(self.mean_image_, (len(X),) + self.mean_image_.shape).copy()


def load_estimator(path):
    """Rebuild a fitted U-Net or cGAN estimator from its checkpoint file."""
    ckpt = load_checkpoint(path)
    name = ckpt.config.get("estimator", "UNetRegressor")
    cls = {"UNetRegressor": UNetRegressor, "CGANRegressor": CGANRegressor}[name]
    return cls.from_checkpoint(ckpt)

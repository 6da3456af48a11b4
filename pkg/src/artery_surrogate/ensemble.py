"""Output-averaging ensembles of U-Net or cGAN surrogates."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_is_fitted

from .surrogate.estimators import UNetRegressor, load_estimator
from .surrogate.networks import UNetConfig
from .validation import check_images

__all__ = ["STRATEGIES", "build_ensemble_variants", "ensemble_predict", "EnsembleSpec",
           "EnsembleRegressor", "load_ensemble"]

SAME_ARCH = "same-arch-dropouts"
TWO_ARCH = "two-arch-dropouts"
STRATEGIES = {SAME_ARCH: (0.2, 0.35), TWO_ARCH: (0.2, 0.3, 0.35)}


def build_ensemble_variants(strategy: str, base_config: UNetConfig | None = None) -> list[UNetConfig]:
    base = base_config or UNetConfig()
    try:
        rates = STRATEGIES[strategy]
    except KeyError:
        raise ValueError(f"unknown ensemble strategy {strategy!r}") from None
    if strategy == SAME_ARCH:
        return [replace(base, dropout=p) for p in rates]
    archs = (replace(base, extra_stem_32=False), replace(base, extra_stem_32=True))
    return [replace(a, dropout=p) for a in archs for p in rates]


def _member_predictions(models, X):
    return np.stack([np.asarray(m.predict(X), dtype=np.float32) for m in models])


def ensemble_predict(models, X) -> np.ndarray:
    """Pixelwise mean of member predictions, clipped to [0, 1]."""
    if not models:
        raise ValueError("ensemble needs at least one member")
    preds = _member_predictions(models, X)
    # float64 accumulation keeps the mean of identical float32 members exact
    mean = preds.mean(axis=0, dtype=np.float64).astype(np.float32)
    return np.clip(mean, 0.0, 1.0)


@dataclass
class EnsembleSpec:
    strategy: str
    members: list = field(default_factory=list)

    def validate(self):
        expected = len(build_ensemble_variants(self.strategy))
        if len(self.members) != expected:
            raise ValueError(f"{self.strategy} expects {expected} members, got {len(self.members)}")

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"type": "ensemble", "strategy": self.strategy,
                                    "members": [str(m) for m in self.members]}, indent=2))
        return path

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        data = json.loads(path.read_text())
        members = [m if Path(m).is_absolute() else str(path.parent / m) for m in data["members"]]
        return cls(data["strategy"], members)


class EnsembleRegressor(BaseEstimator, RegressorMixin):
    """Trains one estimator per variant with distinct seeds and averages them.

    ``base_estimator`` supplies the training settings; each member copy gets
    the variant's architecture and dropout.
    """

    def __init__(self, base_estimator=None, strategy=SAME_ARCH, seed=0):
        self.base_estimator = base_estimator
        self.strategy = strategy
        self.seed = seed

    def _variants(self):
        base = self.base_estimator if self.base_estimator is not None else UNetRegressor()
        cfg = base._unet_config()
        members = []
        for i, variant in enumerate(build_ensemble_variants(self.strategy, cfg)):
            est = clone(base)
            est.set_params(dropout=variant.dropout, extra_stem_32=variant.extra_stem_32,
                           seed=self.seed + 1000 * (i + 1))
            if base.log_path:
                log = Path(base.log_path)
                est.set_params(log_path=str(log.with_name(f"{log.stem}_member{i}{log.suffix}")))
            members.append(est)
        return members

    def fit(self, X, y, validation_data=None):
        self.estimators_ = [m.fit(X, y, validation_data=validation_data)
                            for m in self._variants()]
        return self

    def predict(self, X):
        check_is_fitted(self, "estimators_")
        return ensemble_predict(self.estimators_, check_images(X))

    def member_predictions(self, X):
        check_is_fitted(self, "estimators_")
        return _member_predictions(self.estimators_, check_images(X))

    def save(self, directory) -> Path:
        check_is_fitted(self, "estimators_")
        directory = Path(directory)
        names = []
        for i, est in enumerate(self.estimators_):
            name = f"member_{i}.ckpt"
            est.save(directory / name)
            names.append(name)
        return EnsembleSpec(self.strategy, names).to_json(directory / "ensemble.json")

    @classmethod
    def from_members(cls, members, strategy=SAME_ARCH):
        ens = cls(strategy=strategy)
        ens.estimators_ = list(members)
        return ens


def load_ensemble(path) -> EnsembleRegressor:
    spec = EnsembleSpec.from_json(path)
    return EnsembleRegressor.from_members([load_estimator(m) for m in spec.members], spec.strategy)


"""Paired label/field images, flip augmentation, splitting and on-disk datasets.

Images are indexed ``[row, col]`` with row 0 at the top (+y) and column 0 at
the left (-x).  Pixel centres are antisymmetric about the origin, so mirroring
a geometry mirrors its rendered image exactly.

Directory layout written by :func:`save_dataset`::

    manifest.json
    samples/<id>.label.f32     H x W x 3 float32 (calcium, lumen, fibrous)
    samples/<id>.stress.f32    H x W float32 in [0, 1]
    samples/<id>.strain.f32    H x W float32 in [0, 1]
    previews/<id>.<kind>.png   8-bit previews, never read back
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import GeometrySpec, TissueLabel, classify_point

__all__ = [
    "STRESS_CAP_KPA", "STRAIN_CAP", "AUGMENTATIONS",
    "FieldSample", "DatasetManifest", "FieldDataset", "DatasetError",
    "pixel_centers", "render_label_map", "render_field_map", "make_sample",
    "flip_image", "augment_flips", "split_dataset", "save_dataset", "load_dataset",
    "config_hash",
]

STRESS_CAP_KPA = 300.0
STRAIN_CAP = 0.45
AUGMENTATIONS = ("none", "h", "v", "hv")
LABEL_CHANNELS = (TissueLabel.CALCIUM, TissueLabel.LUMEN, TissueLabel.FIBROUS)


class DatasetError(RuntimeError):
    pass


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def pixel_centers(size: int, half_width: float):
    """(x, y) grids of pixel centres, each shaped (size, size)."""
    c = (2 * np.arange(size) + 1 - size) * half_width / size
    x, y = np.meshgrid(c, -c)
    return x, y


def render_label_map(spec: GeometrySpec, size: int = 256) -> np.ndarray:
    """Binary (size, size, 3) map with channels calcium, lumen, fibrous."""
    x, y = pixel_centers(size, spec.R)
    labels = classify_point(spec, x, y)
    return np.stack([(labels == c) for c in LABEL_CHANNELS], axis=-1).astype(np.float32)


def render_field_map(mesh, values, cap: float, size: int = 256) -> np.ndarray:
    """Normalize per-element values by ``cap`` and sample them at pixel centres."""
    n = mesh.grid_resolution
    lookup = np.full((n, n), -1, dtype=np.int64)
    lookup[mesh.cells[:, 0], mesh.cells[:, 1]] = np.arange(mesh.num_elements)
    k = np.arange(size)
    col_cell = ((2 * k + 1) * n) // (2 * size)
    row_cell = n - 1 - col_cell
    elem = lookup[col_cell[None, :], row_cell[:, None]]
    vals = np.clip(np.asarray(values, dtype=np.float64) / cap, 0.0, 1.0)
    out = np.where(elem >= 0, vals[np.maximum(elem, 0)], 0.0)
    return out.astype(np.float32)


def flip_image(image: np.ndarray, tag: str) -> np.ndarray:
    """Apply the flip named by ``tag`` to the two leading (row, col) axes."""
    if tag not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {tag!r}")
    out = image
    if "h" in tag:
        out = out[:, ::-1]
    if "v" in tag:
        out = out[::-1]
    return np.ascontiguousarray(out)


@dataclass
class FieldSample:
    sample_id: str
    label_map: np.ndarray
    stress_map: np.ndarray
    strain_map: np.ndarray
    caps: tuple = (STRESS_CAP_KPA, STRAIN_CAP)
    augmentation: str = "none"
    base_id: str = ""
    seed: int = -1

    def __post_init__(self):
        if not self.base_id:
            self.base_id = self.sample_id

    def validate(self) -> None:
        lm = self.label_map
        if not np.all((lm == 0) | (lm == 1)):
            raise DatasetError(f"{self.sample_id}: label channels must be 0/1")
        if np.any(lm.sum(axis=-1) > 1):
            raise DatasetError(f"{self.sample_id}: overlapping label channels")
        for name in ("stress_map", "strain_map"):
            arr = getattr(self, name)
            if np.any(arr < 0) or np.any(arr > 1):
                raise DatasetError(f"{self.sample_id}: {name} outside [0, 1]")


def make_sample(spec: GeometrySpec, mesh, solution, size: int = 256,
                caps=(STRESS_CAP_KPA, STRAIN_CAP), sample_id: str | None = None) -> FieldSample:
    sid = sample_id or f"{spec.seed:06d}"
    return FieldSample(
        sample_id=sid,
        label_map=render_label_map(spec, size),
        stress_map=render_field_map(mesh, solution.von_mises_kpa, caps[0], size),
        strain_map=render_field_map(mesh, solution.equivalent_strain, caps[1], size),
        caps=tuple(caps), base_id=sid, seed=spec.seed,
    )


def augment_flips(sample: FieldSample) -> list[FieldSample]:
    """Identity, horizontal, vertical and combined flips of one base sample."""
    out = []
    for tag in AUGMENTATIONS:
        sid = sample.base_id if tag == "none" else f"{sample.base_id}_{tag}"
        out.append(replace(sample, sample_id=sid, augmentation=tag,
                           label_map=flip_image(sample.label_map, tag),
                           stress_map=flip_image(sample.stress_map, tag),
                           strain_map=flip_image(sample.strain_map, tag)))
    return out


def split_dataset(base_ids, ratio: float = 0.85, seed: int = 0) -> dict:
    """Assign each base geometry to "train" or "test" before augmentation.

    The train count is ``ratio * n`` rounded half up.
    """
    base_ids = list(base_ids)
    if len(set(base_ids)) != len(base_ids):
        raise ValueError("base ids must be unique")
    n = len(base_ids)
    n_train = int(np.floor(ratio * n + 0.5))
    if n_train <= 0 or n_train >= n:
        raise ValueError(f"split ratio {ratio} leaves an empty split for {n} geometries")
    order = np.random.default_rng(seed).permutation(n)
    split = {}
    for rank, k in enumerate(order):
        split[base_ids[k]] = "train" if rank < n_train else "test"
    return split


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    image_size: int = 256
    caps: tuple = (STRESS_CAP_KPA, STRAIN_CAP)
    config_hash: str = ""

    def ids(self, split: str | None = None) -> list[str]:
        return [e["sample_id"] for e in self.entries if split is None or e["split"] == split]

    def to_dict(self) -> dict:
        return {"format": "artery-field-dataset", "version": 1, "image_size": self.image_size,
                "caps": list(self.caps), "config_hash": self.config_hash,
                "entries": self.entries}

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        return cls(list(data["entries"]), int(data["image_size"]), tuple(data["caps"]),
                   data.get("config_hash", ""))


@dataclass
class FieldDataset:
    """In-memory dataset; ``X`` is (N, H, W, 3), the targets are (N, H, W)."""

    manifest: DatasetManifest
    samples: list

    def subset(self, split: str) -> "FieldDataset":
        keep = set(self.manifest.ids(split))
        entries = [e for e in self.manifest.entries if e["sample_id"] in keep]
        return FieldDataset(replace(self.manifest, entries=entries),
                            [s for s in self.samples if s.sample_id in keep])

    @property
    def X(self) -> np.ndarray:
        return np.stack([s.label_map for s in self.samples])

    def target(self, kind: str) -> np.ndarray:
        attr = {"stress": "stress_map", "strain": "strain_map"}[kind]
        return np.stack([getattr(s, attr) for s in self.samples])

    def __len__(self):
        return len(self.samples)


def _write_f32(path: Path, arr) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _write_preview(path: Path, arr) -> None:
    from PIL import Image

    img = np.clip(np.asarray(arr) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def save_dataset(samples, split: dict, directory, config_hash_value: str = "",
                 previews: bool = True) -> DatasetManifest:
    """Write samples and the manifest; ``split`` maps base id -> split name."""
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    if previews:
        (directory / "previews").mkdir(exist_ok=True)
    entries = []
    size = None
    caps = None
    for s in samples:
        s.validate()
        size = s.label_map.shape[0]
        caps = s.caps
        files = {}
        for kind, arr in (("label", s.label_map), ("stress", s.stress_map), ("strain", s.strain_map)):
            rel = f"samples/{s.sample_id}.{kind}.f32"
            _write_f32(directory / rel, arr)
            files[kind] = rel
            if previews:
                _write_preview(directory / f"previews/{s.sample_id}.{kind}.png", arr)
        entries.append({"sample_id": s.sample_id, "base_id": s.base_id, "seed": s.seed,
                        "split": split[s.base_id], "augmentation": s.augmentation,
                        "files": files})
    manifest = DatasetManifest(entries, size or 0, tuple(caps or (STRESS_CAP_KPA, STRAIN_CAP)),
                               config_hash_value)
    (directory / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=1))
    return manifest


def load_dataset(directory, expected_hash: str | None = None, split: str | None = None) -> FieldDataset:
    """Read a dataset written by :func:`save_dataset`.

    A manifest hash differing from ``expected_hash`` raises a warning, not an
    error, so stale datasets can still be inspected.
    """
    directory = Path(directory)
    manifest = DatasetManifest.from_dict(json.loads((directory / "manifest.json").read_text()))
    if expected_hash is not None and manifest.config_hash != expected_hash:
        warnings.warn(f"dataset config hash {manifest.config_hash} does not match "
                      f"expected {expected_hash}", stacklevel=2)
    size = manifest.image_size
    shapes = {"label": (size, size, 3), "stress": (size, size), "strain": (size, size)}
    samples = []
    for e in manifest.entries:
        if split is not None and e["split"] != split:
            continue
        arrays = {}
        for kind, rel in e["files"].items():
            path = directory / rel
            if not path.exists():
                raise DatasetError(f"sample {e['sample_id']}: missing file {rel}")
            arrays[kind] = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(shapes[kind]).copy()
        samples.append(FieldSample(e["sample_id"], arrays["label"], arrays["stress"],
                                   arrays["strain"], manifest.caps, e["augmentation"],
                                   e["base_id"], e["seed"]))
    if split is not None:
        manifest = replace(manifest, entries=[e for e in manifest.entries if e["split"] == split])
    return FieldDataset(manifest, samples)

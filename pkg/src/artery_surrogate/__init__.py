"""Synthetic artery wall stress/strain fields and image-to-image surrogates.

The heavy pieces are in subpackages: ``fem`` (hyperelastic solver) and
``surrogate`` (torch networks and estimators).  Importing the top-level
package does not import torch.
"""
from .geometry import GeometryError, GeometryRanges, GeometrySpec, TissueLabel, sample_geometry
from .mesher import Mesh, build_grid_mesh
from .metrics import EvalReport, SsimParams, ssim
from .raster import augment_flips, render_field_map, render_label_map, split_dataset

__version__ = "0.1.0"

__all__ = ["GeometryError", "GeometryRanges", "GeometrySpec", "TissueLabel", "sample_geometry",
           "Mesh", "build_grid_mesh", "EvalReport", "SsimParams", "ssim", "augment_flips",
           "render_field_map", "render_label_map", "split_dataset"]

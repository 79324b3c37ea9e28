"""Robust per-subject intensity normalization (median/MAD, clip, rescale)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nifti import VolumeGrid

MAD_CONSISTENCY = 1.4826


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationParams:
    clip_lo: float = -3.0
    clip_hi: float = 3.0
    # 1.4826 makes MAD a consistent estimator of the normal SD; 1.0 disables
    mad_scale: float = MAD_CONSISTENCY
    mask_threshold: float = 0.0

    def __post_init__(self):
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be smaller than clip_hi")
        if not self.mad_scale > 0:
            raise ValueError("mad_scale must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class NormalizedVolume(VolumeGrid):
    """Normalized intensities in [0, 1]; voxels outside ``mask`` are zero and excluded."""

    mask: np.ndarray = None
    median: float = 0.0
    mad: float = 0.0
    degenerate_mad: bool = False


def brain_mask(volume, threshold=0.0):
    """Voxels strictly above ``threshold`` (skull-stripped inputs have zero background)."""
    data = volume.data if isinstance(volume, VolumeGrid) else np.asarray(volume)
    mask = data > threshold
    if not mask.any():
        raise EmptyMaskError("brain mask is empty (no voxel above the threshold)")
    return mask


def normalize_robust(volume, params=None):
    params = params or NormalizationParams()
    mask = brain_mask(volume, params.mask_threshold)
    x = volume.data[mask].astype(np.float64)
    med = float(np.median(x))
    mad = float(np.median(np.abs(x - med)))
    out = np.zeros(volume.shape, dtype=np.float64)
    if mad == 0.0:
        out[mask] = 0.5
        return NormalizedVolume(out, volume.affine.copy(), mask, med, mad, True)
    z = (x - med) / (params.mad_scale * mad)
    np.clip(z, params.clip_lo, params.clip_hi, out=z)
    out[mask] = (z - params.clip_lo) / (params.clip_hi - params.clip_lo)
    return NormalizedVolume(out, volume.affine.copy(), mask, med, mad, False)

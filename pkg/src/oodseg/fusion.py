"""Uncertainty heatmaps from a semantic-segmentation softmax, and fusion.

Two per-pixel uncertainty measures over a probability volume p:

    normalized entropy   -(1 / log C) * sum_y p_y log p_y      in [0, 1]
    road uncertainty     1 - p(road)                            in [0, 1]

and the fusion of a confidence map with either heatmap is their
component-wise product, again in [0, 1]. Natural log throughout; the
1/log C factor makes the base irrelevant. Terms with p below 1e-12 are
treated as exact zeros (the 0*log 0 := 0 convention) so denormal float32
inputs cannot produce -inf.
"""

from __future__ import annotations

import numpy as np

from .errors import BadClassIndex, DimensionMismatch, TooFewClasses
from .raster_io import ProbabilityVolume

ENTROPY_ZERO_EPS = 1e-12


def _volume_values(probs: ProbabilityVolume | np.ndarray) -> np.ndarray:
    if isinstance(probs, ProbabilityVolume):
        probs.validate()
        return probs.values
    arr = np.asarray(probs, dtype=np.float32)
    if arr.ndim != 3:
        raise DimensionMismatch(f"probability volume must be (H, W, C), got {arr.shape}")
    return arr


def entropy_map(probs: ProbabilityVolume | np.ndarray) -> np.ndarray:
    """Per-pixel normalized entropy of the class distribution, float32 (H, W)."""
    values = _volume_values(probs)
    num_classes = values.shape[2]
    if num_classes < 2:
        raise TooFewClasses(f"entropy needs >= 2 classes, got {num_classes}")
    p = values.astype(np.float64)
    terms = np.where(p > ENTROPY_ZERO_EPS, p * np.log(np.maximum(p, ENTROPY_ZERO_EPS)), 0.0)
    entropy = -terms.sum(axis=2) / np.log(num_classes)
    return np.clip(entropy, 0.0, 1.0).astype(np.float32)


def road_uncertainty(probs: ProbabilityVolume | np.ndarray, road_index: int) -> np.ndarray:
    """1 - p(road) per pixel, float32 (H, W)."""
    values = _volume_values(probs)
    if not 0 <= road_index < values.shape[2]:
        raise BadClassIndex(
            f"road index {road_index} out of range for {values.shape[2]} classes"
        )
    return (np.float32(1.0) - values[:, :, road_index]).astype(np.float32)


def fuse(conf: np.ndarray, unc: np.ndarray) -> np.ndarray:
    """Component-wise product of two maps; bounded by min(conf, unc) pointwise."""
    a = np.asarray(conf, dtype=np.float32)
    b = np.asarray(unc, dtype=np.float32)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cannot fuse {a.shape} with {b.shape}")
    return a * b


def argmax_prediction(probs: ProbabilityVolume | np.ndarray) -> np.ndarray:
    """Per-pixel index of the most probable class; ties go to the lowest index."""
    values = _volume_values(probs)
    return np.argmax(values, axis=2).astype(np.int32)


def resolve_road_index(volume: ProbabilityVolume, name: str = "road") -> int:
    """Look the road channel up by name in the volume's class sidecar."""
    return volume.class_index(name)

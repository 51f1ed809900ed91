"""Whole-volume prediction: sliding-window forward passes, per-voxel mean.

Windows sit on a regular stride grid per axis, with the final window clamped
to the volume edge so every voxel is covered.  Overlapping predictions are
averaged with an exact count field (float64 accumulator), so the result is
independent of window order.  Volumes smaller than the patch are padded with
the -200 HU clamp floor and cropped back.
"""

from __future__ import annotations

import numpy as np
import torch

from .network import CamUNet
from .volume_io import CtVolume, normalize_hu, HU_MIN


def _axis_starts(size: int, edge: int, stride: int):
    if size <= edge:
        return [0]
    starts = list(range(0, size - edge + 1, stride))
    if starts[-1] != size - edge:
        starts.append(size - edge)
    return starts


def sliding_windows(volume_shape, patch_edge: int = 128, stride: int = 64):
    """Centroids of an edge-cube grid covering every voxel of the shape."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    axes = []
    for size in volume_shape:
        if size <= patch_edge:
            axes.append([size // 2])  # single centered window, padding covers the rest
        else:
            axes.append([s + patch_edge // 2 for s in _axis_starts(size, patch_edge, stride)])
    return [(x, y, z) for x in axes[0] for y in axes[1] for z in axes[2]]


def predict_volume(model: CamUNet, volume: CtVolume, stride: int = 64) -> np.ndarray:
    """Mean seg probability per voxel over all windows containing it."""
    edge = model.config.patch_edge
    shape = volume.shape
    normalized = normalize_hu(volume.intensities)
    pad_value = -1.0  # normalize_hu(HU_MIN)
    acc = np.zeros(shape, dtype=np.float64)
    cnt = np.zeros(shape, dtype=np.int32)
    centroids = sliding_windows(shape, edge, stride)
    model.eval()
    with torch.no_grad():
        for c in centroids:
            start = [int(v) - edge // 2 for v in c]
            stop = [s + edge for s in start]
            patch = np.full((edge,) * 3, pad_value, dtype=np.float32)
            src = tuple(slice(max(a, 0), min(b, s)) for a, b, s in zip(start, stop, shape))
            dst = tuple(slice(sl.start - a, sl.stop - a) for sl, a in zip(src, start))
            patch[dst] = normalized[src]
            out = model(torch.from_numpy(patch).unsqueeze(0).unsqueeze(0))
            probs = out.seg_probs.squeeze(0).numpy()
            if not np.isfinite(probs).all():
                raise FloatingPointError(f"non-finite network output in window at {c}")
            acc[src] += probs[dst].astype(np.float64)
            cnt[src] += 1
    assert cnt.min() >= 1, "window grid left voxels uncovered"
    return (acc / cnt).astype(np.float32)

"""Static figures: FROC curve, GT-vs-prediction slice overlay, CAM heat-map."""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import to_rgba  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .volume_io import CtVolume  # noqa: E402

FP_LEVELS = (0.5, 1.0, 2.0, 4.0, 8.0)


def plot_froc(report: dict, out_path) -> None:
    """Sensitivity at the five FP-per-volume budgets from an eval document."""
    ys = [report[f"froc_{t:g}"] for t in FP_LEVELS]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.semilogx(FP_LEVELS, ys, "o-", base=2)
    ax.set_xlim(0.125, 8)
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks(FP_LEVELS)
    ax.set_xticklabels([f"{t:g}" for t in FP_LEVELS])
    ax.set_xlabel("false positives per volume")
    ax.set_ylabel("sensitivity")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _check_slice(volume_shape, z: int) -> None:
    if z < 0 or z >= volume_shape[2]:
        raise ValueError(f"slice index {z} out of range [0, {volume_shape[2]})")


def plot_overlay(volume: CtVolume, gt_mask, pred_mask, z: int, out_path) -> None:
    """Axial slice with GT (red) and prediction (blue) overlays; legend always drawn."""
    _check_slice(volume.shape, z)
    base = volume.intensities[:, :, z].T
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(base, cmap="gray", vmin=-200, vmax=1000, origin="lower")
    handles = []
    for mask, color, name in ((gt_mask, "red", "ground truth"),
                              (pred_mask, "blue", "prediction")):
        if mask is None:
            continue
        sl = (np.asarray(mask)[:, :, z] > 0).T
        overlay = np.zeros(sl.shape + (4,))
        overlay[sl] = to_rgba(color, alpha=0.45)
        ax.imshow(overlay, origin="lower")
        handles.append(Patch(color=color, alpha=0.45, label=name))
    ax.legend(handles=handles or [Patch(color="gray", label="CT")],
              loc="upper right")
    ax.set_title(f"{volume.volume_id} z={z}")
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def upsample_cam(activation_map, target_shape):
    """Trilinear upsample of a (w,h,d) CAM to the target spatial shape."""
    amap = torch.as_tensor(np.asarray(activation_map, dtype=np.float32))
    amap = amap.unsqueeze(0).unsqueeze(0)
    up = torch.nn.functional.interpolate(amap, size=tuple(target_shape),
                                         mode="trilinear", align_corners=False)
    return up.squeeze(0).squeeze(0).numpy()


def plot_cam(patch_intensities: np.ndarray, activation_map, z: int, out_path) -> None:
    """CAM heat-map over a patch slice; the map is upsampled to patch resolution."""
    patch = np.asarray(patch_intensities)
    _check_slice(patch.shape, z)
    cam = upsample_cam(activation_map, patch.shape)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(patch[:, :, z].T, cmap="gray", origin="lower")
    im = ax.imshow(cam[:, :, z].T, cmap="jet", alpha=0.4, origin="lower")
    fig.colorbar(im, ax=ax, label="activation")
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)

"""Probability field -> detection proposals -> final binary mask.

Fixed filter order: (1) binarize at prob_threshold, (2) drop voxels whose CT
intensity is below bone, (3) drop spine-region voxels, (4) label connected
components, (5) drop components smaller than size_threshold, (6) score each
survivor by its mean probability.  Voxel filters run before labeling so a
filtered voxel can never bridge two components.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .sampling import spine_region
from .volume_io import CtVolume


@dataclass
class PostprocessConfig:
    prob_threshold: float = 0.6
    size_threshold: int = 150        # voxels, not mm^3
    bone_hu_threshold: float = 300.0
    connectivity: int = 26
    spine_exclusion: bool = True

    def __post_init__(self):
        if not 0.0 < self.prob_threshold < 1.0:
            raise ValueError(f"prob_threshold must be in (0,1), got {self.prob_threshold}")
        if self.size_threshold < 0:
            raise ValueError("size_threshold must be >= 0")
        if self.connectivity not in (6, 18, 26):
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")


@dataclass
class DetectionProposal:
    voxels: np.ndarray   # (n, 3) int voxel coordinates
    size: int
    score: float
    volume_id: str = ""

    @property
    def centroid(self):
        return tuple(float(v) for v in self.voxels.mean(axis=0))

    @property
    def bbox(self):
        return (tuple(int(v) for v in self.voxels.min(axis=0)),
                tuple(int(v) for v in self.voxels.max(axis=0)))


_STRUCTURES = {6: 1, 18: 2, 26: 3}


def connected_components(binary_field: np.ndarray, connectivity: int = 26):
    """Label a binary field; returns (labels, list of (n,3) coordinate arrays)."""
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    binary_field = np.asarray(binary_field) > 0
    structure = ndimage.generate_binary_structure(3, _STRUCTURES[connectivity])
    labels, n = ndimage.label(binary_field, structure=structure)
    components = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        local = np.argwhere(labels[sl] == k)
        local += [s.start for s in sl]
        components.append(local)
    return labels, components


def extract_proposals(prob_field: np.ndarray, volume: CtVolume,
                      config: PostprocessConfig = None):
    """Run the full filter pipeline; volume=None skips the intensity-based
    filters (bone HU and spine exclusion) since they need CT values."""
    config = config or PostprocessConfig()
    prob_field = np.asarray(prob_field)
    vid = volume.volume_id if volume is not None else ""
    if volume is not None and volume.shape != prob_field.shape:
        raise ValueError(f"probability field {prob_field.shape} != volume {volume.shape}")
    keep = prob_field >= config.prob_threshold
    if volume is not None:
        keep &= volume.intensities >= config.bone_hu_threshold
        if config.spine_exclusion:
            keep &= ~spine_region(volume)
    _, components = connected_components(keep, config.connectivity)
    proposals = []
    for coords in components:
        if len(coords) < config.size_threshold:
            continue
        score = float(prob_field[coords[:, 0], coords[:, 1], coords[:, 2]].mean())
        proposals.append(DetectionProposal(coords, len(coords), score, vid))
    return proposals


def proposals_to_mask(proposals, shape) -> np.ndarray:
    """Union of proposal voxels as a binary uint8 field."""
    out = np.zeros(shape, dtype=np.uint8)
    total = 0
    for p in proposals:
        out[p.voxels[:, 0], p.voxels[:, 1], p.voxels[:, 2]] = 1
        total += p.size
    assert int(out.sum()) == total, "proposals overlap"
    return out


def write_proposals(proposals, path) -> None:
    with open(path, "w") as f:
        for p in proposals:
            f.write(json.dumps({
                "volume_id": p.volume_id,
                "size": p.size,
                "score": round(p.score, 6),
                "bbox": [list(b) for b in p.bbox],
                "centroid": [round(c, 2) for c in p.centroid],
            }, sort_keys=True) + "\n")

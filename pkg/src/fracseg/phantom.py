"""Synthetic chest phantoms: rib-like bone rings with implanted fractures.

Geometry is deliberately minimal — each "rib" is a torus arc of ~700 HU bone
in a 40 HU soft-tissue background, plus a vertical spine column placed where
the spine-region heuristic expects it.  A fracture is a transverse gap carved
out of a rib (interior set to -80 HU, labeled in the mask) with a displaced
bone fragment painted next to it.  Everything is a pure function of the spec,
including the noise.

Only the statistics the pipeline depends on are modeled: bone above the
300 HU threshold, defect interiors below 0 HU, mask components of controlled
count/size, and fracture centroids deep enough inside volumes of 192 or more
per axis that a 128-cube patch fits without clipping.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_io import CtVolume, FractureMask, save_raw

SOFT_TISSUE_HU = 40.0
BONE_HU = 700.0
DEFECT_HU = -80.0


@dataclass
class PhantomSpec:
    shape: tuple = (192, 192, 192)
    n_ribs: int = 4
    n_fractures: int = 2
    fracture_size_range: tuple = (180, 600)
    noise_sigma: float = 5.0
    seed: int = 0
    # lateral/AP position of the rib ring center, as a fraction of (W, H);
    # off-center rings make mirrored negative windows geometrically feasible
    ring_center_frac: tuple = (0.5, 0.5)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) != 3 or any(s < 64 for s in self.shape):
            raise ValueError(f"phantom shape must be >= 64 per axis, got {self.shape}")
        if self.n_fractures > self.n_ribs:
            raise ValueError("need at least one rib per fracture")
        lo, hi = self.fracture_size_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad fracture_size_range {self.fracture_size_range}")


def generate(spec: PhantomSpec, volume_id: str = None):
    """Returns (CtVolume, FractureMask); deterministic in spec.seed."""
    rng = np.random.default_rng(spec.seed)
    W, H, D = spec.shape
    vid = volume_id or f"phantom-{spec.seed:04d}"

    cx = spec.ring_center_frac[0] * (W - 1)
    cy = spec.ring_center_frac[1] * (H - 1)
    R = max(6.0, round(0.146 * min(W, H)))
    rt = max(2, int(round(min(W, H) / 48)))  # rib tube radius

    X = np.arange(W, dtype=np.float32)[:, None, None]
    Y = np.arange(H, dtype=np.float32)[None, :, None]
    Z = np.arange(D, dtype=np.float32)[None, None, :]
    dxy = np.sqrt((X - cx) ** 2 + (Y - cy) ** 2)  # (W,H,1)

    volume = np.full(spec.shape, SOFT_TISSUE_HU, dtype=np.float32)
    mask = np.zeros(spec.shape, dtype=np.int32)

    z_planes = np.linspace(0.36, 0.64, spec.n_ribs) * (D - 1)
    ribs = []
    for z_i in z_planes:
        rib = (dxy - R) ** 2 + (Z - z_i) ** 2 <= rt ** 2
        ribs.append(rib)
        volume[rib] = BONE_HU

    # spine column: always on the midline, posterior, so the spine-region
    # heuristic (central W band, high-H half, >=200 HU) captures it
    sx, sy = (W - 1) / 2.0, 0.75 * (H - 1)
    rs = max(3.0, round(W / 16))
    spine = (X - sx) ** 2 + (Y - sy) ** 2 <= rs ** 2
    volume[np.broadcast_to(spine, spec.shape)] = BONE_HU

    size_lo, size_hi = spec.fracture_size_range
    for k in range(spec.n_fractures):
        rib, z_i = ribs[k], z_planes[k]
        placed = False
        for attempt in range(20):
            # anterior-lateral arc positions keep defects away from the spine
            theta = rng.uniform(math.radians(-150.0), math.radians(30.0))
            px, py = cx + R * math.cos(theta), cy + R * math.sin(theta)
            tdot = (X - px) * (-math.sin(theta)) + (Y - py) * math.cos(theta)
            dist2 = (X - px) ** 2 + (Y - py) ** 2 + (Z - z_i) ** 2
            for g in range(1, 9):
                local = dist2 <= float(3 * rt + g + 2) ** 2
                gap = rib & (np.abs(tdot) <= g) & local
                size = int(np.count_nonzero(gap))
                if size_lo <= size <= size_hi:
                    break
            else:
                continue
            volume[gap] = DEFECT_HU
            mask[gap] = k + 1
            # displaced fragment: shift the adjacent rib segment a few voxels
            # along z; bone-bright but never part of the ground-truth mask
            frag = rib & (tdot > g) & (tdot <= 3 * g + 2) & \
                (dist2 <= float(3 * rt + 3 * g + 4) ** 2)
            coords = np.argwhere(frag)
            if len(coords):
                shifted = coords + np.array([0, 0, max(2, rt)])
                keep = np.all((shifted >= 0) & (shifted < spec.shape), axis=1)
                shifted = shifted[keep]
                ok = mask[shifted[:, 0], shifted[:, 1], shifted[:, 2]] == 0
                sel = shifted[ok]
                volume[sel[:, 0], sel[:, 1], sel[:, 2]] = BONE_HU
            placed = True
            break
        if not placed:
            raise ValueError(
                f"{vid}: could not carve fracture {k + 1} within size range "
                f"{spec.fracture_size_range} after bounded retries")

    if spec.noise_sigma > 0:
        volume = volume + rng.normal(0.0, spec.noise_sigma,
                                     spec.shape).astype(np.float32)

    _validate(mask, spec, vid)
    return CtVolume(volume.astype(np.float32), (1.0, 1.0, 1.0), vid), \
        FractureMask(mask, vid)


def _validate(mask, spec: PhantomSpec, vid):
    structure = ndimage.generate_binary_structure(3, 3)
    labels, n = ndimage.label(mask > 0, structure=structure)
    if n != spec.n_fractures:
        raise ValueError(f"{vid}: carved {n} mask components, wanted {spec.n_fractures}")
    lo, hi = spec.fracture_size_range
    sizes = np.bincount(labels.ravel())[1:]
    if any(s < lo or s > hi for s in sizes):
        raise ValueError(f"{vid}: component sizes {sizes.tolist()} outside "
                         f"[{lo}, {hi}]")
    if min(spec.shape) >= 192:
        for k in range(1, spec.n_fractures + 1):
            c = np.argwhere(mask == k).mean(axis=0)
            margin = min(min(c), min(np.array(spec.shape) - 1 - c))
            if margin < 64:
                raise ValueError(f"{vid}: fracture {k} centroid {c} closer than "
                                 f"64 voxels to a face")


def write_phantom_set(out_dir, count: int, spec: PhantomSpec = None):
    """Emit `count` phantom volume/mask raw-test pairs plus a pairs manifest.

    Volume k uses seed spec.seed + k.  Returns the manifest path.
    """
    spec = spec or PhantomSpec()
    os.makedirs(out_dir, exist_ok=True)
    vol_dir = os.path.join(out_dir, "volumes")
    msk_dir = os.path.join(out_dir, "masks")
    os.makedirs(vol_dir, exist_ok=True)
    os.makedirs(msk_dir, exist_ok=True)
    import json
    manifest = os.path.join(out_dir, "pairs.jsonl")
    with open(manifest, "w") as f:
        for k in range(count):
            sub = PhantomSpec(spec.shape, spec.n_ribs, spec.n_fractures,
                              spec.fracture_size_range, spec.noise_sigma,
                              spec.seed + k, spec.ring_center_frac)
            vid = f"phantom-{sub.seed:04d}"
            volume, mask = generate(sub, vid)
            vp = os.path.join(vol_dir, vid + ".rtv")
            mp = os.path.join(msk_dir, vid + ".rtv")
            save_raw(vp, volume.intensities, volume.spacing, vid, dtype="f32")
            save_raw(mp, mask.labels.astype(np.uint16), volume.spacing, vid, dtype="u16")
            f.write(json.dumps({"id": vid, "volume": vp, "mask": mp,
                                "n_fractures": sub.n_fractures}, sort_keys=True) + "\n")
    return manifest

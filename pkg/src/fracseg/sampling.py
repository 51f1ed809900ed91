"""Training patch sampling: jittered positives, three-way negatives, cache.

Positives: one 128-cube per fracture instance, centered on the instance
centroid plus a per-axis uniform integer translation in [-jitter, +jitter].

Negatives: equal in number to the positives and split as evenly as possible
across three sources — the spine region, the mirrored (left-right reflected)
positive centroids, and uniform random locations.  Every negative window must
contain zero fracture voxels; candidates violating the rule are rejected and
re-drawn up to `retries` times.  A slot whose source cannot produce a valid
window (on small volumes the mirrored window usually still contains its own
source fracture) falls back to the random source unless strict=True, and the
plan records the source actually used.

Patches are clamped to [-200, 1000] HU and rescaled onto [-1, 1]; windows
reaching past the volume border are padded with the -200 HU floor.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .volume_io import CtVolume, FractureMask, normalize_hu, save_raw, load_raw, HU_MIN

PATCH_EDGE = 128
NEGATIVE_SOURCES = ("spine", "mirror", "random")


@dataclass
class PatchSample:
    intensities: np.ndarray  # (E,E,E) float32 in [-1, 1]
    mask: np.ndarray         # (E,E,E) uint8 binary
    label: int               # 1 iff mask has any positive voxel
    centroid: tuple          # window center, source-volume voxel coords
    volume_id: str

    def __post_init__(self):
        assert (self.label == 1) == bool(self.mask.any())


@dataclass
class SamplingPlan:
    volume_id: str
    positives: list = field(default_factory=list)  # (instance_id, centroid)
    negatives: list = field(default_factory=list)  # (source, centroid)
    seed: int = 0
    patch_edge: int = PATCH_EDGE


def _window(shape, centroid, edge):
    """Start/stop of the edge-cube centered at centroid, pre-clipping."""
    start = [int(c) - edge // 2 for c in centroid]
    return start, [s + edge for s in start]


def window_mask_sum(mask_labels: np.ndarray, centroid, edge) -> int:
    start, stop = _window(mask_labels.shape, centroid, edge)
    sl = tuple(slice(max(a, 0), max(min(b, s), 0))
               for a, b, s in zip(start, stop, mask_labels.shape))
    region = mask_labels[sl]
    return int(np.count_nonzero(region))


def extract_patch(volume: CtVolume, mask: FractureMask, centroid,
                  patch_edge: int = PATCH_EDGE) -> PatchSample:
    """Cut the normalized patch window centered at `centroid` (border-padded)."""
    shape = volume.shape
    centroid = tuple(int(round(c)) for c in centroid)
    if any(c < 0 or c >= s for c, s in zip(centroid, shape)):
        raise ValueError(f"centroid {centroid} outside volume of shape {shape}")
    if mask is not None and mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} != volume shape {shape}")
    start, stop = _window(shape, centroid, patch_edge)
    x = np.full((patch_edge,) * 3, HU_MIN, dtype=np.float32)
    m = np.zeros((patch_edge,) * 3, dtype=np.uint8)
    src = tuple(slice(max(a, 0), min(b, s)) for a, b, s in zip(start, stop, shape))
    dst = tuple(slice(sl.start - a, sl.stop - a) for sl, a in zip(src, start))
    x[dst] = volume.intensities[src]
    if mask is not None:
        m[dst] = mask.labels[src] > 0
    label = int(m.any())
    return PatchSample(normalize_hu(x), m, label, centroid, volume.volume_id)


def mirror_centroid(centroid, volume_shape):
    """Reflect across the midsagittal plane (W axis), other axes unchanged."""
    W = volume_shape[0]
    x = min(max(int(round(W - 1 - centroid[0])), 0), W - 1)
    return (x, int(round(centroid[1])), int(round(centroid[2])))


def spine_region(volume: CtVolume, band_frac: float = 0.2,
                 posterior_frac: float = 0.5, hu_min: float = 200.0) -> np.ndarray:
    """Heuristic vertebral-column predicate used for sampling and exclusion.

    Central `band_frac` of the W axis, intersected with the posterior
    (high-index) `posterior_frac` of the H axis, restricted to voxels at or
    above `hu_min` HU.  Returns a boolean (W,H,D) field.
    """
    W, H, D = volume.shape
    band = max(1, int(round(band_frac * W)))
    x0 = (W - band) // 2
    y0 = H - max(1, int(round(posterior_frac * H)))
    pred = np.zeros(volume.shape, dtype=bool)
    pred[x0:x0 + band, y0:, :] = True
    return pred & (volume.intensities >= hu_min)


def _instance_centroids(mask: FractureMask) -> dict:
    out = {}
    for k in range(1, mask.num_instances + 1):
        coords = np.argwhere(mask.labels == k)
        if len(coords):
            out[k] = coords.mean(axis=0)
    return out


def plan_samples(volume: CtVolume, mask: FractureMask, jitter: int = 16,
                 seed: int = 0, patch_edge: int = PATCH_EDGE,
                 retries: int = 100, strict: bool = False) -> SamplingPlan:
    """Pure function of (volume, mask, jitter, seed) -> balanced patch plan."""
    if jitter < 0 or jitter >= patch_edge // 2:
        raise ValueError(f"jitter must be in [0, {patch_edge // 2}), got {jitter}")
    if mask.shape != volume.shape:
        raise ValueError(f"mask shape {mask.shape} != volume shape {volume.shape}")
    centroids = _instance_centroids(mask)
    if not centroids:
        raise ValueError(f"{volume.volume_id}: no fracture instances to sample positives from")
    rng = np.random.default_rng(seed)
    shape = volume.shape
    plan = SamplingPlan(volume.volume_id, seed=seed, patch_edge=patch_edge)

    def clip(c):
        return tuple(int(min(max(v, 0), s - 1)) for v, s in zip(c, shape))

    for k in sorted(centroids):
        c = np.round(centroids[k]).astype(int)
        c = c + rng.integers(-jitter, jitter + 1, size=3)
        plan.positives.append((k, clip(c)))

    n_neg = len(plan.positives)
    base, rem = divmod(n_neg, 3)
    quota = {src: base + (1 if i < rem else 0)
             for i, src in enumerate(NEGATIVE_SOURCES)}
    spine_coords = np.argwhere(spine_region(volume))
    pos_order = sorted(centroids)

    def candidate(source, slot):
        if source == "spine":
            if len(spine_coords) == 0:
                return None
            return tuple(spine_coords[rng.integers(len(spine_coords))])
        if source == "mirror":
            k = pos_order[slot % len(pos_order)]
            m = mirror_centroid(np.round(centroids[k]).astype(int), shape)
            j = rng.integers(-jitter, jitter + 1, size=3) if jitter else np.zeros(3, int)
            return clip(np.asarray(m) + j)
        return tuple(int(rng.integers(s)) for s in shape)

    for source in NEGATIVE_SOURCES:
        for slot in range(quota[source]):
            placed = False
            for attempt in range(retries):
                c = candidate(source, slot)
                if c is not None and window_mask_sum(mask.labels, c, patch_edge) == 0:
                    plan.negatives.append((source, c))
                    placed = True
                    break
            if placed:
                continue
            if strict or source == "random":
                raise ValueError(
                    f"{volume.volume_id}: no valid {source!r} negative window after "
                    f"{retries} candidates")
            # source cannot satisfy the zero-positive-voxel rule here; take a
            # random window instead and record that
            for attempt in range(retries):
                c = candidate("random", slot)
                if window_mask_sum(mask.labels, c, patch_edge) == 0:
                    plan.negatives.append(("random", c))
                    placed = True
                    break
            if not placed:
                raise ValueError(
                    f"{volume.volume_id}: no valid negative window after {retries} candidates")
    return plan


# ---------------------------------------------------------------------------
# on-disk patch cache

def build_cache(plans, out_dir, volumes) -> str:
    """Extract every planned patch into out_dir; returns the manifest path.

    `volumes` maps volume_id -> (CtVolume, FractureMask).  Patches are stored
    as raw-test pairs (f32 normalized intensities, u8 mask); the manifest is
    one JSON record per line.  Same plans + same volumes => byte-identical
    cache.
    """
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for plan in plans:
        if plan.volume_id not in volumes:
            raise ValueError(f"plan references missing volume {plan.volume_id!r}")
        volume, mask = volumes[plan.volume_id]
        entries = [("pos", k, c) for k, c in plan.positives]
        entries += [(src, None, c) for src, c in plan.negatives]
        for i, (source, instance, centroid) in enumerate(entries):
            patch = extract_patch(volume, mask, centroid, plan.patch_edge)
            stem = f"{plan.volume_id}_{i:04d}_{'pos' if source == 'pos' else 'neg'}"
            save_raw(os.path.join(out_dir, stem + ".rtv"), patch.intensities,
                     volume_id=stem, dtype="f32")
            save_raw(os.path.join(out_dir, stem + "_mask.rtv"), patch.mask,
                     volume_id=stem, dtype="u8")
            records.append({
                "id": stem,
                "label": patch.label,
                "path": stem + ".rtv",
                "mask_path": stem + "_mask.rtv",
                "volume_id": plan.volume_id,
                "centroid": [int(c) for c in patch.centroid],
                "source": source,
                "instance": instance,
            })
    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def read_manifest(path):
    with open(path) as f:
        records = [json.loads(line) for line in f if line.strip()]
    if not records:
        raise ValueError(f"{path}: empty manifest")
    return records


def load_cached_patch(manifest_path, record):
    """Returns (intensities float32, mask uint8) for one manifest record."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    x, _, _ = load_raw(os.path.join(base, record["path"]))
    m, _, _ = load_raw(os.path.join(base, record["mask_path"]))
    return x.astype(np.float32), m.astype(np.uint8)


def manifest_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()

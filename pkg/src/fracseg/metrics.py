"""Detection and segmentation metrics: FROC over volumes, per-volume DSC.

A proposal is a hit iff it shares at least one voxel with some ground-truth
instance (lenient any-overlap rule; an IoU-threshold alternative is exposed
via `min_iou`).  FROC sweeps every distinct proposal score; the sensitivity
at each target FP-per-volume budget is the highest sensitivity reached at or
under that budget (step convention, no interpolation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FP_TARGETS = (0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass
class ProposalMatch:
    volume_id: str
    score: float
    hit: bool
    instances: tuple   # (volume_id, instance_id) pairs this proposal overlaps


@dataclass
class MatchResult:
    proposals: list            # ProposalMatch, all volumes pooled
    num_volumes: int
    num_instances: int
    instance_ids: tuple = ()   # all (volume_id, instance_id) pairs


@dataclass
class FrocResult:
    operating_points: list     # (fp_per_volume, sensitivity), fp ascending
    sensitivities_at: dict     # target fp rate -> sensitivity
    average: float


def match_proposals(proposals_per_volume: dict, gt_masks: dict,
                    min_iou: float = 0.0) -> MatchResult:
    """Match per-volume proposal lists against instance masks.

    proposals_per_volume: volume_id -> list of DetectionProposal
    gt_masks: volume_id -> FractureMask (every volume evaluated, with or
    without proposals).
    """
    matches = []
    instance_ids = []
    for vid, mask in sorted(gt_masks.items()):
        labels = mask.labels
        instance_ids += [(vid, k) for k in range(1, mask.num_instances + 1)]
        for prop in proposals_per_volume.get(vid, []):
            v = prop.voxels
            if v.size and (v.max(axis=0) >= labels.shape).any():
                raise ValueError(f"{vid}: proposal voxels outside mask shape")
            overlapped = labels[v[:, 0], v[:, 1], v[:, 2]]
            hits = []
            for k in np.unique(overlapped):
                if k == 0:
                    continue
                if min_iou > 0.0:
                    inter = int((overlapped == k).sum())
                    union = prop.size + int((labels == k).sum()) - inter
                    if inter / union < min_iou:
                        continue
                hits.append((vid, int(k)))
            matches.append(ProposalMatch(vid, float(prop.score), bool(hits), tuple(hits)))
    return MatchResult(matches, len(gt_masks), len(instance_ids), tuple(instance_ids))


def froc(result: MatchResult, fp_targets=FP_TARGETS) -> FrocResult:
    """Sweep distinct scores; sensitivity = detected instances / M,
    FP rate = surviving non-hit proposals / V."""
    if result.num_instances == 0:
        raise ValueError("no ground-truth instances; sensitivity undefined")
    if result.num_volumes < 1:
        raise ValueError("need at least one volume")
    M, V = result.num_instances, result.num_volumes
    points = [(0.0, 0.0)]  # threshold above every score: nothing survives
    for t in sorted({p.score for p in result.proposals}, reverse=True):
        surviving = [p for p in result.proposals if p.score >= t]
        detected = {inst for p in surviving for inst in p.instances}
        fps = sum(1 for p in surviving if not p.hit)
        points.append((fps / V, len(detected) / M))
    sens_at = {}
    for target in fp_targets:
        ok = [s for f, s in points if f <= target]
        sens_at[target] = max(ok) if ok else 0.0
    points = sorted(set(points))
    return FrocResult(points, sens_at, float(np.mean(list(sens_at.values()))))


def dsc_volume(prediction: np.ndarray, gt: np.ndarray, eps: float = 1e-5) -> float:
    """(2|s∩g| + eps) / (|s| + |g| + eps) on binary fields."""
    prediction = np.asarray(prediction) > 0
    gt = np.asarray(gt) > 0
    if prediction.shape != gt.shape:
        raise ValueError(f"shape mismatch {prediction.shape} vs {gt.shape}")
    inter = float(np.logical_and(prediction, gt).sum())
    return (2.0 * inter + eps) / (float(prediction.sum()) + float(gt.sum()) + eps)


def report(dsc_list, froc_result: FrocResult) -> dict:
    """Evaluation document; dsc_std uses the population convention."""
    if len(dsc_list) == 0:
        raise ValueError("empty DSC list")
    dsc = np.asarray(dsc_list, dtype=np.float64)
    doc = {
        "dsc_mean": float(dsc.mean()),
        "dsc_std": float(dsc.std()),  # ddof=0
        "n_volumes": int(len(dsc)),
    }
    for target in sorted(froc_result.sensitivities_at):
        key = f"froc_{target:g}"
        doc[key] = float(froc_result.sensitivities_at[target])
    doc["froc_avg"] = float(froc_result.average)
    return doc


def format_report(doc: dict) -> str:
    order = ["dsc_mean", "dsc_std", "froc_0.5", "froc_1", "froc_2",
             "froc_4", "froc_8", "froc_avg"]
    lines = ["metric      value", "-----------------"]
    for key in order:
        if key in doc:
            lines.append(f"{key:<11s} {doc[key]:.4f}")
    return "\n".join(lines)

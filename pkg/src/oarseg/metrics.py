"""Segmentation metrics: Dice, 95th-percentile Hausdorff distance, aggregation.

Undefined scores are carried as NaN: Dice is undefined when both masks are empty,
HD95 when either is (the convention used for absent predictions in evaluation
tables). Aggregation excludes NaNs and reports how many entries were dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

_CONN6 = ndimage.generate_binary_structure(3, 1)


def dice(a, b) -> float:
    """2|a n b| / (|a| + |b|); NaN when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return float("nan")
    return 2.0 * int((a & b).sum()) / (na + nb)


def surface_voxels(mask) -> np.ndarray:
    """Indices (N,3) of foreground voxels with a 6-neighbor background voxel.

    The volume edge counts as background, so a blob touching the edge still has
    surface there.
    """
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_CONN6, border_value=0)
    return np.argwhere(mask & ~interior)


def hd95(a, b, spacing, pooled: bool = True) -> float:
    """95th percentile of symmetric surface-to-surface distances, mm.

    pooled=True takes the percentile of both directions' distances pooled into
    one multiset; pooled=False takes the max of the two directional percentiles.
    NaN when either mask is empty.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if not a.any() or not b.any():
        return float("nan")
    spacing = np.asarray(spacing, dtype=np.float64)
    sa = surface_voxels(a) * spacing
    sb = surface_voxels(b) * spacing
    d_ab = cKDTree(sb).query(sa, k=1)[0]
    d_ba = cKDTree(sa).query(sb, k=1)[0]
    if pooled:
        return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


@dataclass(frozen=True)
class OrganScore:
    organ: int
    dice: float  # NaN = undefined
    hd95: float  # NaN = undefined


@dataclass(frozen=True)
class AggregateReport:
    """Two-stage evaluation summary: per-organ across cases, then across organs."""

    per_organ: dict  # organ -> dict(dice_mean, dice_std, hd95_mean, hd95_std, n_dice, n_hd95)
    overall_dice_mean: float
    overall_dice_std: float
    overall_hd95_mean: float
    overall_hd95_std: float
    excluded_organs: tuple = field(default_factory=tuple)


def _mean_std(values):
    arr = np.array(values, dtype=np.float64)
    ok = arr[~np.isnan(arr)]
    if ok.size == 0:
        return float("nan"), float("nan"), 0
    return float(ok.mean()), float(ok.std()), int(ok.size)


def aggregate(cases, organ_subset=None) -> AggregateReport:
    """Unweighted two-stage mean over a list of per-case {organ: OrganScore} dicts.

    First each organ is averaged across the cases where it is defined, then the
    per-organ means are averaged across organs. organ_subset restricts which
    organ ids enter the report (e.g. the in-FOV organs for MRI-only evaluation);
    organs whose scores are all undefined are excluded and listed.
    """
    organs = sorted({o for case in cases for o in case})
    if organ_subset is not None:
        subset = set(organ_subset)
        organs = [o for o in organs if o in subset]
    per_organ = {}
    excluded = []
    for organ in organs:
        dvals = [case[organ].dice for case in cases if organ in case]
        hvals = [case[organ].hd95 for case in cases if organ in case]
        dm, ds, nd = _mean_std(dvals)
        hm, hs, nh = _mean_std(hvals)
        if nd == 0 and nh == 0:
            excluded.append(organ)
            continue
        per_organ[organ] = {
            "dice_mean": dm, "dice_std": ds, "n_dice": nd,
            "hd95_mean": hm, "hd95_std": hs, "n_hd95": nh,
        }
    dm_all, ds_all, _ = _mean_std([v["dice_mean"] for v in per_organ.values()])
    hm_all, hs_all, _ = _mean_std([v["hd95_mean"] for v in per_organ.values()])
    return AggregateReport(per_organ, dm_all, ds_all, hm_all, hs_all, tuple(excluded))


def score_case(pred_labels, true_labels, spacing, organ_ids) -> dict:
    """Per-organ OrganScores for one case of integer label volumes."""
    out = {}
    for organ in organ_ids:
        a = pred_labels == organ
        b = true_labels == organ
        out[organ] = OrganScore(organ, dice(a, b), hd95(a, b, spacing))
    return out

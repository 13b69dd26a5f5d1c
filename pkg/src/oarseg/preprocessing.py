"""Cropping, tissue-window standardization, bilateral label merging, channel stacking.

The network consumes three channels built here: a soft-tissue CT view clamped to
[-500, 500] HU, a bone CT view clamped to [0, 3000] HU, and a masked z-scored MRI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyBody, GridMismatch, NoLabels, NoVoxelsInRange
from .volume import BBox3, LabelVolume, Volume3

SOFT_WINDOW_HU = (-500.0, 500.0)
BONE_WINDOW_HU = (0.0, 3000.0)
AIR_THRESHOLD_HU = -300.0
CROP_MARGIN_MM = 20.0
STD_FLOOR = 1e-6

# Voxels sharing a face (6-connectivity)
_CONN6 = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class WindowSpec:
    """Intensity window plus the dataset statistics used for z-scoring inside it."""

    lo: float
    hi: float
    mean: float
    std: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"window lo {self.lo} must be < hi {self.hi}")
        if not self.std > 0:
            raise ValueError(f"window std must be positive, got {self.std}")


# ---------------------------------------------------------------------------
# Organ table: 30 raw structures, 8 left/right pairs merged down to 22
# ---------------------------------------------------------------------------

UNILATERAL_ORGANS = {
    1: "brainstem",
    2: "spinal_cord",
    3: "mandible",
    4: "esophagus",
    5: "larynx_glottic",
    6: "larynx_supraglottic",
    7: "oral_cavity",
    8: "thyroid",
    9: "trachea",
    10: "pituitary",
    11: "optic_chiasm",
    12: "lips",
    13: "constrictor_muscle",
    14: "arytenoid",
}

# (left raw id, right raw id, merged id, name)
BILATERAL_PAIRS = [
    (15, 16, 15, "eyeball_anterior"),
    (17, 18, 16, "eyeball_posterior"),
    (19, 20, 17, "cochlea"),
    (21, 22, 18, "parotid"),
    (23, 24, 19, "optic_nerve"),
    (25, 26, 20, "submandibular"),
    (27, 28, 21, "lacrimal"),
    (29, 30, 22, "carotid"),
]


@dataclass(frozen=True)
class BilateralMap:
    """Raw (30-structure) to merged (22-structure) label correspondence."""

    pairs: tuple  # of (left, right, merged)
    passthrough: tuple  # of (raw, merged)

    def __post_init__(self):
        raw = [l for l, _, _ in self.pairs] + [r for _, r, _ in self.pairs]
        raw += [r for r, _ in self.passthrough]
        merged = [m for _, _, m in self.pairs] + [m for _, m in self.passthrough]
        n_raw = len(raw)
        if sorted(raw) != list(range(1, n_raw + 1)):
            raise ValueError("pair and passthrough raw ids must cover 1..N exactly once")
        if sorted(merged) != list(range(1, len(merged) + 1)):
            raise ValueError("merged ids must cover 1..M exactly once")

    @property
    def n_raw(self) -> int:
        return 2 * len(self.pairs) + len(self.passthrough)

    @property
    def n_merged(self) -> int:
        return len(self.pairs) + len(self.passthrough)

    def raw_to_merged_lut(self) -> np.ndarray:
        lut = np.zeros(self.n_raw + 1, dtype=np.uint16)
        for l, r, m in self.pairs:
            lut[l] = m
            lut[r] = m
        for raw, m in self.passthrough:
            lut[raw] = m
        return lut

    def merged_pair_ids(self) -> dict:
        """merged id -> (left raw id, right raw id) for the bilateral organs."""
        return {m: (l, r) for l, r, m in self.pairs}

    def merged_to_raw_unilateral(self) -> dict:
        return {m: raw for raw, m in self.passthrough}


DEFAULT_BILATERAL_MAP = BilateralMap(
    pairs=tuple((l, r, m) for l, r, m, _ in BILATERAL_PAIRS),
    passthrough=tuple((i, i) for i in UNILATERAL_ORGANS),
)

MERGED_ORGAN_NAMES = {**UNILATERAL_ORGANS, **{m: name for _, _, m, name in BILATERAL_PAIRS}}
RAW_ORGAN_NAMES = dict(UNILATERAL_ORGANS)
for _l, _r, _m, _name in BILATERAL_PAIRS:
    RAW_ORGAN_NAMES[_l] = _name + "_left"
    RAW_ORGAN_NAMES[_r] = _name + "_right"


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------


def body_bbox(ct: Volume3, air_threshold: float = AIR_THRESHOLD_HU) -> BBox3:
    """Tightest voxel box around the largest 6-connected above-threshold component."""
    mask = ct.data > air_threshold
    if not mask.any():
        raise EmptyBody(f"no voxel exceeds {air_threshold} HU")
    comps, n = ndimage.label(mask, structure=_CONN6)
    sizes = np.bincount(comps.ravel())
    sizes[0] = 0
    body = comps == sizes.argmax()
    idx = np.nonzero(body)
    lo = tuple(int(a.min()) for a in idx)
    hi = tuple(int(a.max()) + 1 for a in idx)
    return BBox3(lo, hi)


def oar_extent_bbox(dataset, margin_mm: float = CROP_MARGIN_MM):
    """Per-axis [min, max] mm from origin over all labeled voxels, widened by margin.

    Returns (lo_mm, hi_mm) arrays of shape (3,). Bounds may be negative after the
    margin is applied; apply_crop clamps them to the actual volume.
    """
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for lab in dataset:
        idx = np.nonzero(lab.labels)
        if len(idx[0]) == 0:
            continue
        for a in range(3):
            mm = idx[a] * lab.spacing[a]
            lo[a] = min(lo[a], mm.min())
            hi[a] = max(hi[a], mm.max())
    if not np.all(np.isfinite(lo)):
        raise NoLabels("no labeled voxel in the dataset")
    return lo - margin_mm, hi + margin_mm


def _crop_box_from_bounds(vol, lo_mm, hi_mm) -> BBox3:
    lo_mm = np.asarray(lo_mm, dtype=np.float64)
    hi_mm = np.asarray(hi_mm, dtype=np.float64)
    lo_idx = np.ceil(lo_mm / vol.spacing - 1e-9).astype(int)
    hi_idx = np.floor(hi_mm / vol.spacing + 1e-9).astype(int) + 1
    return BBox3(tuple(lo_idx), tuple(np.maximum(hi_idx, lo_idx))).clip(vol.dims)


def crop_to_bbox(vol, box: BBox3):
    """Crop to a voxel box; origin moves so surviving voxels keep physical positions."""
    box = box.clip(vol.dims)
    sl = tuple(slice(l, h) for l, h in zip(box.lo, box.hi))
    new_origin = vol.index_to_physical([list(box.lo)])[0]
    if isinstance(vol, LabelVolume):
        return LabelVolume(vol.labels[sl], vol.spacing, new_origin, vol.direction)
    return Volume3(vol.data[sl], vol.spacing, new_origin, vol.direction)


def apply_crop(vol, bounds):
    """Crop by per-axis mm bounds (lo_mm, hi_mm) from origin, clamped to the volume."""
    lo_mm, hi_mm = bounds
    return crop_to_bbox(vol, _crop_box_from_bounds(vol, lo_mm, hi_mm))


# ---------------------------------------------------------------------------
# Intensity standardization
# ---------------------------------------------------------------------------


def dataset_window_stats(volumes, lo: float, hi: float):
    """Pooled (mean, population std) over voxels v with lo <= v <= hi, all volumes."""
    total = 0.0
    total_sq = 0.0
    count = 0
    for vol in volumes:
        d = vol.data
        sel = d[(d >= lo) & (d <= hi)].astype(np.float64)
        total += sel.sum()
        total_sq += np.square(sel).sum()
        count += sel.size
    if count == 0:
        raise NoVoxelsInRange(f"no voxel in [{lo}, {hi}] across the dataset")
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    return mean, max(float(np.sqrt(var)), STD_FLOOR)


def make_window(volumes, lo: float, hi: float) -> WindowSpec:
    mean, std = dataset_window_stats(volumes, lo, hi)
    return WindowSpec(lo, hi, mean, std)


def window_standardize(vol: Volume3, w: WindowSpec) -> Volume3:
    """Clamp to [w.lo, w.hi] then z-score with the window's dataset statistics."""
    data = (np.clip(vol.data, w.lo, w.hi) - w.mean) / w.std
    return Volume3(data.astype(np.float32), vol.spacing, vol.origin, vol.direction)


def mri_standardize(mri: Volume3, ct: Volume3, soft: WindowSpec) -> Volume3:
    """Z-score the MRI using stats from voxels that are soft tissue on CT and in-FOV.

    The FOV mask is `mri != 0`: outside-FOV voxels are exactly zero by the resampling
    fill convention. Those voxels are standardized with the in-FOV stats but never
    contribute to them.
    """
    if not mri.same_grid(ct):
        raise GridMismatch("mri and ct must share one grid")
    mask = (ct.data >= soft.lo) & (ct.data <= soft.hi) & (mri.data != 0)
    sel = mri.data[mask].astype(np.float64)
    if sel.size == 0:
        raise NoVoxelsInRange("no in-FOV MRI voxel over soft-tissue CT")
    mean = sel.mean()
    std = max(float(sel.std()), STD_FLOOR)
    data = ((mri.data - mean) / std).astype(np.float32)
    return Volume3(data, mri.spacing, mri.origin, mri.direction)


# ---------------------------------------------------------------------------
# Labels and channels
# ---------------------------------------------------------------------------


def merge_bilateral(labels: LabelVolume, bmap: BilateralMap = DEFAULT_BILATERAL_MAP) -> LabelVolume:
    """Map left/right organ pairs to single ids; unilateral organs pass through."""
    lut = bmap.raw_to_merged_lut()
    labels.check_range(bmap.n_raw)
    merged = lut[labels.labels]
    return LabelVolume(merged, labels.spacing, labels.origin, labels.direction)


def stack_channels(ct_soft: Volume3, ct_bone: Volume3, mri: Volume3) -> np.ndarray:
    """Fixed channel order [CT-soft, CT-bone, MRI] as a (3, X, Y, Z) float32 array."""
    if not (ct_soft.same_grid(ct_bone) and ct_soft.same_grid(mri)):
        raise GridMismatch("channels must share one grid")
    return np.stack([ct_soft.data, ct_bone.data, mri.data]).astype(np.float32)

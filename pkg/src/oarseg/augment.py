"""Training-time augmentations: modality dropout, sagittal mirroring, elastic
deformation, and foreground-biased patch sampling.

Every operation is pure given an explicit numpy Generator: same state in, same
sample out. Parallel data loaders should derive one independent stream per
sample with `sample_rng(global_seed, sample_index)` instead of sharing a
generator across workers.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import GridMismatch, ShapeError
from .transforms import BSplineField
from .volume import (
    GridGeometry,
    LabelVolume,
    Volume3,
    flip_axis,
    resample,
    resample_labels,
)

N_LABELS = 23  # background + 22 merged organ classes


@dataclass(frozen=True)
class TrainingSample:
    """One network example: stacked input channels plus a merged-label target.

    `input` is (3, X, Y, Z) float32 in the stack_channels order
    [CT-soft, CT-bone, MRI]; `target` carries the grid geometry.
    """

    input: np.ndarray
    target: LabelVolume

    def __post_init__(self):
        x = np.ascontiguousarray(self.input, dtype=np.float32)
        if x.ndim != 4 or x.shape[0] != 3:
            raise ShapeError(f"input must be (3, X, Y, Z), got {x.shape}")
        if x.shape[1:] != self.target.labels.shape:
            raise GridMismatch(
                f"input {x.shape[1:]} and target {self.target.labels.shape} differ")
        if int(self.target.labels.max(initial=0)) >= N_LABELS:
            raise ValueError("target labels must be merged ids in {0..22}")
        object.__setattr__(self, "input", x)


class DropoutScenario(Enum):
    CT_ONLY = "ct_only"
    MRI_ONLY = "mri_only"
    BOTH = "both"


_SCENARIOS = (DropoutScenario.CT_ONLY, DropoutScenario.MRI_ONLY, DropoutScenario.BOTH)


def draw_scenario(rng) -> DropoutScenario:
    """One of the three modality scenarios, equal probability."""
    return _SCENARIOS[int(rng.integers(3))]


def modality_dropout(sample: TrainingSample, rng,
                     scenario: DropoutScenario = None) -> TrainingSample:
    """Zero all channels of one randomly dropped modality.

    CT_ONLY keeps the two CT channels and zeroes MRI (channel 2); MRI_ONLY
    zeroes both CT channels (0 and 1); BOTH leaves the input unchanged. The
    target is never modified. Pass `scenario` to bypass the draw.
    """
    if scenario is None:
        scenario = draw_scenario(rng)
    x = sample.input.copy()
    if scenario is DropoutScenario.CT_ONLY:
        x[2] = 0.0
    elif scenario is DropoutScenario.MRI_ONLY:
        x[0] = 0.0
        x[1] = 0.0
    return TrainingSample(x, sample.target)


def sagittal_mirror(sample: TrainingSample, rng, p: float = 0.5) -> TrainingSample:
    """Flip input and target along axis 0 with probability p.

    Axis 0 is left-right. Targets carry merged (side-symmetric) labels, so no
    label swapping is needed.
    """
    if rng.random() >= p:
        return sample
    x = np.ascontiguousarray(sample.input[:, ::-1])
    return TrainingSample(x, flip_axis(sample.target, 0))


def _draw_field(target: LabelVolume, rng, grid_cells, max_amp_mm) -> BSplineField:
    extent = (np.array(target.dims, dtype=np.float64) - 1.0) * target.spacing
    fld = BSplineField(tuple(grid_cells), target.origin.copy(),
                       target.direction.copy(), np.maximum(extent, 1e-6))
    coeffs = rng.uniform(-max_amp_mm, max_amp_mm, size=fld.coeffs.shape)
    return fld.with_coeffs(coeffs)


def elastic_deform(sample: TrainingSample, rng, grid_cells=(5, 5, 5),
                   max_amp_mm: float = 4.0) -> TrainingSample:
    """Warp by a random B-spline displacement field.

    Control-point coefficients are uniform in +-max_amp_mm. Channels are
    interpolated linearly, the target nearest-neighbor, so warped labels are
    always a subset of the input's.
    """
    fld = _draw_field(sample.target, rng, grid_cells, max_amp_mm)
    geom = GridGeometry.of(sample.target)
    chans = [
        resample(Volume3(c, sample.target.spacing, sample.target.origin,
                         sample.target.direction), fld, geom,
                 interp="linear", fill=0.0).data
        for c in sample.input
    ]
    return TrainingSample(np.stack(chans), resample_labels(sample.target, fld, geom))


def sample_patch(sample: TrainingSample, patch_dims, fg_bias: float = 0.5,
                 rng=None) -> TrainingSample:
    """Crop a patch, biased toward foreground.

    With probability fg_bias the patch is centered on a uniformly chosen
    foreground voxel, otherwise on a uniform voxel; patches that would cross a
    border are shifted inward, so the output always has exactly patch_dims.
    """
    dims = np.array(sample.target.dims, dtype=np.int64)
    pd = np.array(patch_dims, dtype=np.int64)
    if pd.shape != (3,) or np.any(pd < 1) or np.any(pd > dims):
        raise ShapeError(f"patch {tuple(patch_dims)} does not fit in {tuple(dims)}")
    fg = np.argwhere(sample.target.labels > 0)
    if len(fg) > 0 and rng.random() < fg_bias:
        center = fg[int(rng.integers(len(fg)))]
    else:
        center = rng.integers(0, dims)
    start = np.clip(center - pd // 2, 0, dims - pd)
    sl = tuple(slice(int(s), int(s + p)) for s, p in zip(start, pd))
    x = np.ascontiguousarray(sample.input[(slice(None),) + sl])
    lab = np.ascontiguousarray(sample.target.labels[sl])
    origin = sample.target.origin + (start * sample.target.spacing) @ sample.target.direction.T
    target = LabelVolume(lab, sample.target.spacing, origin, sample.target.direction)
    return TrainingSample(x, target)


@dataclass(frozen=True)
class AugmentConfig:
    elastic_max_amp_mm: float = 4.0
    elastic_grid: tuple = (5, 5, 5)
    mirror_p: float = 0.5
    patch_dims: tuple = None  # None trains on whole volumes
    fg_bias: float = 0.5


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-sample stream so worker order cannot change draws."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def augment_sample(sample: TrainingSample, rng,
                   cfg: AugmentConfig = None) -> TrainingSample:
    """Full pipeline: patch, then elastic -> mirror -> dropout.

    Dropout runs last so dropped channels are exactly zero by construction,
    not by an argument about what interpolation does to a zero channel.
    """
    cfg = cfg if cfg is not None else AugmentConfig()
    s = sample
    if cfg.patch_dims is not None:
        s = sample_patch(s, cfg.patch_dims, cfg.fg_bias, rng)
    s = elastic_deform(s, rng, cfg.elastic_grid, cfg.elastic_max_amp_mm)
    s = sagittal_mirror(s, rng, cfg.mirror_p)
    return modality_dropout(s, rng)

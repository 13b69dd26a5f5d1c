"""CT/MRI registration: Mattes mutual information, dual-initialized affine search,
B-spline refinement under bound constraints, and complete-MI arbitration.

The metric samples a fixed set of CT-grid points per resolution level (seeded),
evaluates the moving volume through the current transform with the linear
interpolator, and estimates MI from a joint histogram: a box kernel on fixed
intensities and a cubic B-spline Parzen window on moving intensities. Histogram
edges come from the sampled intensities and are frozen for the level so the
objective stays consistent across iterations.

Sign conventions: optimizers minimize the NEGATIVE MI; `complete_mi` (every
voxel, 100 bins, no smoothing) is reported as positive MI, higher is better.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import RegistrationFailed, TooFewSamples
from .optim import lbfgsb_minimize, linesearch_gd_minimize
from .transforms import (
    LINEAR_SCALE,
    AffineParams,
    BSplineField,
    ComposedTransform,
    RigidParams,
    euler_matrix,
)
from .volume import (
    GridGeometry,
    Volume3,
    gaussian_downsample,
    resample,
    trilinear_sample,
    trilinear_sample_with_gradient,
)

_TINY = 1e-12


@dataclass(frozen=True)
class RegistrationConfig:
    bins: int = 50
    sample_fraction: float = 0.01
    seed: int = 0
    lr: float = 5.0
    lr_upper: float = 5.0
    stop_window: int = 10
    stop_eps: float = 1e-4
    mi_quality_threshold: float = -0.35
    complete_bins: int = 100
    bspline_bounds: float = 5.0
    bspline_iters_per_level: int = 20
    pyramid_levels: int = 3
    affine_iters_per_level: int = 100
    bspline_mesh: tuple = (5, 5, 5)
    dof: str = "affine"  # "affine" (12) or "rigid" (6)
    min_valid_samples: int = 100
    sample_floor: int = 1024  # coarse pyramid levels need dense sampling, see _effective_bins
    # Pyramid levels at or below this voxel count are evaluated over every voxel
    # during registration. Sparse sampling exists to make clinical-size volumes
    # tractable; on small volumes it buys nothing and the sampling noise puts
    # shallow false minima within the optimizer's stopping tolerance.
    dense_level_cap: int = 262144
    # Rotation start sweep at the finest level: candidate Euler offsets on a
    # +-rot_sweep_deg grid with rot_sweep_step spacing, scored on a sparse
    # sample set; descent starts from the best. Coarse pyramid levels decide
    # rotation only when a plausible rotation moves points by whole coarse
    # voxels; below that they are rotation-blind and can entrench zero
    # rotation, which the finest level then cannot escape. Set to 0 to disable.
    rot_sweep_deg: float = 10.0
    rot_sweep_step: float = 5.0

    def __post_init__(self):
        if not (0.0 < self.sample_fraction <= 1.0):
            raise ValueError(f"sample_fraction must be in (0, 1], got {self.sample_fraction}")
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")
        if self.dof not in ("affine", "rigid"):
            raise ValueError(f"dof must be 'affine' or 'rigid', got {self.dof!r}")


# ---------------------------------------------------------------------------
# Parzen kernels
# ---------------------------------------------------------------------------


def _beta3(t):
    at = np.abs(t)
    out = np.where(at < 1.0, 2.0 / 3.0 - at * at + at ** 3 / 2.0, 0.0)
    mid = (at >= 1.0) & (at < 2.0)
    out = np.where(mid, (2.0 - at) ** 3 / 6.0, out)
    return out


def _beta3_prime(t):
    at = np.abs(t)
    s = np.sign(t)
    out = np.where(at < 1.0, s * (-2.0 * at + 1.5 * at * at), 0.0)
    mid = (at >= 1.0) & (at < 2.0)
    out = np.where(mid, s * (-0.5 * (2.0 - at) ** 2), out)
    return out


# ---------------------------------------------------------------------------
# MI estimation from samples
# ---------------------------------------------------------------------------


def _mi_dense_histogram(fvals, mvals, bins, frange, mrange):
    """MI via a plain dense joint histogram (box kernels on both axes)."""
    joint = np.histogram2d(fvals, mvals, bins=bins, range=[frange, mrange])[0]
    n = joint.sum()
    if n == 0:
        return 0.0
    p = joint / n
    pf = p.sum(axis=1)
    pm = p.sum(axis=0)
    nz = p > 0
    rows, cols = np.nonzero(nz)
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(pf[rows]) - np.log(pm[cols]))))


def _degenerate(rng_pair):
    return rng_pair[1] - rng_pair[0] < _TINY


class _ParzenJoint:
    """Smoothed joint histogram with the pieces needed for dMI/d(moving value)."""

    def __init__(self, fvals, mvals, bins, frange, mrange):
        self.n = fvals.size
        self.bins = bins
        fw = (frange[1] - frange[0]) / bins
        self.mw = (mrange[1] - mrange[0]) / bins
        self.kappa = np.clip(((fvals - frange[0]) / fw).astype(np.int64), 0, bins - 1)
        u = (mvals - mrange[0]) / self.mw - 0.5
        base = np.floor(u).astype(np.int64)
        offs = base[:, None] + np.arange(-1, 3)[None, :]  # (n,4)
        self.targ = u[:, None] - offs
        self.lam = np.clip(offs, 0, bins - 1)
        self.wgt = _beta3(self.targ)

        joint = np.zeros((bins, bins))
        np.add.at(joint, (np.repeat(self.kappa, 4), self.lam.ravel()), self.wgt.ravel())
        self.p = joint / self.n
        self.pf = self.p.sum(axis=1)
        self.pm = self.p.sum(axis=0)

    def mi(self) -> float:
        p, pf, pm = self.p, self.pf, self.pm
        nz = p > 0
        rows, cols = np.nonzero(nz)
        return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(pf[rows]) - np.log(pm[cols]))))

    def dmi_dm(self) -> np.ndarray:
        """d(MI)/d(moving sample value), shape (n,)."""
        logterm = np.zeros_like(self.p)
        ok = (self.p > _TINY) & (self.pm[None, :] > _TINY)
        logterm[ok] = np.log(self.p[ok] / np.broadcast_to(self.pm[None, :], self.p.shape)[ok])
        picked = logterm[np.repeat(self.kappa, 4), self.lam.ravel()].reshape(-1, 4)
        dwgt = _beta3_prime(self.targ) / self.mw
        return (dwgt * picked).sum(axis=1) / self.n


def _mi_from_samples(fvals, mvals, bins, frange, mrange, smooth):
    if _degenerate(frange) or _degenerate(mrange):
        return 0.0
    if not smooth:
        return _mi_dense_histogram(fvals, mvals, bins, frange, mrange)
    return _ParzenJoint(fvals, mvals, bins, frange, mrange).mi()


def _intensity_range(vals):
    return (float(vals.min()), float(vals.max()))


@dataclass(frozen=True)
class _SampleSet:
    """Frozen per-level sample set: fixed values, physical points, histogram edges,
    and the moving volume's signal mask (voxels with exactly zero intensity mark
    regions outside the acquired field of view and never enter the histogram)."""

    points_mm: np.ndarray  # (n,3)
    fvals: np.ndarray
    frange: tuple
    mrange: tuple
    bins: int
    moving_mask: np.ndarray = None  # float32, same shape as the moving data


def _effective_bins(requested: int, n_samples: int) -> int:
    # A 2D histogram needs many samples per bin or the MI estimate rewards
    # arbitrary transforms that isolate samples into private bins (the bias
    # grows like bins^2 / n). Cap bins so coarse pyramid levels stay
    # statistically meaningful; at clinical sample counts the cap never binds.
    return min(requested, max(8, n_samples // 256))


def _signal_mask(moving: Volume3) -> np.ndarray:
    """1 where the moving volume carries signal, 0 on exact-zero voxels.

    Exactly-zero intensities mark regions outside the acquired field of view
    (the volume convention: in-FOV values are kept strictly positive). Samples
    touching them are excluded so a sliding FOV boundary cannot masquerade as
    image structure in the histogram.
    """
    return (moving.data != 0).astype(np.float32)


def _draw_samples(fixed: Volume3, moving: Volume3, transform, cfg: RegistrationConfig,
                  seed: int, adapt_bins: bool = False, mask_data=None,
                  dense: bool = False) -> _SampleSet:
    n_total = int(np.prod(fixed.dims))
    if dense or cfg.sample_fraction >= 1.0:
        idx = np.arange(n_total)
        ijk = np.stack(np.unravel_index(idx, fixed.dims), axis=1).astype(np.float64)
        pts = fixed.index_to_physical(ijk)
        fvals = fixed.data.ravel()[idx].astype(np.float64)
    else:
        rng = np.random.default_rng(seed)
        n = min(n_total, max(int(round(cfg.sample_fraction * n_total)), cfg.sample_floor))
        idx = rng.choice(n_total, size=n, replace=False)
        ijk = np.stack(np.unravel_index(idx, fixed.dims), axis=1).astype(np.float64)
        # Continuous jitter inside each voxel cell: sampling exact grid points
        # creates periodic interpolation artifacts (local MI minima at integer
        # voxel alignments) when both grids share a spacing.
        ijk += rng.uniform(-0.5, 0.5, size=ijk.shape)
        ijk = np.clip(ijk, 0.0, np.array(fixed.dims, dtype=np.float64) - 1.0)
        pts = fixed.index_to_physical(ijk)
        fvals = trilinear_sample(fixed, pts, fill=0.0).astype(np.float64)

    mask = _signal_mask(moving) if mask_data is None else mask_data
    mvals, support = _moving_values(moving, transform, pts)
    if support.sum() < cfg.min_valid_samples:
        raise TooFewSamples(f"{int(support.sum())} valid samples < {cfg.min_valid_samples}")
    bins = _effective_bins(cfg.bins, len(idx)) if adapt_bins else cfg.bins
    if _degenerate(_intensity_range(mvals[support])):
        # Constant moving content: MI is identically zero, masking is moot.
        return _SampleSet(pts, fvals, _intensity_range(fvals),
                          _intensity_range(mvals[support]), bins, mask)
    fov = _fov_fraction(moving, transform(pts), mask)
    valid = _apply_fov(support, fov, cfg.min_valid_samples)
    return _SampleSet(pts, fvals, _intensity_range(fvals), _intensity_range(mvals[valid]),
                      bins, mask)


def _moving_values(moving: Volume3, transform, pts):
    moved = transform(pts)
    u = moving.physical_to_index(moved)
    valid = np.ones(len(u), dtype=bool)
    for a in range(3):
        valid &= (u[:, a] >= 0.0) & (u[:, a] <= moving.dims[a] - 1)
    vals = trilinear_sample(moving, moved, fill=0.0)
    return vals.astype(np.float64), valid


def _fov_fraction(moving: Volume3, pts_moving, mask_data) -> np.ndarray:
    """Interpolated signal-mask value at already-transformed moving-frame points."""
    mask_vol = replace(moving, data=mask_data)
    return trilinear_sample(mask_vol, pts_moving, fill=0.0)


def _apply_fov(support: np.ndarray, fov: np.ndarray, min_n: int) -> np.ndarray:
    """Exclude out-of-FOV samples, relaxing the cut rather than starving the
    histogram: strict (every interpolation corner in FOV), then majority, then
    no FOV cut at all. Support validity alone decides the TooFewSamples error."""
    for thresh in (1.0 - 1e-5, 0.5):
        v = support & (fov >= thresh)
        if v.sum() >= min_n:
            return v
    return support


def _sampled_negative_mi(fixed, moving, transform, cfg, seed, smooth=True,
                         samples: _SampleSet = None) -> float:
    if samples is None:
        samples = _draw_samples(fixed, moving, transform, cfg, seed)
    if _degenerate(samples.frange) or _degenerate(samples.mrange):
        return 0.0
    mvals, valid = _moving_values(moving, transform, samples.points_mm)
    if valid.sum() < cfg.min_valid_samples:
        raise TooFewSamples(f"{int(valid.sum())} valid samples < {cfg.min_valid_samples}")
    if samples.moving_mask is not None:
        fov = _fov_fraction(moving, transform(samples.points_mm), samples.moving_mask)
        valid = _apply_fov(valid, fov, cfg.min_valid_samples)
    mi = _mi_from_samples(samples.fvals[valid], mvals[valid], samples.bins,
                          samples.frange, samples.mrange, smooth)
    return -mi


def mattes_mi(fixed: Volume3, moving: Volume3, transform, bins: int = 50,
              sample_fraction: float = 0.01, seed: int = 0, smooth: bool = True) -> float:
    """Negative Mattes MI over seeded fixed-grid samples.

    smooth=False drops the Parzen window, reducing to the plain dense
    joint-histogram estimate on the sampled points.
    """
    cfg = RegistrationConfig(bins=bins, sample_fraction=sample_fraction, seed=seed)
    return _sampled_negative_mi(fixed, moving, transform, cfg, seed, smooth=smooth)


def complete_mi(fixed: Volume3, moving_resampled: Volume3, bins: int = 100) -> float:
    """MI over every voxel of two same-grid volumes (positive; higher is better)."""
    f = fixed.data.ravel().astype(np.float64)
    m = moving_resampled.data.ravel().astype(np.float64)
    frange = _intensity_range(f)
    mrange = _intensity_range(m)
    if _degenerate(frange) or _degenerate(mrange):
        return 0.0
    return _mi_dense_histogram(f, m, bins, frange, mrange)


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------


def _grid_centroid(vol: Volume3, weighted: bool) -> np.ndarray:
    if not weighted:
        return vol.physical_center()
    w = vol.data.astype(np.float64) - float(vol.data.min())
    total = w.sum()
    if total <= 0:
        return vol.physical_center()
    idx = [np.arange(d, dtype=np.float64) for d in vol.dims]
    cx = (w.sum(axis=(1, 2)) * idx[0]).sum() / total
    cy = (w.sum(axis=(0, 2)) * idx[1]).sum() / total
    cz = (w.sum(axis=(0, 1)) * idx[2]).sum() / total
    return vol.index_to_physical([[cx, cy, cz]])[0]


def init_center_of_mass(fixed: Volume3, moving: Volume3) -> np.ndarray:
    """Translation aligning gray-level intensity centroids (min-shifted weights)."""
    return _grid_centroid(moving, True) - _grid_centroid(fixed, True)


def init_geometric_center(fixed: Volume3, moving: Volume3) -> np.ndarray:
    """Translation aligning grid centers."""
    return moving.physical_center() - fixed.physical_center()


# ---------------------------------------------------------------------------
# Pyramid
# ---------------------------------------------------------------------------

_PYRAMID_SHRINK = (4, 2, 1)
_PYRAMID_SIGMA_VOX = (2.0, 1.0, 0.0)


def _build_pyramid(vol: Volume3, levels: int):
    out = []
    shrinks = _PYRAMID_SHRINK[-levels:]
    sigmas = _PYRAMID_SIGMA_VOX[-levels:]
    for factor, sig in zip(shrinks, sigmas):
        sigma_mm = sig * float(vol.spacing.min())
        out.append(gaussian_downsample(vol, factor, sigma_mm))
    return out


def _moving_pyramid(vol: Volume3, levels: int):
    """Pyramid for a volume whose exact zeros mark out-of-FOV voxels.

    Plain smoothing would bleed zeros into the field of view and turn the FOV
    boundary into spurious image structure, so intensities are smoothed by
    normalized convolution against the signal mask and the mask itself is
    carried down the pyramid (a level voxel is in-FOV when the majority of its
    smoothing neighborhood was). Returns [(level_volume, level_mask), ...].
    """
    from scipy.ndimage import gaussian_filter

    mask = _signal_mask(vol)
    out = []
    shrinks = _PYRAMID_SHRINK[-levels:]
    sigmas = _PYRAMID_SIGMA_VOX[-levels:]
    for factor, sig in zip(shrinks, sigmas):
        if sig > 0:
            sigma_vox = sig * float(vol.spacing.min()) / vol.spacing
            num = gaussian_filter(vol.data.astype(np.float64) * mask, sigma_vox,
                                  mode="nearest", truncate=3.0)
            den = gaussian_filter(mask.astype(np.float64), sigma_vox,
                                  mode="nearest", truncate=3.0)
            inside = den > 0.5
            data = np.where(inside, num / np.maximum(den, 1e-6), 0.0).astype(np.float32)
            lmask = inside.astype(np.float32)
        else:
            data, lmask = vol.data, mask
        sl = (slice(None, None, factor),) * 3
        out.append((Volume3(np.ascontiguousarray(data[sl]),
                            vol.spacing * factor, vol.origin, vol.direction),
                    np.ascontiguousarray(lmask[sl])))
    return out


# ---------------------------------------------------------------------------
# Affine stage
# ---------------------------------------------------------------------------


def _params_from_vector(vec, center, dof):
    if dof == "rigid":
        return RigidParams.from_vector(vec, center)
    return AffineParams.from_vector(vec, center)


def _euler_matrix_derivs(angles):
    """d(euler_matrix)/d(angle) for each of the three angles, R = Rz @ Ry @ Rx."""
    rx, ry, rz = angles
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dRy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dRz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return (Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx)


class _AffineMIObjective:
    """Negative smoothed MI and its analytic gradient w.r.t. the scaled affine
    (or rigid) parameter vector.

    Chains d(-MI)/d(moving value) through the interpolator's spatial gradient
    into the transform x' = M(x-c)+c+t: d/dt accumulates the per-sample spatial
    gradients, d/dM[a,b] weights them by the centered fixed-frame coordinates,
    and the rigid case contracts the matrix gradient against dR/dangle.
    """

    def __init__(self, moving_level: Volume3, samples: _SampleSet, center, dof: str,
                 cfg: RegistrationConfig):
        self.ml = moving_level
        self.s = samples
        self.center = np.asarray(center, dtype=np.float64)
        self.dof = dof
        self.cfg = cfg
        self.rel = samples.points_mm - self.center

    def value_and_grad(self, vec):
        nv = vec.size
        if _degenerate(self.s.frange) or _degenerate(self.s.mrange):
            return 0.0, np.zeros(nv)
        params = _params_from_vector(vec, self.center, self.dof)
        pts = params(self.s.points_mm)
        mvals, grads = trilinear_sample_with_gradient(self.ml, pts, fill=0.0)
        u = self.ml.physical_to_index(pts)
        valid = np.ones(len(u), dtype=bool)
        for a in range(3):
            valid &= (u[:, a] >= 0.0) & (u[:, a] <= self.ml.dims[a] - 1)
        if valid.sum() < self.cfg.min_valid_samples:
            return float("inf"), np.zeros(nv)
        if self.s.moving_mask is not None:
            fov = _fov_fraction(self.ml, pts, self.s.moving_mask)
            valid = _apply_fov(valid, fov, self.cfg.min_valid_samples)
        joint = _ParzenJoint(self.s.fvals[valid], mvals[valid].astype(np.float64),
                             self.s.bins, self.s.frange, self.s.mrange)
        c = joint.dmi_dm()[:, None] * grads[valid]  # (nv,3) dMI/d(moving-frame position)
        gt = c.sum(axis=0)
        gmat = c.T @ self.rel[valid]  # gmat[a,b] = dMI/dM[a,b]
        if self.dof == "rigid":
            gang = np.array([np.sum(dR * gmat)
                             for dR in _euler_matrix_derivs(params.angles)])
            g = np.concatenate([gang / LINEAR_SCALE, gt])
        else:
            g = np.concatenate([gmat.ravel() / LINEAR_SCALE, gt])
        return -joint.mi(), -g


def _rotation_center(fl: Volume3, ml: Volume3, lmask, transform, cfg) -> np.ndarray:
    """Centroid of the samples the metric will actually score at `transform`.

    The linear part acts about this point. Centering it on the scored region
    decouples rotations from translations; about an off-region center the two
    trade off almost freely, leaving a narrow curved valley that defeats
    line-search descent.
    """
    ijk = np.stack(np.unravel_index(np.arange(int(np.prod(fl.dims))), fl.dims),
                   axis=1).astype(np.float64)
    pts = fl.index_to_physical(ijk)
    _, support = _moving_values(ml, transform, pts)
    if support.sum() < cfg.min_valid_samples:
        return fl.physical_center()
    fov = _fov_fraction(ml, transform(pts), lmask)
    valid = _apply_fov(support, fov, cfg.min_valid_samples)
    return pts[valid].mean(axis=0)


def _rotation_start_sweep(fl, ml, lmask, current, center, cfg: RegistrationConfig, seed: int):
    """Best rotation start from a seeded Euler-angle grid, scored by sparse MI.

    Only usable while rotation is still separable: `current` must be rigid or
    carry an identity linear part. Translation is held fixed; because the
    rotation acts about the scored-region centroid, candidate rotations leave
    the bulk alignment intact. The zero offset is always a candidate, so the
    chosen start is never worse than `current` on the sweep samples.
    """
    if isinstance(current, RigidParams):
        base_angles, trans = current.angles, current.translation
    elif np.allclose(current.matrix, np.eye(3), atol=1e-12):
        base_angles, trans = np.zeros(3), current.translation
    else:
        return current
    try:
        sweep = _draw_samples(fl, ml, current, cfg, seed + 39119,
                              adapt_bins=True, mask_data=lmask, dense=False)
    except TooFewSamples:
        return current
    obj = _AffineMIObjective(ml, sweep, center, "rigid", cfg)
    offsets = np.deg2rad(np.arange(-cfg.rot_sweep_deg, cfg.rot_sweep_deg + 1e-9,
                                   cfg.rot_sweep_step))
    best_f, best_angles = np.inf, base_angles
    for ox in offsets:
        for oy in offsets:
            for oz in offsets:
                angles = base_angles + np.array([ox, oy, oz])
                f, _ = obj.value_and_grad(RigidParams(angles, trans, center).to_vector())
                if f < best_f:
                    best_f, best_angles = f, angles
    swept = RigidParams(best_angles.copy(), trans, center)
    return swept if isinstance(current, RigidParams) else swept.to_affine()


def _affine_single_run(fixed, moving, init_translation, cfg: RegistrationConfig, seed: int):
    """One multi-resolution affine (or rigid) optimization. Returns (params, final
    sampled negative MI at full resolution, iterations per level).

    Levels before the last run rigid: with few smoothed voxels the metric
    constrains scale and shear poorly (a percent-level scale bias there costs
    millimeters later), while rotation+translation are well determined. The
    finest level starts from a rotation sweep (see _rotation_start_sweep) and
    uses the configured model.
    """
    fixed_pyr = _build_pyramid(fixed, cfg.pyramid_levels)
    moving_pyr = _moving_pyramid(moving, cfg.pyramid_levels)
    n_levels = len(fixed_pyr)

    init_t = np.asarray(init_translation, dtype=np.float64)
    center = _rotation_center(fixed_pyr[0], moving_pyr[0][0], moving_pyr[0][1],
                              AffineParams(np.eye(3), init_t, fixed.physical_center()), cfg)
    current = AffineParams(np.eye(3), init_t, center)

    final_mi = None
    iters_per_level = []
    for level, (fl, (ml, lmask)) in enumerate(zip(fixed_pyr, moving_pyr)):
        dof = "rigid" if (level < n_levels - 1) else cfg.dof
        level_seed = seed * 1000003 + level
        if level == n_levels - 1 and cfg.rot_sweep_deg > 0:
            current = _rotation_start_sweep(fl, ml, lmask, current, center, cfg, level_seed)
        dense = int(np.prod(fl.dims)) <= cfg.dense_level_cap
        samples = _draw_samples(fl, ml, current, cfg, level_seed, adapt_bins=True,
                                mask_data=lmask, dense=dense)
        objective, gradient = _cached_value_grad(
            _AffineMIObjective(ml, samples, center, dof, cfg).value_and_grad)

        if dof == "rigid":
            if isinstance(current, RigidParams):
                start = current
            else:
                # Only reached while the matrix is still identity (coarsest
                # level), where dropping to 6 parameters is lossless.
                start = RigidParams(np.zeros(3), current.translation, center)
        else:
            start = current.to_affine() if isinstance(current, RigidParams) else current
        x, fx, iters = linesearch_gd_minimize(
            objective, gradient, start.to_vector(), lr=cfg.lr, lr_upper=cfg.lr_upper,
            stop_window=cfg.stop_window, stop_eps=cfg.stop_eps,
            max_iters=cfg.affine_iters_per_level,
        )
        current = _params_from_vector(x, center, dof)
        final_mi = fx
        iters_per_level.append(iters)

    if isinstance(current, RigidParams):
        current = current.to_affine()
    return current, float(final_mi), iters_per_level


def affine_register(fixed: Volume3, moving: Volume3, init_translation, cfg: RegistrationConfig):
    """Multi-resolution affine registration with the quality-threshold retry.

    Returns (AffineParams, complete_mi_value, info dict). If the final sampled
    negative MI is above cfg.mi_quality_threshold the run repeats once with a
    fresh seed and the better of the two is kept.
    """
    params, final_mi, iters = _affine_single_run(fixed, moving, init_translation, cfg, cfg.seed)
    retried = False
    if final_mi > cfg.mi_quality_threshold:
        retried = True
        params2, final_mi2, iters2 = _affine_single_run(
            fixed, moving, init_translation, cfg, cfg.seed + 1)
        if final_mi2 < final_mi:
            params, final_mi, iters = params2, final_mi2, iters2
    resampled = resample(moving, params, GridGeometry.of(fixed), interp="linear", fill=0.0)
    cmi = complete_mi(fixed, resampled, bins=cfg.complete_bins)
    info = {"sampled_neg_mi": final_mi, "retried": retried, "iters_per_level": iters,
            "seed": cfg.seed}
    return params, cmi, info


# ---------------------------------------------------------------------------
# B-spline stage
# ---------------------------------------------------------------------------


class _BsplineMIObjective:
    """Negative smoothed MI and its analytic gradient w.r.t. field coefficients.

    Built once per resolution level: the affinely-warped sample points and their
    basis supports never change while only the field coefficients move. The
    gradient chains d(-MI)/d(moving value) through the interpolator's spatial
    gradient and the basis weights, scattered back onto the control grid.
    """

    def __init__(self, field0: BSplineField, moving_level: Volume3,
                 samples: _SampleSet, warped_points, cfg: RegistrationConfig):
        self.field0 = field0
        self.ml = moving_level
        self.samples = samples
        self.warped = np.asarray(warped_points, dtype=np.float64)
        self.cfg = cfg
        self.idx64, self.w64 = field0.basis_weights(self.warped)
        self.shape = field0.coeffs.shape

    def value_and_grad(self, flat):
        fld = self.field0.with_coeffs(flat.reshape(self.shape))
        pts = self.warped + fld.displacement(self.warped)
        mvals, grads = trilinear_sample_with_gradient(self.ml, pts, fill=0.0)
        u = self.ml.physical_to_index(pts)
        valid = np.ones(len(u), dtype=bool)
        for a in range(3):
            valid &= (u[:, a] >= 0.0) & (u[:, a] <= self.ml.dims[a] - 1)
        if valid.sum() < self.cfg.min_valid_samples:
            return 0.0, np.zeros(flat.size)
        if self.samples.moving_mask is not None:
            fov = _fov_fraction(self.ml, pts, self.samples.moving_mask)
            valid = _apply_fov(valid, fov, self.cfg.min_valid_samples)
        joint = _ParzenJoint(self.samples.fvals[valid], mvals[valid].astype(np.float64),
                             self.samples.bins, self.samples.frange, self.samples.mrange)
        dmi = np.zeros(len(u))
        dmi[valid] = joint.dmi_dm()
        contrib = dmi[:, None] * grads  # (n,3): dMI/d(point position), mm
        g = np.zeros((int(np.prod(self.shape[:3])), 3))
        for k in range(64):
            np.add.at(g, self.idx64[:, k], self.w64[:, k, None] * contrib)
        return -joint.mi(), -g.ravel()


def _cached_value_grad(value_and_grad):
    """Split a fused (value, gradient) callable for optimizers that ask separately."""
    cache = {}

    def lookup(flat):
        key = flat.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = value_and_grad(flat)
        return cache[key]

    return (lambda flat: lookup(flat)[0]), (lambda flat: lookup(flat)[1])


def bspline_register(fixed: Volume3, moving: Volume3, affine: AffineParams,
                     cfg: RegistrationConfig):
    """Free-form refinement on top of `affine` by bounded L-BFGS on negative MI.

    The control grid spans the moving volume; coefficients are bounded to
    +-cfg.bspline_bounds mm. The MI gradient w.r.t. coefficients is analytic:
    box kernel on fixed intensities, derivative of the cubic Parzen window on
    moving intensities, chained through the interpolator's spatial gradient and
    the basis weights at the affinely-warped sample points.
    """
    field0 = BSplineField.for_volume(moving, mesh=cfg.bspline_mesh)
    coeffs = field0.coeffs.copy()

    fixed_pyr = _build_pyramid(fixed, cfg.pyramid_levels)
    moving_pyr = _moving_pyramid(moving, cfg.pyramid_levels)

    for level, (fl, (ml, lmask)) in enumerate(zip(fixed_pyr, moving_pyr)):
        # A level with fewer scored points than field coefficients cannot
        # determine the field; the optimizer would fit sampling noise and ram
        # coefficients into the bounds, which later levels cannot fully undo.
        if int(np.prod(fl.dims)) < coeffs.size:
            continue
        level_seed = (cfg.seed + 7) * 1000003 + level
        dense = int(np.prod(fl.dims)) <= cfg.dense_level_cap
        samples = _draw_samples(fl, ml, affine, cfg, level_seed, adapt_bins=True,
                                mask_data=lmask, dense=dense)
        if _degenerate(samples.frange) or _degenerate(samples.mrange):
            continue
        warped = affine(samples.points_mm)  # fixed for the whole level
        problem = _BsplineMIObjective(field0, ml, samples, warped, cfg)
        objective, gradient = _cached_value_grad(problem.value_and_grad)
        # gtol at the sampled-MI gradient noise floor: directions flatter than
        # the estimate's own noise are unidentifiable and must not be walked.
        x, fx = lbfgsb_minimize(objective, gradient, coeffs.ravel(),
                                lower=-cfg.bspline_bounds, upper=cfg.bspline_bounds,
                                max_iters=cfg.bspline_iters_per_level, history=10,
                                gtol=1e-5)
        coeffs = x.reshape(problem.shape)

    fld = field0.with_coeffs(coeffs)
    composed = ComposedTransform(affine, fld)
    resampled = resample(moving, composed, GridGeometry.of(fixed), interp="linear", fill=0.0)
    cmi = complete_mi(fixed, resampled, bins=cfg.complete_bins)
    return fld, cmi


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegistrationReport:
    mi_affine_com: float  # complete MI, center-of-mass init
    mi_affine_geo: float  # complete MI, geometric-center init
    mi_bspline: float  # complete MI, B-spline on top of the winning affine
    mi_chosen: float
    chosen: str  # "affine" | "bspline"
    affine_init: str  # which init won: "center_of_mass" | "geometric"
    retried_com: bool
    retried_geo: bool
    seed: int
    elapsed_affine_s: float
    elapsed_bspline_s: float
    sampled_neg_mi: float = field(default=float("nan"))

    def to_text(self) -> str:
        lines = [
            f"complete_mi_affine_center_of_mass: {self.mi_affine_com:.6f}",
            f"complete_mi_affine_geometric: {self.mi_affine_geo:.6f}",
            f"complete_mi_bspline: {self.mi_bspline:.6f}",
            f"complete_mi_chosen: {self.mi_chosen:.6f}",
            f"chosen_stage: {self.chosen}",
            f"winning_init: {self.affine_init}",
            f"retried_center_of_mass: {self.retried_com}",
            f"retried_geometric: {self.retried_geo}",
            f"seed: {self.seed}",
            f"elapsed_affine_s: {self.elapsed_affine_s:.3f}",
            f"elapsed_bspline_s: {self.elapsed_bspline_s:.3f}",
            f"final_sampled_negative_mi: {self.sampled_neg_mi:.6f}",
        ]
        return "\n".join(lines) + "\n"


def register_pipeline(ct: Volume3, mri: Volume3, cfg: RegistrationConfig = None):
    """Full registration: CT fixed, MRI moving.

    Both initializations run the affine stage; the better complete MI wins. The
    B-spline stage refines the winner and is kept only if it improves complete
    MI again. The returned MRI is resampled onto the CT grid with the cubic
    interpolator. Returns (resampled_mri, transform, report).
    """
    cfg = cfg or RegistrationConfig()
    t0 = time.perf_counter()

    attempts = []
    errors = []
    for name, init in (("center_of_mass", init_center_of_mass(ct, mri)),
                       ("geometric", init_geometric_center(ct, mri))):
        try:
            params, cmi, info = affine_register(ct, mri, init, cfg)
            attempts.append((name, params, cmi, info))
        except Exception as exc:  # noqa: BLE001 - arbitration needs both failures
            errors.append((name, exc))
    if not attempts:
        raise RegistrationFailed(f"both affine initializations failed: {errors}")
    t1 = time.perf_counter()

    by_name = {name: (cmi, info) for name, _, cmi, info in attempts}
    best_name, best_params, best_cmi, best_info = max(attempts, key=lambda a: a[2])

    fld, cmi_bspline = bspline_register(ct, mri, best_params, cfg)
    t2 = time.perf_counter()

    if cmi_bspline > best_cmi:
        chosen, transform, cmi_chosen = "bspline", ComposedTransform(best_params, fld), cmi_bspline
    else:
        chosen, transform, cmi_chosen = "affine", best_params, best_cmi

    out = resample(mri, transform, GridGeometry.of(ct), interp="cubic", fill=0.0)
    report = RegistrationReport(
        mi_affine_com=by_name.get("center_of_mass", (float("nan"), None))[0],
        mi_affine_geo=by_name.get("geometric", (float("nan"), None))[0],
        mi_bspline=cmi_bspline,
        mi_chosen=cmi_chosen,
        chosen=chosen,
        affine_init=best_name,
        retried_com=by_name.get("center_of_mass", (None, {"retried": False}))[1]["retried"],
        retried_geo=by_name.get("geometric", (None, {"retried": False}))[1]["retried"],
        seed=cfg.seed,
        elapsed_affine_s=t1 - t0,
        elapsed_bspline_s=t2 - t1,
        sampled_neg_mi=best_info["sampled_neg_mi"],
    )
    return out, transform, report

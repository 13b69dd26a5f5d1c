"""Procedural paired CT/MRI phantoms with labels, fiducials, and known misalignments.

Anatomy is an analytic function of physical position (ellipsoids, tubes, one bony
shell), so a misaligned MRI can be synthesized exactly in its own frame by
evaluating the anatomy at inverse-transformed points: no interpolation error
enters the ground truth.

Intensity model: CT assigns each tissue class an HU value (air -1000, soft tissue
0-100, bone near 1100) plus seeded noise. MRI pushes the same class HU through a
single monotone profile whose slope is much steeper over the soft range, giving
MRI the higher soft-tissue contrast, and has its own smaller field of view
(exact zeros outside).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SpecInvalid
from .preprocessing import DEFAULT_BILATERAL_MAP
from .transforms import AffineParams, BSplineField, ComposedTransform, inverse_points
from .volume import GridGeometry, LabelVolume, Volume3

# Class codes used while painting; organ classes are 100 + raw label id.
_AIR, _BODY, _BONE = 0, 1, 2
_ORGAN_BASE = 100


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple  # mm relative to volume center
    semi: tuple  # mm

    def inside(self, rel_pts):
        q = (rel_pts - np.asarray(self.center)) / np.asarray(self.semi)
        return np.einsum("nd,nd->n", q, q) <= 1.0


@dataclass(frozen=True)
class TubeZ:
    """Finite cylinder along z."""

    center_xy: tuple  # mm relative to volume center
    z_range: tuple  # (lo, hi) mm relative to volume center
    radius: float  # mm

    def inside(self, rel_pts):
        dx = rel_pts[:, 0] - self.center_xy[0]
        dy = rel_pts[:, 1] - self.center_xy[1]
        zin = (rel_pts[:, 2] >= self.z_range[0]) & (rel_pts[:, 2] <= self.z_range[1])
        return zin & (dx * dx + dy * dy <= self.radius * self.radius)


@dataclass(frozen=True)
class Shell:
    """Region between two concentric ellipsoids (the bony skull ring)."""

    center: tuple
    outer: tuple
    inner_fraction: float

    def inside(self, rel_pts):
        q = (rel_pts - np.asarray(self.center)) / np.asarray(self.outer)
        r2 = np.einsum("nd,nd->n", q, q)
        return (r2 <= 1.0) & (r2 >= self.inner_fraction ** 2)


@dataclass(frozen=True)
class OrganDef:
    merged_id: int
    shape: str  # "ellipsoid" | "tube_z"
    center: tuple  # mm relative to volume center (bilateral: the +x side)
    size: tuple  # ellipsoid semi-axes, or (radius, z_lo, z_hi) for tubes
    bilateral: bool = False
    in_mri_fov: bool = True


# Unilateral structures sit on the midline; the five organs nearest the inferior
# (low-z) edge fall entirely outside the MRI field of view.
DEFAULT_ORGANS = (
    OrganDef(1, "tube_z", (0.0, 0.0, 0.0), (6.0, 10.0, 40.0)),            # brainstem
    OrganDef(2, "tube_z", (0.0, 10.0, 0.0), (4.0, -50.0, 8.0)),           # spinal cord
    OrganDef(3, "ellipsoid", (0.0, -25.0, -5.0), (18.0, 8.0, 6.0)),       # mandible (bony)
    OrganDef(4, "tube_z", (0.0, 18.0, 0.0), (5.0, -58.0, -30.0), in_mri_fov=False),  # esophagus
    OrganDef(5, "ellipsoid", (0.0, -5.0, -33.0), (8.0, 8.0, 4.0)),        # larynx, glottic
    OrganDef(6, "ellipsoid", (0.0, -5.0, -22.0), (8.0, 8.0, 4.0)),        # larynx, supraglottic
    OrganDef(7, "ellipsoid", (0.0, -20.0, 5.0), (14.0, 10.0, 8.0)),       # oral cavity
    OrganDef(8, "ellipsoid", (0.0, -8.0, -45.0), (10.0, 5.0, 6.0), in_mri_fov=False),  # thyroid
    OrganDef(9, "tube_z", (0.0, -2.0, 0.0), (5.0, -58.0, -38.0), in_mri_fov=False),    # trachea
    OrganDef(10, "ellipsoid", (0.0, 0.0, 32.0), (3.0, 3.0, 3.0)),         # pituitary
    OrganDef(11, "ellipsoid", (0.0, -6.0, 27.0), (6.0, 3.0, 2.0)),        # optic chiasm
    OrganDef(12, "ellipsoid", (0.0, -38.0, 0.0), (10.0, 3.0, 5.0)),       # lips
    OrganDef(13, "ellipsoid", (0.0, 8.0, -40.0), (9.0, 4.0, 6.0), in_mri_fov=False),   # constrictor
    OrganDef(14, "ellipsoid", (0.0, -4.0, -42.0), (3.0, 3.0, 3.0), in_mri_fov=False),  # arytenoid
    OrganDef(15, "ellipsoid", (18.0, -34.0, 24.0), (4.0, 4.0, 3.0), bilateral=True),   # eyeball ant.
    OrganDef(16, "ellipsoid", (18.0, -22.0, 24.0), (5.0, 5.0, 4.0), bilateral=True),   # eyeball post.
    OrganDef(17, "ellipsoid", (32.0, 6.0, 18.0), (3.0, 3.0, 3.0), bilateral=True),     # cochlea
    OrganDef(18, "ellipsoid", (34.0, 2.0, -2.0), (6.0, 8.0, 9.0), bilateral=True),     # parotid
    OrganDef(19, "ellipsoid", (10.0, -16.0, 25.0), (2.0, 6.0, 2.0), bilateral=True),   # optic nerve
    OrganDef(20, "ellipsoid", (14.0, -14.0, -16.0), (6.0, 6.0, 5.0), bilateral=True),  # submandibular
    OrganDef(21, "ellipsoid", (24.0, -30.0, 28.0), (3.0, 2.0, 2.0), bilateral=True),   # lacrimal
    OrganDef(22, "tube_z", (20.0, 8.0, 0.0), (3.5, -20.0, 10.0), bilateral=True),      # carotid
)

OUT_OF_FOV_MERGED_IDS = tuple(o.merged_id for o in DEFAULT_ORGANS if not o.in_mri_fov)
OUT_OF_FOV_RAW_IDS = OUT_OF_FOV_MERGED_IDS  # the out-of-FOV organs are all unilateral

BODY = Ellipsoid((0.0, 0.0, 0.0), (52.0, 52.0, 60.0))
BONE_RING = Shell((0.0, 0.0, 15.0), (46.0, 46.0, 44.0), inner_fraction=41.0 / 46.0)

# Air cavities and a skull-base bone mass. The near-ellipsoidal bone ring is
# almost rotation-invariant about its own center, so without these the only
# orientation cues are low-contrast soft-tissue blobs; faces pin orientation
# through exactly this kind of asymmetric air/bone structure.
# (class code, center mm (+x side when bilateral), semi-axes mm, bilateral)
EXTRA_STRUCTURES = (
    (_AIR, (10.0, -30.0, 38.0), (7.0, 6.0, 5.0), True),   # frontal sinuses
    (_AIR, (16.0, -26.0, 14.0), (8.0, 7.0, 9.0), True),   # maxillary sinuses
    (_AIR, (0.0, -6.0, 33.0), (6.0, 6.0, 4.0), False),    # sphenoid sinus
    (_AIR, (28.0, 10.0, 12.0), (5.0, 5.0, 6.0), True),    # mastoid air cells
    (_BONE, (0.0, 18.0, -6.0), (30.0, 14.0, 8.0), False), # skull base
)

# HU per tissue class
BODY_HU = 40.0
BONE_HU = 1100.0
MANDIBLE_HU = 900.0
AIR_HU = -1000.0


def organ_soft_hu(merged_id: int) -> float:
    """Distinct soft-tissue HU per organ, all inside the [-500, 500] soft window."""
    if merged_id == 3:
        return MANDIBLE_HU
    return 12.0 + 3.8 * merged_id


def mri_profile(hu):
    """Monotone piecewise-linear HU -> MRI intensity map.

    Soft tissue (0..100 HU) gets slope 2.5, well above CT's own unit contrast;
    the air-to-soft ramp is shallow and bone compresses to just above the soft
    range, so the map is globally non-decreasing.
    """
    hu = np.asarray(hu, dtype=np.float64)
    air_ramp = (hu + 1000.0) * 0.05  # f(-1000)=0, f(0)=50
    soft = 50.0 + 2.5 * hu  # f(100)=300
    bone = 300.0 + 0.01 * (hu - 100.0)
    out = np.where(hu <= 0.0, air_ramp, soft)
    out = np.where(hu > 100.0, bone, out)
    return np.maximum(out, 0.0)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    dims: tuple = (64, 64, 64)
    spacing: tuple = (2.0, 2.0, 2.0)
    mri_fov_fraction: float = 0.7
    organs: tuple = DEFAULT_ORGANS
    misalignment: object = None  # AffineParams | BSplineField | ComposedTransform
    ct_noise_hu: float = 8.0
    mri_noise: float = 4.0
    jitter_mm: float = 2.0
    min_bilateral_gap_mm: float = 8.0
    # Sub-voxel positions averaged per voxel (partial-volume rendering). Point
    # sampling (1) leaves aliased staircase edges that systematically displace
    # intensity-metric optima; real scanners integrate over the voxel.
    psf_supersample: int = 2

    def __post_init__(self):
        if not (0.0 < self.mri_fov_fraction <= 1.0):
            raise SpecInvalid(f"mri_fov_fraction must be in (0, 1], got {self.mri_fov_fraction}")
        if any(d < 16 for d in self.dims):
            raise SpecInvalid(f"dims must be >= 16 per axis, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise SpecInvalid(f"spacing must be positive, got {self.spacing}")
        if self.psf_supersample < 1:
            raise SpecInvalid(f"psf_supersample must be >= 1, got {self.psf_supersample}")
        extent = np.array(self.dims) * np.asarray(self.spacing)
        if np.any(extent < 124.0):
            raise SpecInvalid(
                f"volume extent {extent} mm too small for the mm-scale anatomy (need >= 124)"
            )
        mids = sorted(o.merged_id for o in self.organs)
        if len(mids) != len(set(mids)):
            raise SpecInvalid("duplicate merged organ ids in organ set")
        if not any(o.bilateral for o in self.organs):
            raise SpecInvalid("organ set needs at least one bilateral pair")


@dataclass(frozen=True)
class FiducialSet:
    """Physical marker points (mm) inside the body, for registration accuracy."""

    points: np.ndarray  # (N, 3)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] < 8:
            raise SpecInvalid(f"need >= 8 fiducial points, got {pts.shape[0]}")
        object.__setattr__(self, "points", pts)

    def check_inside(self, vol: Volume3):
        idx = vol.physical_to_index(self.points)
        if np.any(idx < 0) or np.any(idx > np.array(vol.dims) - 1):
            raise SpecInvalid("fiducial point outside volume bounds")


@dataclass(frozen=True)
class _Primitive:
    shape: object
    class_code: int


def _jittered_primitives(spec: PhantomSpec, rng):
    """Instantiate body, bone, and organ shapes with seeded per-phantom jitter.

    Returns (primitives in paint order, fiducial points relative to volume center).
    Bilateral organs produce two primitives with the pair's left/right raw ids
    (left = positive x under the axis convention). Organ sizes are floored at
    0.9x the voxel spacing so every organ contains at least one voxel center
    even on coarse grids.
    """
    pair_ids = DEFAULT_BILATERAL_MAP.merged_pair_ids()
    prims = [_Primitive(BODY, _BODY), _Primitive(BONE_RING, _BONE)]
    fiducials = []
    j = spec.jitter_mm
    min_semi = 0.9 * np.asarray(spec.spacing, dtype=np.float64)

    for code, c, semi, bilateral in EXTRA_STRUCTURES:
        for side in ((+1.0, -1.0) if bilateral else (+1.0,)):
            d = rng.uniform(-j, j, size=3)
            sc = rng.uniform(0.9, 1.1)
            prims.append(_Primitive(
                Ellipsoid((c[0] * side + d[0], c[1] + d[1], c[2] + d[2]),
                          tuple(s * sc for s in semi)), code))

    def one_shape(o, side):
        cx, cy, cz = o.center
        cx *= side
        dx, dy, dz = rng.uniform(-j, j, size=3)
        scale = rng.uniform(0.85, 1.15)
        center = (cx + dx, cy + dy, cz + dz)
        if o.shape == "ellipsoid":
            semi = tuple(max(s * scale, m) for s, m in zip(o.size, min_semi))
            return Ellipsoid(center, semi), center
        r, zlo, zhi = o.size
        r = max(r * scale, float(min_semi[:2].max()))
        shape = TubeZ((center[0], center[1]), (zlo + dz, zhi + dz), r)
        return shape, (center[0], center[1], (zlo + zhi) / 2 + dz)

    for o in sorted(spec.organs, key=lambda q: q.merged_id):
        if o.bilateral:
            left_raw, right_raw = pair_ids[o.merged_id]
            for side, raw in ((+1.0, left_raw), (-1.0, right_raw)):
                shape, center = one_shape(o, side)
                prims.append(_Primitive(shape, _ORGAN_BASE + raw))
                if o.merged_id in (16, 17, 18, 20):
                    fiducials.append(center)
        else:
            shape, center = one_shape(o, +1.0)
            prims.append(_Primitive(shape, _ORGAN_BASE + o.merged_id))
            if o.merged_id in (1, 10, 11, 12):
                fiducials.append(center)
    return prims, np.asarray(fiducials)


def _paint_classes(prims, rel_pts):
    """Evaluate the painted class code at relative physical points (later wins)."""
    out = np.zeros(rel_pts.shape[0], dtype=np.int32)
    for p in prims:
        out[p.shape.inside(rel_pts)] = p.class_code
    return out


_RAW_TO_MERGED = DEFAULT_BILATERAL_MAP.raw_to_merged_lut()


def _class_to_hu(classes):
    hu = np.full(classes.shape, AIR_HU)
    hu[classes == _BODY] = BODY_HU
    hu[classes == _BONE] = BONE_HU
    for raw in range(1, DEFAULT_BILATERAL_MAP.n_raw + 1):
        sel = classes == _ORGAN_BASE + raw
        if sel.any():
            hu[sel] = organ_soft_hu(int(_RAW_TO_MERGED[raw]))
    return hu


def _class_to_label(classes):
    lab = np.zeros(classes.shape, dtype=np.uint16)
    organ = classes >= _ORGAN_BASE
    lab[organ] = (classes[organ] - _ORGAN_BASE).astype(np.uint16)
    return lab


def _psf_offsets(spacing, s: int) -> np.ndarray:
    """Cell-centered s^3 sub-voxel offsets in mm (one zero offset when s=1)."""
    if s <= 1:
        return np.zeros((1, 3))
    ax = (np.arange(s) + 0.5) / s - 0.5
    ox, oy, oz = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([ox, oy, oz], axis=-1).reshape(-1, 3) * np.asarray(spacing)


def _fov_slices(dims, fraction):
    """Centered x/y box, top-anchored z box (inferior organs fall outside)."""
    fx = int(round(dims[0] * (1 - fraction) / 2))
    fy = int(round(dims[1] * (1 - fraction) / 2))
    zlo = dims[2] - int(round(dims[2] * fraction))
    return (slice(fx, dims[0] - fx), slice(fy, dims[1] - fy), slice(zlo, dims[2]))


def _check_bilateral_gaps(labels: LabelVolume, spec: PhantomSpec):
    """Verify the physical x-gap between left and right voxels of every pair."""
    x_mm = np.arange(labels.dims[0]) * labels.spacing[0]
    for merged, (lraw, rraw) in DEFAULT_BILATERAL_MAP.merged_pair_ids().items():
        if merged not in {o.merged_id for o in spec.organs if o.bilateral}:
            continue
        left = np.nonzero(labels.labels == lraw)[0]
        right = np.nonzero(labels.labels == rraw)[0]
        if left.size == 0 or right.size == 0:
            raise SpecInvalid(f"bilateral organ {merged} lost a side during painting")
        gap = x_mm[left.min()] - x_mm[right.max()]
        if gap < spec.min_bilateral_gap_mm:
            raise SpecInvalid(
                f"bilateral organ {merged} gap {gap:.1f} mm < {spec.min_bilateral_gap_mm} mm"
            )


def generate(spec: PhantomSpec):
    """Build one phantom: (ct, mri, labels, fiducials, truth transform).

    Labels are raw 30-structure ids on the CT grid (bilateral organs carry their
    left/right ids; merge_bilateral produces the 22-structure training labels).
    `truth` maps CT-frame points to MRI-frame points; identity when aligned.
    """
    rng = np.random.default_rng(spec.seed)
    dims = tuple(spec.dims)
    spacing = np.asarray(spec.spacing, dtype=np.float64)
    origin = np.zeros(3)
    geo = GridGeometry(dims, spacing, origin, np.eye(3))
    grid_pts = geo.grid_points_mm()
    center = origin + (np.array(dims, dtype=np.float64) - 1) / 2 * spacing

    prims, fid_rel = _jittered_primitives(spec, rng)
    fiducials = FiducialSet(fid_rel + center)

    # Labels are decisions, taken at voxel centers; the image channels average
    # signal over sub-voxel positions (partial volume) like a scanner would.
    classes = _paint_classes(prims, grid_pts - center)
    labels = LabelVolume(_class_to_label(classes).reshape(dims), spacing, origin, np.eye(3))
    _check_bilateral_gaps(labels, spec)

    offsets = _psf_offsets(spacing, spec.psf_supersample)
    ct_hu = np.zeros(grid_pts.shape[0])
    for off in offsets:
        ct_hu += _class_to_hu(_paint_classes(prims, grid_pts + off - center))
    ct_hu /= len(offsets)
    if spec.ct_noise_hu > 0:
        ct_hu = ct_hu + rng.normal(0.0, spec.ct_noise_hu, size=ct_hu.shape)
    ct = Volume3(ct_hu.reshape(dims).astype(np.float32), spacing, origin, np.eye(3))

    truth = spec.misalignment
    aligned = truth is None
    if aligned:
        truth = AffineParams.identity(center=center)

    # MRI integrates over its own voxel cell: anatomy at T^-1(position + offset)
    mri_vals = np.zeros(grid_pts.shape[0])
    for off in offsets:
        p = grid_pts + off
        src = p if aligned else inverse_points(truth, p)
        mri_vals += mri_profile(_class_to_hu(_paint_classes(prims, src - center)))
    mri_vals /= len(offsets)
    if spec.mri_noise > 0:
        mri_vals = mri_vals + rng.normal(0.0, spec.mri_noise, size=mri_vals.size)
    mri_vals = np.maximum(mri_vals, 1.0)  # in-FOV voxels stay nonzero
    mri_data = np.zeros(dims, dtype=np.float32)
    sl = _fov_slices(dims, spec.mri_fov_fraction)
    full = mri_vals.reshape(dims)
    mri_data[sl] = full[sl]
    mri = Volume3(mri_data, spacing, origin, np.eye(3))

    return ct, mri, labels, fiducials, truth


def random_misalignment(seed: int, center, domain_origin=None, domain_extent=None,
                        max_rot_deg: float = 6.0, max_shift_mm: float = 8.0,
                        max_scale: float = 0.03, bump_mm: float = 0.0, mesh=(5, 5, 5)):
    """Seeded affine, optionally composed with a random B-spline bump field.

    The bump field needs a domain (origin + extent of the moving volume in mm);
    pass both to enable it.
    """
    from .transforms import euler_matrix

    rng = np.random.default_rng(seed)
    ang = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg, size=3))
    scale = 1.0 + rng.uniform(-max_scale, max_scale, size=3)
    m = euler_matrix(*ang) @ np.diag(scale)
    t = rng.uniform(-max_shift_mm, max_shift_mm, size=3)
    affine = AffineParams(m, t, np.asarray(center, dtype=np.float64))
    if bump_mm <= 0 or domain_origin is None or domain_extent is None:
        return affine
    fld = BSplineField(tuple(mesh), np.asarray(domain_origin, dtype=np.float64), np.eye(3),
                       np.asarray(domain_extent, dtype=np.float64))
    coeffs = rng.uniform(-bump_mm, bump_mm, size=fld.coeffs.shape)
    return ComposedTransform(affine, fld.with_coeffs(coeffs))


def target_registration_error(fiducials: FiducialSet, estimated, true):
    """(mean, max) mm distance between the two transforms' images of the markers."""
    a = estimated(fiducials.points)
    b = true(fiducials.points)
    d = np.linalg.norm(a - b, axis=1)
    return float(d.mean()), float(d.max())


# ---------------------------------------------------------------------------
# Dataset emission (one directory, numbered cases, manifest)
# ---------------------------------------------------------------------------


def write_fiducials(fiducials: FiducialSet, path):
    with open(path, "w") as fh:
        for p in fiducials.points:
            fh.write("%.17g %.17g %.17g\n" % tuple(p))


def read_fiducials(path) -> FiducialSet:
    pts = np.loadtxt(path, dtype=np.float64).reshape(-1, 3)
    return FiducialSet(pts)


def generate_dataset(out_dir, count: int, base_seed: int, misalign: str = "none",
                     dims=(64, 64, 64), spacing=(2.0, 2.0, 2.0), fov_fraction: float = 0.7):
    """Write `count` phantoms to a directory; returns the list of case names.

    misalign: "none" (MRI pre-aligned), "affine", or "deformed" (affine + bump field).
    """
    from pathlib import Path

    from .transforms import write_transform
    from .volume import write_volume

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(count):
        seed = base_seed + i
        spec = PhantomSpec(seed=seed, dims=tuple(dims), spacing=tuple(spacing),
                           mri_fov_fraction=fov_fraction)
        if misalign != "none":
            extent = (np.array(dims, dtype=np.float64) - 1) * np.asarray(spacing)
            bump = 3.0 if misalign == "deformed" else 0.0
            t = random_misalignment(seed * 7919 + 13, extent / 2, domain_origin=np.zeros(3),
                                    domain_extent=extent, bump_mm=bump)
            spec = PhantomSpec(seed=seed, dims=tuple(dims), spacing=tuple(spacing),
                               mri_fov_fraction=fov_fraction, misalignment=t)
        ct, mri, labels, fiducials, truth = generate(spec)
        name = f"{i:03d}"
        write_volume(ct, out / f"ct_{name}.v3r")
        write_volume(mri, out / f"mri_{name}.v3r")
        write_volume(labels, out / f"labels_{name}.v3r")
        write_transform(truth, out / f"truth_{name}.txt")
        write_fiducials(fiducials, out / f"fiducials_{name}.txt")
        names.append(name)
    with open(out / "manifest.txt", "w") as fh:
        fh.write(f"cases: {count}\nbase_seed: {base_seed}\nmisalign: {misalign}\n")
        fh.write(f"dims: {dims[0]} {dims[1]} {dims[2]}\n")
        fh.write(f"spacing: {spacing[0]} {spacing[1]} {spacing[2]}\n")
        fh.write(f"fov_fraction: {fov_fraction}\n")
        for name in names:
            fh.write(f"case: {name}\n")
    return names


def dataset_cases(data_dir):
    """Case names listed in a dataset manifest."""
    from pathlib import Path

    names = []
    with open(Path(data_dir) / "manifest.txt") as fh:
        for line in fh:
            if line.startswith("case:"):
                names.append(line.split(":", 1)[1].strip())
    return names

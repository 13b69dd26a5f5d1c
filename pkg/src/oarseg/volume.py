"""3D volumes with physical geometry: sampling, resampling, flips, pyramids, file I/O.

Conventions used throughout the pipeline:
  * arrays are indexed (x, y, z); axis 0 is the left-right (sagittal mirror) axis
  * geometry maps voxel index ijk to physical mm via origin + direction @ (spacing * ijk)
  * scalar data is float32, labels are uint16
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import (
    DimsTooSmall,
    GeometryInvalid,
    LabelOutOfRange,
    ParseError,
)

RAW_LABEL_MAX = 30
MERGED_LABEL_MAX = 22

# Out-of-support fill defaults: air for CT (HU), no-signal for MRI.
CT_FILL = -1000.0
MRI_FILL = 0.0


def _check_geometry(dims, spacing, origin, direction):
    spacing = np.asarray(spacing, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if spacing.shape != (3,) or origin.shape != (3,) or direction.shape != (3, 3):
        raise GeometryInvalid("spacing/origin must be 3-vectors, direction 3x3")
    if not np.all(spacing > 0):
        raise GeometryInvalid(f"spacing must be strictly positive, got {spacing}")
    if not np.allclose(direction.T @ direction, np.eye(3), atol=1e-6):
        raise GeometryInvalid("direction columns are not orthonormal")
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise GeometryInvalid(f"dims must be 3 positive integers, got {dims}")
    return spacing, origin, direction


@dataclass(frozen=True)
class Volume3:
    """Scalar 3D volume. `data` has shape dims=(X, Y, Z), C-order, float32."""

    data: np.ndarray
    spacing: np.ndarray  # (3,) mm
    origin: np.ndarray  # (3,) mm
    direction: np.ndarray  # (3,3) orthonormal

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        spacing, origin, direction = _check_geometry(
            data.shape, self.spacing, self.origin, self.direction
        )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def dims(self):
        return self.data.shape

    def same_grid(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=1e-9)
            and np.allclose(self.origin, other.origin, atol=1e-9)
            and np.allclose(self.direction, other.direction, atol=1e-9)
        )

    def index_to_physical(self, idx) -> np.ndarray:
        """Voxel indices (N,3) to physical mm points (N,3)."""
        idx = np.atleast_2d(np.asarray(idx, dtype=np.float64))
        return self.origin + (idx * self.spacing) @ self.direction.T

    def physical_to_index(self, points_mm) -> np.ndarray:
        """Physical mm points (N,3) to continuous voxel indices (N,3)."""
        pts = np.atleast_2d(np.asarray(points_mm, dtype=np.float64))
        return ((pts - self.origin) @ self.direction) / self.spacing

    def physical_center(self) -> np.ndarray:
        """Physical position of the grid center."""
        c = (np.array(self.dims, dtype=np.float64) - 1.0) / 2.0
        return self.index_to_physical(c)[0]

    def axis_extent_mm(self) -> np.ndarray:
        """Per-axis physical extent (dims * spacing), mm."""
        return np.array(self.dims) * self.spacing


@dataclass(frozen=True)
class LabelVolume:
    """Integer-labeled mask sharing the Volume3 grid convention. uint16 labels."""

    labels: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        spacing, origin, direction = _check_geometry(
            labels.shape, self.spacing, self.origin, self.direction
        )
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def dims(self):
        return self.labels.shape

    def same_grid(self, other) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=1e-9)
            and np.allclose(self.origin, other.origin, atol=1e-9)
            and np.allclose(self.direction, other.direction, atol=1e-9)
        )

    def index_to_physical(self, idx) -> np.ndarray:
        idx = np.atleast_2d(np.asarray(idx, dtype=np.float64))
        return self.origin + (idx * self.spacing) @ self.direction.T

    def physical_to_index(self, points_mm) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points_mm, dtype=np.float64))
        return ((pts - self.origin) @ self.direction) / self.spacing

    def check_range(self, max_label: int):
        top = int(self.labels.max()) if self.labels.size else 0
        if top > max_label:
            raise LabelOutOfRange(f"label {top} exceeds allowed maximum {max_label}")

    def as_volume(self) -> Volume3:
        """Float view on the same grid (for nearest-neighbor resampling)."""
        return Volume3(self.labels.astype(np.float32), self.spacing, self.origin, self.direction)


@dataclass(frozen=True)
class BBox3:
    """Inclusive-exclusive voxel box."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"bbox lo {self.lo} exceeds hi {self.hi}")

    def clip(self, dims) -> "BBox3":
        lo = tuple(max(0, min(l, d)) for l, d in zip(self.lo, dims))
        hi = tuple(max(0, min(h, d)) for h, d in zip(self.hi, dims))
        return BBox3(lo, hi)

    def intersect(self, other: "BBox3") -> "BBox3":
        lo = tuple(max(a, b) for a, b in zip(self.lo, other.lo))
        hi = tuple(min(a, b) for a, b in zip(self.hi, other.hi))
        lo = tuple(min(l, h) for l, h in zip(lo, hi))
        return BBox3(lo, hi)


# ---------------------------------------------------------------------------
# Interpolation
# ---------------------------------------------------------------------------


def _support_mask(u, dims):
    """Points whose continuous index lies within the voxel-center hull."""
    ok = np.ones(u.shape[0], dtype=bool)
    for a in range(3):
        ok &= (u[:, a] >= 0.0) & (u[:, a] <= dims[a] - 1)
    return ok


def trilinear_sample(vol: Volume3, points_mm, fill: float = 0.0) -> np.ndarray:
    """Trilinear interpolation at physical points; outside support returns fill."""
    u = vol.physical_to_index(points_mm)
    return _trilinear_at_index(vol.data, u, fill)


def _trilinear_at_index(data, u, fill):
    dims = data.shape
    ok = _support_mask(u, dims)
    uc = np.clip(u, 0.0, np.array(dims, dtype=np.float64) - 1.0)
    i0 = np.floor(uc).astype(np.int64)
    for a in range(3):
        i0[:, a] = np.minimum(i0[:, a], dims[a] - 2) if dims[a] > 1 else 0
    f = uc - i0
    i1 = np.minimum(i0 + 1, np.array(dims) - 1)

    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    c000 = data[x0, y0, z0]
    c100 = data[x1, y0, z0]
    c010 = data[x0, y1, z0]
    c110 = data[x1, y1, z0]
    c001 = data[x0, y0, z1]
    c101 = data[x1, y0, z1]
    c011 = data[x0, y1, z1]
    c111 = data[x1, y1, z1]

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    return np.where(ok, out, fill)


def trilinear_sample_with_gradient(vol: Volume3, points_mm, fill: float = 0.0):
    """Values plus the spatial gradient of the trilinear interpolant, d(value)/d(mm).

    The gradient is zero outside support. Used by the registration metric, which
    transforms the moving volume with the linear interpolator during optimization.
    """
    u = vol.physical_to_index(points_mm)
    data = vol.data
    dims = data.shape
    ok = _support_mask(u, dims)
    uc = np.clip(u, 0.0, np.array(dims, dtype=np.float64) - 1.0)
    i0 = np.floor(uc).astype(np.int64)
    for a in range(3):
        i0[:, a] = np.minimum(i0[:, a], dims[a] - 2) if dims[a] > 1 else 0
    f = uc - i0
    i1 = np.minimum(i0 + 1, np.array(dims) - 1)

    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    c000 = data[x0, y0, z0].astype(np.float64)
    c100 = data[x1, y0, z0].astype(np.float64)
    c010 = data[x0, y1, z0].astype(np.float64)
    c110 = data[x1, y1, z0].astype(np.float64)
    c001 = data[x0, y0, z1].astype(np.float64)
    c101 = data[x1, y0, z1].astype(np.float64)
    c011 = data[x0, y1, z1].astype(np.float64)
    c111 = data[x1, y1, z1].astype(np.float64)

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    val = c0 * (1 - fz) + c1 * fz

    # Partial derivatives in index space
    d_dx = (
        ((c100 - c000) * (1 - fy) + (c110 - c010) * fy) * (1 - fz)
        + ((c101 - c001) * (1 - fy) + (c111 - c011) * fy) * fz
    )
    d_dy = ((c10 - c00) * (1 - fz)) + ((c11 - c01) * fz)
    d_dz = c1 - c0

    grad_idx = np.stack([d_dx, d_dy, d_dz], axis=1)
    # Chain rule: index = (direction^T (p - origin)) / spacing
    grad_mm = (grad_idx / vol.spacing) @ vol.direction.T
    val = np.where(ok, val, fill)
    grad_mm[~ok] = 0.0
    return val, grad_mm


def _bspline3_weights(f):
    """Cubic B-spline weights for offsets (-1, 0, +1, +2) around floor, f in [0,1)."""
    f2 = f * f
    f3 = f2 * f
    w0 = (1 - 3 * f + 3 * f2 - f3) / 6.0  # node at floor-1
    w1 = (4 - 6 * f2 + 3 * f3) / 6.0  # node at floor
    w2 = (1 + 3 * f + 3 * f2 - 3 * f3) / 6.0  # node at floor+1
    w3 = f3 / 6.0  # node at floor+2
    return w0, w1, w2, w3


def bspline_coefficients(vol: Volume3) -> np.ndarray:
    """Prefiltered interpolation coefficients (mirror boundary) for cubic sampling."""
    for a, d in enumerate(vol.dims):
        if d < 4:
            raise DimsTooSmall(f"axis {a} has {d} voxels; cubic sampling needs >= 4")
    return ndimage.spline_filter(vol.data.astype(np.float64), order=3, mode="mirror")


def _mirror_index(idx, n):
    """Mirror (reflect about edge samples, period 2n-2) into [0, n)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def bspline_sample(vol: Volume3, points_mm, fill: float = 0.0, coeffs=None) -> np.ndarray:
    """Cubic B-spline interpolation (prefiltered, exact at voxel centers)."""
    if coeffs is None:
        coeffs = bspline_coefficients(vol)
    u = vol.physical_to_index(points_mm)
    dims = vol.dims
    ok = _support_mask(u, dims)
    uc = np.clip(u, 0.0, np.array(dims, dtype=np.float64) - 1.0)
    i0 = np.floor(uc).astype(np.int64)
    f = uc - i0

    wx = _bspline3_weights(f[:, 0])
    wy = _bspline3_weights(f[:, 1])
    wz = _bspline3_weights(f[:, 2])

    ix = [_mirror_index(i0[:, 0] + o, dims[0]) for o in (-1, 0, 1, 2)]
    iy = [_mirror_index(i0[:, 1] + o, dims[1]) for o in (-1, 0, 1, 2)]
    iz = [_mirror_index(i0[:, 2] + o, dims[2]) for o in (-1, 0, 1, 2)]

    out = np.zeros(u.shape[0], dtype=np.float64)
    for a in range(4):
        for b in range(4):
            partial = np.zeros_like(out)
            for c in range(4):
                partial += wz[c] * coeffs[ix[a], iy[b], iz[c]]
            out += wx[a] * wy[b] * partial
    return np.where(ok, out, fill)


def nearest_sample(vol_data: np.ndarray, u, fill=0.0):
    """Nearest-neighbor lookup at continuous indices; fill outside support."""
    dims = vol_data.shape
    ok = _support_mask(u, dims)
    idx = np.rint(np.clip(u, 0.0, np.array(dims, dtype=np.float64) - 1.0)).astype(np.int64)
    out = vol_data[idx[:, 0], idx[:, 1], idx[:, 2]]
    return np.where(ok, out, fill)


# ---------------------------------------------------------------------------
# Resampling and grid operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridGeometry:
    """Reference grid for resampling: dims + physical placement."""

    dims: tuple
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray

    @staticmethod
    def of(vol) -> "GridGeometry":
        return GridGeometry(vol.dims, vol.spacing, vol.origin, vol.direction)

    def grid_points_mm(self) -> np.ndarray:
        """All voxel centers as (N,3) physical points, C-order over (x,y,z)."""
        ax = [np.arange(d, dtype=np.float64) for d in self.dims]
        gx, gy, gz = np.meshgrid(*ax, indexing="ij")
        idx = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        return np.asarray(self.origin) + (idx * self.spacing) @ np.asarray(self.direction).T


def resample(vol: Volume3, transform, ref: GridGeometry, interp: str = "linear",
             fill: float = 0.0) -> Volume3:
    """Resample `vol` onto `ref`; `transform` maps fixed-space mm points to moving-space."""
    pts = ref.grid_points_mm()
    moved = transform(pts)
    if interp == "linear":
        vals = trilinear_sample(vol, moved, fill=fill)
    elif interp == "cubic":
        vals = bspline_sample(vol, moved, fill=fill)
    elif interp == "nearest":
        vals = nearest_sample(vol.data, vol.physical_to_index(moved), fill=fill)
    else:
        raise ValueError(f"unknown interpolator {interp!r}")
    data = vals.reshape(ref.dims).astype(np.float32)
    return Volume3(data, ref.spacing, ref.origin, ref.direction)


def resample_labels(lab: LabelVolume, transform, ref: GridGeometry) -> LabelVolume:
    """Nearest-neighbor label resampling; outside support becomes background."""
    pts = ref.grid_points_mm()
    moved = transform(pts)
    u = ((moved - lab.origin) @ lab.direction) / lab.spacing
    vals = nearest_sample(lab.labels, u, fill=0)
    return LabelVolume(vals.reshape(ref.dims).astype(np.uint16),
                       ref.spacing, ref.origin, ref.direction)


def identity_transform(points_mm):
    return points_mm


def flip_axis(vol, axis: int):
    """Index-space flip; geometry metadata unchanged. Works on Volume3 and LabelVolume."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if isinstance(vol, LabelVolume):
        return replace(vol, labels=np.ascontiguousarray(np.flip(vol.labels, axis=axis)))
    return replace(vol, data=np.ascontiguousarray(np.flip(vol.data, axis=axis)))


def gaussian_downsample(vol: Volume3, factor: int, sigma_mm: float) -> Volume3:
    """Gaussian smoothing (3-sigma truncation) followed by every-`factor` subsampling."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    data = vol.data.astype(np.float64)
    if sigma_mm > 0:
        sigma_vox = sigma_mm / vol.spacing
        data = ndimage.gaussian_filter(data, sigma=sigma_vox, truncate=3.0, mode="nearest")
    if factor > 1:
        data = data[::factor, ::factor, ::factor]
    # Kept voxels are at original indices 0, f, 2f, ...; index 0 is unmoved.
    return Volume3(data.astype(np.float32), vol.spacing * factor, vol.origin, vol.direction)


# ---------------------------------------------------------------------------
# File I/O: "v3r/1" format — text header, blank line, raw little-endian payload
# ---------------------------------------------------------------------------

_HEADER_KEYS = ("format", "kind", "dims", "spacing", "origin", "direction", "dtype", "encoding")


def write_volume(vol, path):
    """Write a Volume3 or LabelVolume in v3r/1 format."""
    if isinstance(vol, LabelVolume):
        kind, dtype, payload = "label", "u16", vol.labels.astype("<u2").tobytes()
    else:
        kind, dtype, payload = "scalar", "f32", vol.data.astype("<f4").tobytes()
    fmt = lambda v: " ".join("%.17g" % x for x in np.asarray(v).ravel())
    header = (
        "format: v3r/1\n"
        f"kind: {kind}\n"
        f"dims: {vol.dims[0]} {vol.dims[1]} {vol.dims[2]}\n"
        f"spacing: {fmt(vol.spacing)}\n"
        f"origin: {fmt(vol.origin)}\n"
        f"direction: {fmt(vol.direction)}\n"
        f"dtype: {dtype}\n"
        "encoding: raw-le\n"
        "\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def read_volume(path, max_label: int = RAW_LABEL_MAX):
    """Read a v3r/1 file; returns Volume3 or LabelVolume depending on `kind`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise ParseError("missing blank line terminating header", offset=len(blob))
    header_bytes = blob[:sep]
    payload = blob[sep + 2:]

    fields = {}
    offset = 0
    for line in header_bytes.split(b"\n"):
        try:
            text = line.decode("ascii")
        except UnicodeDecodeError:
            raise ParseError("non-ASCII header line", offset=offset)
        if ":" not in text:
            raise ParseError(f"malformed header line {text!r}", offset=offset)
        key, _, value = text.partition(":")
        fields[key.strip()] = value.strip()
        offset += len(line) + 1

    for key in _HEADER_KEYS:
        if key not in fields:
            raise ParseError(f"missing header key {key!r}", offset=sep)
    if fields["format"] != "v3r/1":
        raise ParseError(f"unsupported format {fields['format']!r}", offset=0)
    if fields["encoding"] != "raw-le":
        raise ParseError(f"unsupported encoding {fields['encoding']!r}", offset=0)

    try:
        dims = tuple(int(t) for t in fields["dims"].split())
        spacing = np.array([float(t) for t in fields["spacing"].split()])
        origin = np.array([float(t) for t in fields["origin"].split()])
        direction = np.array([float(t) for t in fields["direction"].split()]).reshape(3, 3)
    except (ValueError, IndexError) as exc:
        raise ParseError(f"malformed geometry field: {exc}", offset=0)
    if len(dims) != 3:
        raise ParseError(f"dims must have 3 entries, got {fields['dims']!r}", offset=0)

    n = int(np.prod(dims))
    kind, dtype = fields["kind"], fields["dtype"]
    if (kind, dtype) == ("scalar", "f32"):
        if len(payload) != 4 * n:
            raise ParseError(
                f"payload is {len(payload)} bytes, expected {4 * n} for dims {dims}",
                offset=sep + 2,
            )
        data = np.frombuffer(payload, dtype="<f4").reshape(dims)
        return Volume3(data, spacing, origin, direction)
    if (kind, dtype) == ("label", "u16"):
        if len(payload) != 2 * n:
            raise ParseError(
                f"payload is {len(payload)} bytes, expected {2 * n} for dims {dims}",
                offset=sep + 2,
            )
        labels = np.frombuffer(payload, dtype="<u2").reshape(dims)
        lab = LabelVolume(labels, spacing, origin, direction)
        lab.check_range(max_label)
        return lab
    raise ParseError(f"unsupported kind/dtype {kind!r}/{dtype!r}", offset=0)

"""Spatial transforms: centered affine maps and free-form B-spline deformations.

Transforms are callables mapping (N, 3) physical mm points in the fixed frame to
points in the moving frame, the direction a resampler needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# Optimizers work on a scaled parameter vector where linear-matrix entries are
# multiplied by this factor, so a unit optimizer step moves a matrix entry 100x
# less than a translation (entries are ~1, translations ~mm).
LINEAR_SCALE = 100.0


@dataclass(frozen=True)
class AffineParams:
    """Centered affine map T(x) = M (x - c) + c + t."""

    matrix: np.ndarray  # (3,3)
    translation: np.ndarray  # (3,) mm
    center: np.ndarray  # (3,) mm, fixed during optimization

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    @staticmethod
    def identity(center=(0.0, 0.0, 0.0)) -> "AffineParams":
        return AffineParams(np.eye(3), np.zeros(3), np.asarray(center, dtype=np.float64))

    def __call__(self, points_mm) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points_mm, dtype=np.float64))
        return (pts - self.center) @ self.matrix.T + self.center + self.translation

    def invert(self) -> "AffineParams":
        """Exact inverse as another centered affine with the same center."""
        minv = np.linalg.inv(self.matrix)
        return AffineParams(minv, -minv @ self.translation, self.center)

    def to_vector(self) -> np.ndarray:
        """Scaled 12-vector: [matrix entries * LINEAR_SCALE, translation]."""
        return np.concatenate([self.matrix.ravel() * LINEAR_SCALE, self.translation])

    @staticmethod
    def from_vector(vec, center) -> "AffineParams":
        vec = np.asarray(vec, dtype=np.float64)
        return AffineParams(vec[:9].reshape(3, 3) / LINEAR_SCALE, vec[9:12], center)


def euler_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation matrix R = Rz @ Ry @ Rx (radians)."""
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


@dataclass(frozen=True)
class RigidParams:
    """6-DOF rigid map: Euler rotations about the center plus translation."""

    angles: np.ndarray  # (3,) radians
    translation: np.ndarray  # (3,) mm
    center: np.ndarray  # (3,) mm

    def __post_init__(self):
        object.__setattr__(self, "angles", np.asarray(self.angles, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    @staticmethod
    def identity(center=(0.0, 0.0, 0.0)) -> "RigidParams":
        return RigidParams(np.zeros(3), np.zeros(3), np.asarray(center, dtype=np.float64))

    def to_affine(self) -> AffineParams:
        return AffineParams(euler_matrix(*self.angles), self.translation, self.center)

    def __call__(self, points_mm) -> np.ndarray:
        return self.to_affine()(points_mm)

    def to_vector(self) -> np.ndarray:
        """Scaled 6-vector: [angles * LINEAR_SCALE, translation]."""
        return np.concatenate([self.angles * LINEAR_SCALE, self.translation])

    @staticmethod
    def from_vector(vec, center) -> "RigidParams":
        vec = np.asarray(vec, dtype=np.float64)
        return RigidParams(vec[:3] / LINEAR_SCALE, vec[3:6], center)


# ---------------------------------------------------------------------------
# Free-form deformation on a uniform cubic B-spline control grid
# ---------------------------------------------------------------------------


def _bspline3_basis(f):
    """Basis values for the four nodes covering a cell, local coordinate f in [0,1]."""
    f2 = f * f
    f3 = f2 * f
    b0 = (1 - 3 * f + 3 * f2 - f3) / 6.0
    b1 = (4 - 6 * f2 + 3 * f3) / 6.0
    b2 = (1 + 3 * f + 3 * f2 - 3 * f3) / 6.0
    b3 = f3 / 6.0
    return b0, b1, b2, b3


@dataclass(frozen=True)
class BSplineField:
    """Displacement field u(x) on a (mesh+3)^3 control grid spanning a physical box.

    Coefficients are physical mm displacement vectors. Points outside the box are
    evaluated with clamped local coordinates, extending the boundary displacement.
    """

    mesh: tuple  # cells per axis
    domain_origin: np.ndarray  # (3,) mm, first voxel center of the domain
    domain_axes: np.ndarray  # (3,3) orthonormal frame of the domain
    domain_extent: np.ndarray  # (3,) mm, length covered by the mesh
    coeffs: np.ndarray = field(default=None)  # (mesh+3 per axis, 3)

    def __post_init__(self):
        mesh = tuple(int(m) for m in self.mesh)
        if any(m < 1 for m in mesh):
            raise ValueError(f"mesh must be >= 1 per axis, got {mesh}")
        origin = np.asarray(self.domain_origin, dtype=np.float64).reshape(3)
        axes = np.asarray(self.domain_axes, dtype=np.float64).reshape(3, 3)
        extent = np.asarray(self.domain_extent, dtype=np.float64).reshape(3)
        if not np.all(extent > 0):
            raise ValueError(f"domain extent must be positive, got {extent}")
        coeffs = self.coeffs
        shape = (mesh[0] + 3, mesh[1] + 3, mesh[2] + 3, 3)
        if coeffs is None:
            coeffs = np.zeros(shape)
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape != shape:
            raise ValueError(f"coeffs shape {coeffs.shape} != {shape}")
        object.__setattr__(self, "mesh", mesh)
        object.__setattr__(self, "domain_origin", origin)
        object.__setattr__(self, "domain_axes", axes)
        object.__setattr__(self, "domain_extent", extent)
        object.__setattr__(self, "coeffs", coeffs)

    @staticmethod
    def for_volume(vol, mesh=(5, 5, 5)) -> "BSplineField":
        """Zero field whose domain is the voxel-center bounding box of `vol`."""
        extent = (np.array(vol.dims, dtype=np.float64) - 1.0) * vol.spacing
        extent = np.maximum(extent, 1e-6)
        return BSplineField(tuple(mesh), vol.origin, vol.direction, extent)

    @property
    def grid_shape(self):
        return self.coeffs.shape[:3]

    @property
    def n_params(self) -> int:
        return int(np.prod(self.coeffs.shape))

    def with_coeffs(self, coeffs) -> "BSplineField":
        return replace(self, coeffs=np.asarray(coeffs, dtype=np.float64).reshape(self.coeffs.shape))

    def _local(self, points_mm):
        """Continuous cell coordinates in [0, mesh], clamped outside the domain."""
        pts = np.atleast_2d(np.asarray(points_mm, dtype=np.float64))
        q = (pts - self.domain_origin) @ self.domain_axes  # mm along domain axes
        cell_mm = self.domain_extent / np.array(self.mesh, dtype=np.float64)
        p = q / cell_mm
        return np.clip(p, 0.0, np.array(self.mesh, dtype=np.float64))

    def basis_weights(self, points_mm):
        """Sparse basis support at each point.

        Returns (node_flat (N,64) indices into the flattened control grid,
        weights (N,64)). Weights along each axis sum to 1, so each row sums to 1.
        """
        p = self._local(points_mm)
        mesh = np.array(self.mesh)
        cell = np.minimum(np.floor(p).astype(np.int64), mesh - 1)
        f = p - cell

        wx = np.stack(_bspline3_basis(f[:, 0]), axis=1)  # (N,4)
        wy = np.stack(_bspline3_basis(f[:, 1]), axis=1)
        wz = np.stack(_bspline3_basis(f[:, 2]), axis=1)

        # Node array index = grid position + 1; contributing positions cell-1..cell+2
        nx = cell[:, 0:1] + np.arange(4)  # (N,4), array indices already offset by +1 base
        ny = cell[:, 1:2] + np.arange(4)
        nz = cell[:, 2:3] + np.arange(4)

        gx, gy, gz = self.grid_shape
        idx = (nx[:, :, None, None] * gy + ny[:, None, :, None]) * gz + nz[:, None, None, :]
        w = wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]
        return idx.reshape(-1, 64), w.reshape(-1, 64)

    def displacement(self, points_mm) -> np.ndarray:
        """Displacement vectors (N,3) in physical mm."""
        idx, w = self.basis_weights(points_mm)
        flat = self.coeffs.reshape(-1, 3)
        return np.einsum("nk,nkd->nd", w, flat[idx])

    def __call__(self, points_mm) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points_mm, dtype=np.float64))
        return pts + self.displacement(pts)

    def max_displacement_bound(self) -> float:
        """Sup-norm bound: basis is a partition of unity, so |u| <= max |coeff|."""
        return float(np.abs(self.coeffs).max())


@dataclass(frozen=True)
class ComposedTransform:
    """Affine followed by a displacement field: T(x) = A(x) + u(A(x))."""

    affine: AffineParams
    field: BSplineField

    def __call__(self, points_mm) -> np.ndarray:
        moved = self.affine(points_mm)
        return moved + self.field.displacement(moved)


def _invert_field(field, y, iters):
    z = y.copy()
    for _ in range(iters):
        z_next = y - field.displacement(z)
        if np.max(np.abs(z_next - z)) < 1e-9:
            return z_next
        z = z_next
    return z


def inverse_points(transform, points_mm, iters: int = 40) -> np.ndarray:
    """Solve T(x) = y for x at each given y.

    Affine inverses are exact. Displacement fields are inverted by fixed-point
    iteration z <- y - u(z), which converges when the field is a contraction
    (|du/dx| < 1, true for the small bounded fields used here).
    """
    y = np.atleast_2d(np.asarray(points_mm, dtype=np.float64))
    if isinstance(transform, (AffineParams, RigidParams)):
        aff = transform if isinstance(transform, AffineParams) else transform.to_affine()
        return aff.invert()(y)
    if isinstance(transform, BSplineField):
        return _invert_field(transform, y, iters)
    if isinstance(transform, ComposedTransform):
        # y = z + u(z) with z = A(x): invert the field part, then the affine
        return transform.affine.invert()(_invert_field(transform.field, y, iters))
    raise TypeError(f"cannot invert transform of type {type(transform).__name__}")


# ---------------------------------------------------------------------------
# Text serialization (sectioned key: value lines)
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return " ".join("%.17g" % x for x in np.asarray(v, dtype=np.float64).ravel())


def transform_to_text(t) -> str:
    if isinstance(t, RigidParams):
        t = t.to_affine()
    if isinstance(t, AffineParams):
        return (
            "transform: affine\n"
            f"matrix: {_fmt(t.matrix)}\n"
            f"translation: {_fmt(t.translation)}\n"
            f"center: {_fmt(t.center)}\n"
        )
    if isinstance(t, BSplineField):
        return (
            "transform: bspline\n"
            f"mesh: {t.mesh[0]} {t.mesh[1]} {t.mesh[2]}\n"
            f"domain_origin: {_fmt(t.domain_origin)}\n"
            f"domain_axes: {_fmt(t.domain_axes)}\n"
            f"domain_extent: {_fmt(t.domain_extent)}\n"
            f"coeffs: {_fmt(t.coeffs)}\n"
        )
    if isinstance(t, ComposedTransform):
        return "transform: composed\n" + transform_to_text(t.affine) + transform_to_text(t.field)
    raise TypeError(f"cannot serialize transform of type {type(t).__name__}")


def _parse_blocks(text):
    blocks = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        key, _, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if key == "transform":
            blocks.append({"transform": value})
        else:
            blocks[-1][key] = value
    return blocks


def _block_to_transform(block):
    kind = block["transform"]
    if kind == "affine":
        return AffineParams(
            np.array(block["matrix"].split(), dtype=np.float64).reshape(3, 3),
            np.array(block["translation"].split(), dtype=np.float64),
            np.array(block["center"].split(), dtype=np.float64),
        )
    if kind == "bspline":
        mesh = tuple(int(x) for x in block["mesh"].split())
        coeffs = np.array(block["coeffs"].split(), dtype=np.float64)
        return BSplineField(
            mesh,
            np.array(block["domain_origin"].split(), dtype=np.float64),
            np.array(block["domain_axes"].split(), dtype=np.float64).reshape(3, 3),
            np.array(block["domain_extent"].split(), dtype=np.float64),
            coeffs.reshape(mesh[0] + 3, mesh[1] + 3, mesh[2] + 3, 3),
        )
    raise ValueError(f"unknown transform kind {kind!r}")


def transform_from_text(text):
    blocks = _parse_blocks(text)
    if not blocks:
        raise ValueError("no transform block found")
    if blocks[0]["transform"] == "composed":
        return ComposedTransform(_block_to_transform(blocks[1]), _block_to_transform(blocks[2]))
    return _block_to_transform(blocks[0])


def write_transform(t, path):
    with open(path, "w") as fh:
        fh.write(transform_to_text(t))


def read_transform(path):
    with open(path) as fh:
        return transform_from_text(fh.read())

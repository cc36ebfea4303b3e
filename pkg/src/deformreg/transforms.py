"""Linear and dense transforms, warping, composition and Jacobians.

Dense fields store displacements in voxel units of the fixed grid they are
defined on: ``phi(v) = v + u(v)``.  A field pulls the moving image back
onto the fixed grid, so ``warped(v) = moving(phi(v))`` after mapping
through world space when the two grids differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import nibabel as nib
import numpy as np

from . import _kernels
from .errors import InvalidTransformError, NiftiFormatError, ShapeError
from .nifti import INTENT_VECTOR, geometry_from_header, make_image, open_nifti
from .volume import GridGeometry, ImageVolume, LabelVolume

DEFAULT_SQUARING_STEPS = 7


def euler_zyx(angles):
    """Rotation applying the z angle first, then y, then x."""
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


@dataclass(frozen=True, eq=False)
class AffineMatrix:
    """World-space map ``y = linear @ x + translation`` (fixed world -> moving world)."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        lin = np.array(self.linear, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(t))):
            raise InvalidTransformError("affine entries must be finite")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.linear.T + self.translation

    def inverse(self):
        self.check_invertible()
        inv = np.linalg.inv(self.linear)
        return AffineMatrix(inv, -inv @ self.translation)

    def then(self, other):
        """``other ∘ self``: apply self first."""
        return AffineMatrix(other.linear @ self.linear,
                            other.linear @ self.translation + other.translation)

    def check_invertible(self):
        if abs(np.linalg.det(self.linear)) < 1e-12:
            raise InvalidTransformError("singular linear part")


@dataclass(frozen=True)
class RigidParams:
    """Euler ZYX rotation (radians) and translation (mm) about a world center."""

    rotation: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def rotation_matrix(self):
        return euler_zyx(self.rotation)

    def to_affine(self, center):
        """``x -> R (x - c) + c + t`` as an :class:`AffineMatrix`."""
        r = self.rotation_matrix()
        c = np.asarray(center, dtype=float)
        return AffineMatrix(r, c + np.asarray(self.translation, dtype=float) - r @ c)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    geometry: GridGeometry
    vectors: np.ndarray

    def __post_init__(self):
        vec = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if vec.shape != self.geometry.dims + (3,):
            raise ShapeError(f"vector shape {vec.shape} does not match {self.geometry.dims}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("field contains non-finite values")
        vec.flags.writeable = False
        object.__setattr__(self, "vectors", vec)

    @classmethod
    def zeros(cls, geometry):
        return cls(geometry, np.zeros(geometry.dims + (3,)))

    def magnitude(self):
        return np.linalg.norm(self.vectors, axis=-1)

    def __neg__(self):
        return type(self)(self.geometry, -self.vectors)


class VelocityField(DisplacementField):
    """Stationary velocity; its exponential is computed by :func:`integrate_svf`."""


def _as_affine(t, geometry):
    if isinstance(t, RigidParams):
        return t.to_affine(geometry.center)
    if isinstance(t, AffineMatrix):
        return t
    raise TypeError(f"not a linear transform: {type(t).__name__}")


def linear_to_displacement(t, geometry):
    """Dense field of a rigid or affine world transform on ``geometry``."""
    aff = _as_affine(t, geometry)
    aff.check_invertible()
    grid = geometry.grid()
    return DisplacementField(geometry, geometry.voxel(aff.apply(geometry.world(grid))) - grid)


def _voxel_map(src, dst):
    """Affine (3x3, 3) taking src voxel coordinates to dst voxel coordinates."""
    m = np.linalg.inv(dst.affine) @ src.affine
    return m[:3, :3], m[:3, 3]


def sample_points(field, moving_geometry):
    """Moving-grid voxel coordinates of ``v + u(v)`` for every fixed voxel."""
    pts = field.geometry.grid() + field.vectors
    if field.geometry.matches(moving_geometry, tol=1e-12):
        return pts
    a, b = _voxel_map(field.geometry, moving_geometry)
    return pts @ a.T + b


def warp_image(moving, field):
    pts = sample_points(field, moving.geometry).reshape(-1, 3)
    vals = _kernels.trilinear_gather(np.ascontiguousarray(moving.data[..., None]), pts)
    return ImageVolume(field.geometry, vals[:, 0].reshape(field.geometry.dims))


def warp_labels(moving, field):
    pts = sample_points(field, moving.geometry).reshape(-1, 3)
    vals = _kernels.nearest_gather(np.ascontiguousarray(moving.data), pts)
    return LabelVolume(field.geometry, vals.reshape(field.geometry.dims))


def resample_field(field, pts):
    """Trilinear (clamped) interpolation of a field at ``(..., 3)`` voxel points."""
    pts = np.asarray(pts, dtype=float)
    vals = _kernels.trilinear_gather(field.vectors, np.ascontiguousarray(pts.reshape(-1, 3)))
    return vals.reshape(pts.shape)


def compose(outer, inner):
    """Field of ``phi_outer ∘ phi_inner`` on the shared grid."""
    if not outer.geometry.matches(inner.geometry):
        raise ShapeError("cannot compose fields on different grids")
    pts = inner.geometry.grid() + inner.vectors
    return DisplacementField(inner.geometry, inner.vectors + resample_field(outer, pts))


def compose_linear(aff, inner):
    """Exact field of ``T ∘ phi_inner`` for a world-space affine ``T``.

    Unlike :func:`compose` with a rasterized linear field this involves no
    interpolation, so it stays exact outside the grid.
    """
    geom = inner.geometry
    pts = geom.grid() + inner.vectors
    return DisplacementField(geom, geom.voxel(aff.apply(geom.world(pts))) - geom.grid())


def integrate_svf(velocity, steps=DEFAULT_SQUARING_STEPS, return_steps=False):
    """Exponential of a stationary velocity field by scaling and squaring.

    Parameters
    ----------
    velocity : VelocityField or DisplacementField
    steps : int
        Number of squarings; the field is first divided by ``2**steps``.
    return_steps : bool
        Also return the list of intermediate fields (needed by
        :func:`integrate_svf_vjp`).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    u = np.ascontiguousarray(velocity.vectors / 2.0 ** steps)
    history = []
    for _ in range(steps):
        history.append(u)
        u = _kernels.self_compose(u)
    out = DisplacementField(velocity.geometry, u)
    if return_steps:
        return out, history
    return out


def integrate_svf_vjp(history, grad):
    """Gradient w.r.t. the velocity given ``grad`` w.r.t. the integrated field."""
    g = np.ascontiguousarray(grad, dtype=float)
    for u in reversed(history):
        g = _kernels.self_compose_vjp(u, g)
    return g / 2.0 ** len(history)


def jacobian_determinant(field):
    """Per-voxel ``det(I + du/dv)`` in voxel units.

    Central differences inside, one-sided differences on the faces.
    """
    if min(field.geometry.dims) < 3:
        raise ShapeError("jacobian_determinant needs at least 3 voxels per axis")
    u = field.vectors
    jac = np.empty(field.geometry.dims + (3, 3))
    for c in range(3):
        grads = np.gradient(u[..., c], axis=(0, 1, 2), edge_order=1)
        for a in range(3):
            jac[..., c, a] = grads[a]
    jac += np.eye(3)
    det = (jac[..., 0, 0] * (jac[..., 1, 1] * jac[..., 2, 2] - jac[..., 1, 2] * jac[..., 2, 1])
           - jac[..., 0, 1] * (jac[..., 1, 0] * jac[..., 2, 2] - jac[..., 1, 2] * jac[..., 2, 0])
           + jac[..., 0, 2] * (jac[..., 1, 0] * jac[..., 2, 1] - jac[..., 1, 1] * jac[..., 2, 0]))
    return ImageVolume(field.geometry, det)


def save_field(field, path):
    """Write a 5-D (x, y, z, 1, 3) NIfTI vector image in world mm."""
    geom = field.geometry
    m = geom.direction * np.asarray(geom.spacing)[None, :]
    mm = field.vectors @ m.T
    img = make_image(mm[:, :, :, None, :], geom, np.float32, INTENT_VECTOR)
    nib.save(img, str(path))


def load_field(path):
    img = open_nifti(path)
    shape = img.shape
    if len(shape) != 5 or shape[3] != 1 or shape[4] != 3:
        raise NiftiFormatError(f"{path}: expected (x, y, z, 1, 3) vector image, got {shape}")
    geom = geometry_from_header(img.header, tuple(shape[:3]))
    mm = np.asarray(img.dataobj, dtype=np.float64)[:, :, :, 0, :]
    m = geom.direction * np.asarray(geom.spacing)[None, :]
    return DisplacementField(geom, mm @ np.linalg.inv(m).T)

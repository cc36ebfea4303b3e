"""Volumes on a 3D lattice, samplers, smoothing and resampling.

Arrays are indexed ``data[x, y, z]``.  Flattened in Fortran order this is
the x-fastest layout used by NIfTI files; the NIfTI module relies on that
correspondence.  All working data is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import ShapeError


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class GridGeometry:
    """Voxel lattice placed in world (mm) space.

    ``world(v) = origin + direction @ diag(spacing) @ v``
    """

    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        direction = np.array(self.direction, dtype=float).reshape(3, 3)
        if len(dims) != 3 or min(dims) < 1:
            raise ShapeError(f"dims must be three positive integers, got {self.dims}")
        if len(spacing) != 3 or min(spacing) <= 0 or not all(map(math.isfinite, spacing)):
            raise ShapeError(f"spacing must be three positive reals, got {self.spacing}")
        if len(origin) != 3:
            raise ShapeError("origin must have three components")
        norms = np.linalg.norm(direction, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-6) or abs(np.linalg.det(direction)) < 1e-12:
            raise ShapeError("direction must have unit columns and be invertible")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", _frozen(direction))

    @property
    def size(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def affine(self):
        """4x4 voxel-to-world matrix."""
        a = np.eye(4)
        a[:3, :3] = self.direction * np.asarray(self.spacing)[None, :]
        a[:3, 3] = self.origin
        return a

    def world(self, v):
        v = np.asarray(v, dtype=float)
        a = self.affine
        return v @ a[:3, :3].T + a[:3, 3]

    def voxel(self, w):
        w = np.asarray(w, dtype=float)
        inv = np.linalg.inv(self.affine)
        return w @ inv[:3, :3].T + inv[:3, 3]

    @property
    def center(self):
        """World coordinates of the geometric center of the lattice."""
        return self.world((np.asarray(self.dims, dtype=float) - 1.0) / 2.0)

    def grid(self):
        """Voxel coordinates of every lattice point, shape ``dims + (3,)``."""
        axes = [np.arange(d, dtype=float) for d in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def matches(self, other, tol=1e-6):
        return (self.dims == other.dims
                and np.allclose(self.affine, other.affine, rtol=0, atol=tol))

    def with_spacing(self, spacing, dims, origin=None):
        return GridGeometry(dims, spacing, self.origin if origin is None else origin,
                            self.direction)

    def __repr__(self):
        return (f"GridGeometry(dims={self.dims}, spacing={self.spacing}, "
                f"origin={self.origin})")


class _Volume:
    geometry: GridGeometry
    data: np.ndarray

    def _check(self):
        if self.data.shape != self.geometry.dims:
            raise ShapeError(
                f"data shape {self.data.shape} does not match dims {self.geometry.dims}")

    @property
    def shape(self):
        return self.geometry.dims


@dataclass(frozen=True, eq=False)
class ImageVolume(_Volume):
    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", _frozen(data))
        self._check()
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")

    def with_data(self, data):
        return ImageVolume(self.geometry, data)


@dataclass(frozen=True, eq=False)
class LabelVolume(_Volume):
    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype.kind not in "iu":
            if not np.all(data == np.round(data)):
                raise ValueError("label data must be integer valued")
        data = data.astype(np.int32)
        if data.size and data.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "data", _frozen(data))
        self._check()

    def with_data(self, data):
        return LabelVolume(self.geometry, data)

    def labels(self):
        return set(np.unique(self.data).tolist())


def check_same_geometry(a, b):
    if not a.geometry.matches(b.geometry):
        raise ShapeError(f"geometry mismatch: {a.geometry} vs {b.geometry}")


def sample_trilinear(volume, p):
    """Trilinear value at continuous voxel coordinate ``p`` (clamped to the grid)."""
    pts = np.asarray(p, dtype=float).reshape(1, 3)
    return float(_kernels.trilinear_gather(volume.data[..., None], pts)[0, 0])


def sample_nearest(volume, p):
    """Label of the nearest lattice point; ties at .5 round up on each axis."""
    pts = np.asarray(p, dtype=float).reshape(1, 3)
    return int(_kernels.nearest_gather(volume.data, pts)[0])


def trilinear_points(data, pts):
    """Vectorized trilinear sampling of a 3D array at ``(..., 3)`` voxel points."""
    pts = np.asarray(pts, dtype=float)
    flat = np.ascontiguousarray(pts.reshape(-1, 3))
    vals = _kernels.trilinear_gather(np.ascontiguousarray(data[..., None], dtype=float), flat)
    return vals[:, 0].reshape(pts.shape[:-1])


def nearest_points(data, pts):
    pts = np.asarray(pts, dtype=float)
    flat = np.ascontiguousarray(pts.reshape(-1, 3))
    return _kernels.nearest_gather(np.ascontiguousarray(data), flat).reshape(pts.shape[:-1])


def gaussian_kernel(sigma):
    """Normalized 1D Gaussian truncated at radius ``ceil(3 sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_array(data, sigma):
    out = np.asarray(data, dtype=float)
    for axis, s in enumerate(sigma):
        if s < 0:
            raise ValueError("sigma must be non-negative")
        if s == 0:
            continue
        out = ndimage.correlate1d(out, gaussian_kernel(s), axis=axis, mode="nearest")
    return out


def gaussian_smooth(volume, sigma):
    """Separable Gaussian smoothing with border replication.

    Parameters
    ----------
    volume : ImageVolume
    sigma : float or triple of float
        Standard deviation per axis in voxels.  Zero leaves that axis alone.
    """
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (3,))
    return volume.with_data(smooth_array(volume.data, sigma))


def resample_iso(volume, target_spacing):
    """Resample onto an isotropic grid of ``target_spacing`` mm.

    The new grid shares the outer voxel edge of the old one at the origin
    corner, so the world extent is kept up to one new voxel.  Images are
    interpolated trilinearly, labels by nearest neighbour.
    """
    if target_spacing <= 0:
        raise ValueError("target_spacing must be positive")
    geom = volume.geometry
    old_sp = np.asarray(geom.spacing)
    dims = tuple(int(math.ceil(n * s / target_spacing - 1e-9))
                 for n, s in zip(geom.dims, old_sp))
    # first new voxel center sits half a new voxel inside the old corner edge
    start_vox = (target_spacing / old_sp - 1.0) / 2.0
    new_origin = geom.world(start_vox)
    new_geom = GridGeometry(dims, (target_spacing,) * 3, new_origin, geom.direction)
    pts = geom.voxel(new_geom.world(new_geom.grid()))
    if isinstance(volume, LabelVolume):
        return LabelVolume(new_geom, nearest_points(volume.data, pts))
    return ImageVolume(new_geom, trilinear_points(volume.data, pts))


def pyramid_level(volume, shrink, sigma):
    """Smooth by ``sigma`` voxels then keep every ``shrink``-th voxel from index 0."""
    shrink = int(shrink)
    if shrink < 1:
        raise ValueError("shrink must be >= 1")
    smoothed = gaussian_smooth(volume, sigma) if sigma > 0 else volume
    data = smoothed.data[::shrink, ::shrink, ::shrink]
    geom = volume.geometry
    new_geom = GridGeometry(data.shape, tuple(s * shrink for s in geom.spacing),
                            geom.origin, geom.direction)
    return ImageVolume(new_geom, data)

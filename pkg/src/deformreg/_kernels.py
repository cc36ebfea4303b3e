"""Compiled inner loops for interpolation and its adjoint.

All kernels operate on arrays indexed ``[x, y, z, channel]`` and on point
lists of shape ``(N, 3)`` expressed in voxel coordinates of the sampled
array.  Out-of-bounds coordinates are clamped to the grid (border
replication); the spatial derivative is zero along an axis on which the
point was clamped.  Loops are serial so results never depend on thread
scheduling.
"""

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _axis(p, n):
    # returns (i0, i1, t, inside)
    if n == 1:
        return 0, 0, 0.0, 0.0
    if p < 0.0:
        return 0, 1, 0.0, 0.0
    if p > n - 1:
        return n - 2, n - 1, 1.0, 0.0
    i0 = int(np.floor(p))
    if i0 > n - 2:
        i0 = n - 2
    return i0, i0 + 1, p - i0, 1.0


@numba.njit(cache=True)
def trilinear_gather(vol, pts):
    nx, ny, nz, nc = vol.shape
    npts = pts.shape[0]
    out = np.zeros((npts, nc))
    for k in range(npts):
        x0, x1, tx, _ = _axis(pts[k, 0], nx)
        y0, y1, ty, _ = _axis(pts[k, 1], ny)
        z0, z1, tz, _ = _axis(pts[k, 2], nz)
        sx = 1.0 - tx
        sy = 1.0 - ty
        sz = 1.0 - tz
        w000 = sx * sy * sz
        w100 = tx * sy * sz
        w010 = sx * ty * sz
        w110 = tx * ty * sz
        w001 = sx * sy * tz
        w101 = tx * sy * tz
        w011 = sx * ty * tz
        w111 = tx * ty * tz
        for c in range(nc):
            out[k, c] = (w000 * vol[x0, y0, z0, c] + w100 * vol[x1, y0, z0, c]
                         + w010 * vol[x0, y1, z0, c] + w110 * vol[x1, y1, z0, c]
                         + w001 * vol[x0, y0, z1, c] + w101 * vol[x1, y0, z1, c]
                         + w011 * vol[x0, y1, z1, c] + w111 * vol[x1, y1, z1, c])
    return out


@numba.njit(cache=True)
def trilinear_gather_grad(vol, pts):
    """Values ``(N, C)`` and spatial derivatives ``(N, C, 3)``."""
    nx, ny, nz, nc = vol.shape
    npts = pts.shape[0]
    out = np.zeros((npts, nc))
    grad = np.zeros((npts, nc, 3))
    for k in range(npts):
        x0, x1, tx, ix = _axis(pts[k, 0], nx)
        y0, y1, ty, iy = _axis(pts[k, 1], ny)
        z0, z1, tz, iz = _axis(pts[k, 2], nz)
        sx = 1.0 - tx
        sy = 1.0 - ty
        sz = 1.0 - tz
        for c in range(nc):
            v000 = vol[x0, y0, z0, c]
            v100 = vol[x1, y0, z0, c]
            v010 = vol[x0, y1, z0, c]
            v110 = vol[x1, y1, z0, c]
            v001 = vol[x0, y0, z1, c]
            v101 = vol[x1, y0, z1, c]
            v011 = vol[x0, y1, z1, c]
            v111 = vol[x1, y1, z1, c]
            out[k, c] = (sx * sy * sz * v000 + tx * sy * sz * v100
                         + sx * ty * sz * v010 + tx * ty * sz * v110
                         + sx * sy * tz * v001 + tx * sy * tz * v101
                         + sx * ty * tz * v011 + tx * ty * tz * v111)
            grad[k, c, 0] = ix * (sy * sz * (v100 - v000) + ty * sz * (v110 - v010)
                                  + sy * tz * (v101 - v001) + ty * tz * (v111 - v011))
            grad[k, c, 1] = iy * (sx * sz * (v010 - v000) + tx * sz * (v110 - v100)
                                  + sx * tz * (v011 - v001) + tx * tz * (v111 - v101))
            grad[k, c, 2] = iz * (sx * sy * (v001 - v000) + tx * sy * (v101 - v100)
                                  + sx * ty * (v011 - v010) + tx * ty * (v111 - v110))
    return out, grad


@numba.njit(cache=True)
def trilinear_scatter(pts, g, shape):
    """Adjoint of :func:`trilinear_gather` with respect to the volume."""
    nx, ny, nz = shape[0], shape[1], shape[2]
    nc = g.shape[1]
    out = np.zeros((nx, ny, nz, nc))
    for k in range(pts.shape[0]):
        x0, x1, tx, _ = _axis(pts[k, 0], nx)
        y0, y1, ty, _ = _axis(pts[k, 1], ny)
        z0, z1, tz, _ = _axis(pts[k, 2], nz)
        sx = 1.0 - tx
        sy = 1.0 - ty
        sz = 1.0 - tz
        for c in range(nc):
            gc = g[k, c]
            out[x0, y0, z0, c] += sx * sy * sz * gc
            out[x1, y0, z0, c] += tx * sy * sz * gc
            out[x0, y1, z0, c] += sx * ty * sz * gc
            out[x1, y1, z0, c] += tx * ty * sz * gc
            out[x0, y0, z1, c] += sx * sy * tz * gc
            out[x1, y0, z1, c] += tx * sy * tz * gc
            out[x0, y1, z1, c] += sx * ty * tz * gc
            out[x1, y1, z1, c] += tx * ty * tz * gc
    return out


@numba.njit(cache=True)
def nearest_gather(vol, pts):
    nx, ny, nz = vol.shape
    out = np.empty(pts.shape[0], dtype=vol.dtype)
    for k in range(pts.shape[0]):
        i = int(np.floor(pts[k, 0] + 0.5))
        j = int(np.floor(pts[k, 1] + 0.5))
        m = int(np.floor(pts[k, 2] + 0.5))
        i = min(max(i, 0), nx - 1)
        j = min(max(j, 0), ny - 1)
        m = min(max(m, 0), nz - 1)
        out[k] = vol[i, j, m]
    return out


@numba.njit(cache=True)
def self_compose(u):
    """One squaring step: ``u(x) + u(x + u(x))`` on a ``(nx, ny, nz, 3)`` field."""
    nx, ny, nz, _ = u.shape
    out = np.empty_like(u)
    for i in range(nx):
        for j in range(ny):
            for m in range(nz):
                x0, x1, tx, _ = _axis(i + u[i, j, m, 0], nx)
                y0, y1, ty, _ = _axis(j + u[i, j, m, 1], ny)
                z0, z1, tz, _ = _axis(m + u[i, j, m, 2], nz)
                sx = 1.0 - tx
                sy = 1.0 - ty
                sz = 1.0 - tz
                for c in range(3):
                    out[i, j, m, c] = u[i, j, m, c] + (
                        sz * (sy * (sx * u[x0, y0, z0, c] + tx * u[x1, y0, z0, c])
                              + ty * (sx * u[x0, y1, z0, c] + tx * u[x1, y1, z0, c]))
                        + tz * (sy * (sx * u[x0, y0, z1, c] + tx * u[x1, y0, z1, c])
                                + ty * (sx * u[x0, y1, z1, c] + tx * u[x1, y1, z1, c])))
    return out


@numba.njit(cache=True)
def self_compose_vjp(u, g):
    """Pull a gradient back through one squaring step.

    Given ``g = dL/dw`` for ``w = u + u∘(Id + u)``, returns ``dL/du``.
    """
    nx, ny, nz, _ = u.shape
    out = g.copy()
    for i in range(nx):
        for j in range(ny):
            for m in range(nz):
                x0, x1, tx, ix = _axis(i + u[i, j, m, 0], nx)
                y0, y1, ty, iy = _axis(j + u[i, j, m, 1], ny)
                z0, z1, tz, iz = _axis(m + u[i, j, m, 2], nz)
                sx = 1.0 - tx
                sy = 1.0 - ty
                sz = 1.0 - tz
                dx = 0.0
                dy = 0.0
                dz = 0.0
                for c in range(3):
                    gc = g[i, j, m, c]
                    if gc == 0.0:
                        continue
                    v000 = u[x0, y0, z0, c]
                    v100 = u[x1, y0, z0, c]
                    v010 = u[x0, y1, z0, c]
                    v110 = u[x1, y1, z0, c]
                    v001 = u[x0, y0, z1, c]
                    v101 = u[x1, y0, z1, c]
                    v011 = u[x0, y1, z1, c]
                    v111 = u[x1, y1, z1, c]
                    dx += gc * ix * (sy * sz * (v100 - v000) + ty * sz * (v110 - v010)
                                     + sy * tz * (v101 - v001) + ty * tz * (v111 - v011))
                    dy += gc * iy * (sx * sz * (v010 - v000) + tx * sz * (v110 - v100)
                                     + sx * tz * (v011 - v001) + tx * tz * (v111 - v101))
                    dz += gc * iz * (sx * sy * (v001 - v000) + tx * sy * (v101 - v100)
                                     + sx * ty * (v011 - v010) + tx * ty * (v111 - v110))
                    # adjoint of the interpolation with respect to the sampled field
                    out[x0, y0, z0, c] += sx * sy * sz * gc
                    out[x1, y0, z0, c] += tx * sy * sz * gc
                    out[x0, y1, z0, c] += sx * ty * sz * gc
                    out[x1, y1, z0, c] += tx * ty * sz * gc
                    out[x0, y0, z1, c] += sx * sy * tz * gc
                    out[x1, y0, z1, c] += tx * sy * tz * gc
                    out[x0, y1, z1, c] += sx * ty * tz * gc
                    out[x1, y1, z1, c] += tx * ty * tz * gc
                out[i, j, m, 0] += dx
                out[i, j, m, 1] += dy
                out[i, j, m, 2] += dz
    return out

"""Similarity metrics, the smoothness penalty and the registration loss.

The registration loss is ``-LNCC(f, m∘phi) + lambda * R(u)`` where ``R`` is
the mean squared forward difference of the displacement.  Gradients are
analytic: the LNCC derivative is pushed through the box-window moments,
then through the trilinear sampler's spatial derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d

from . import _kernels
from .errors import ShapeError
from .transforms import _voxel_map
from .volume import check_same_geometry


@dataclass(frozen=True)
class LossConfig:
    lncc_window: int = 9
    lam: float = 1.0
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.lncc_window < 3 or self.lncc_window % 2 == 0:
            raise ValueError("lncc_window must be odd and >= 3")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def box_mean(a, window):
    """Moving-window mean on every axis with border replication."""
    for axis in range(a.ndim):
        a = uniform_filter1d(a, window, axis=axis, mode="nearest")
    return a


def box_mean_adjoint(g, window):
    """Transpose of :func:`box_mean`: spread, then fold the padding back onto the border."""
    r = window // 2
    for axis in range(g.ndim):
        n = g.shape[axis]
        width = [(0, 0)] * g.ndim
        width[axis] = (r, r)
        padded = uniform_filter1d(np.pad(g, width), window, axis=axis, mode="constant")
        g = np.take(padded, np.arange(r, r + n), axis=axis)
        lo = np.take(padded, np.arange(0, r), axis=axis).sum(axis=axis)
        hi = np.take(padded, np.arange(r + n, n + 2 * r), axis=axis).sum(axis=axis)
        idx = [slice(None)] * g.ndim
        idx[axis] = 0
        g[tuple(idx)] += lo
        idx[axis] = n - 1
        g[tuple(idx)] += hi
    return g


def _local_moments(f, m, window):
    mf = box_mean(f, window)
    mm = box_mean(m, window)
    var_f = box_mean(f * f, window) - mf * mf
    var_m = box_mean(m * m, window) - mm * mm
    cov = box_mean(f * m, window) - mf * mm
    return mf, mm, var_f, var_m, cov


def _lncc_arrays(f, m, window, epsilon, grad=False):
    mf, mm, var_f, var_m, cov = _local_moments(f, m, window)
    denom = var_f * var_m + epsilon
    cc = cov * cov / denom
    value = float(cc.mean())
    if not grad:
        return value
    # d cc / d m(x), summed over the windows containing x
    n = cc.size
    alpha = 2.0 * cov / denom / n
    beta = -cov * cov * var_f / (denom * denom) / n
    g = (f * box_mean_adjoint(alpha, window) - box_mean_adjoint(alpha * mf, window)
         + 2.0 * m * box_mean_adjoint(beta, window)
         - 2.0 * box_mean_adjoint(beta * mm, window))
    return value, g


def lncc(f, m, window=9, epsilon=1e-5):
    """Mean squared local normalized cross-correlation.

    Each voxel scores ``cov^2 / (var_f * var_m + epsilon)`` over a cubic box
    of edge ``window`` (border replicated); the result is the mean over
    voxels.  Flat regions score 0.
    """
    check_same_geometry(f, m)
    return _lncc_arrays(f.data, m.data, window, epsilon)


def _forward_diffs(u):
    return [np.diff(u, axis=a) for a in range(3)]


def l2_gradient_penalty(u):
    """Squared forward differences of the displacement.

    For each axis, the mean over voxels with a forward neighbour and over the
    three components; the three axis means are summed.
    """
    vec = u.vectors
    if min(vec.shape[:3]) < 2:
        raise ShapeError("penalty needs at least 2 voxels per axis")
    return float(sum((d * d).mean() for d in _forward_diffs(vec)))


def l2_gradient_penalty_grad(vec):
    g = np.zeros_like(vec)
    for a, d in enumerate(_forward_diffs(vec)):
        scale = 2.0 / d.size
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        g[tuple(hi)] += scale * d
        g[tuple(lo)] -= scale * d
    return g


def _warp_with_grad(f_geom, m, vectors, voxel_map=None):
    """Moving image at ``v + u(v)`` and its derivative with respect to ``u``.

    ``voxel_map`` is an affine ``(a, b)`` from fixed-voxel to moving-voxel
    coordinates; by default it follows from the two grid geometries.
    """
    pts = f_geom.grid() + vectors
    if voxel_map is None:
        voxel_map = (np.eye(3), np.zeros(3))
        if not f_geom.matches(m.geometry, tol=1e-12):
            voxel_map = _voxel_map(f_geom, m.geometry)
    a, b = voxel_map
    pts = pts @ a.T + b
    vals, spatial = _kernels.trilinear_gather_grad(
        np.ascontiguousarray(m.data[..., None]), np.ascontiguousarray(pts.reshape(-1, 3)))
    warped = vals[:, 0].reshape(f_geom.dims)
    # chain rule through the fixed-voxel -> moving-voxel map
    dwarp = (spatial[:, 0, :] @ a).reshape(f_geom.dims + (3,))
    return warped, dwarp


def loss_terms(f, m, u, config):
    """``(total, similarity, regularizer)`` where similarity is the LNCC."""
    from .transforms import warp_image

    warped = warp_image(m, u)
    sim = lncc(f, warped, config.lncc_window, config.epsilon)
    reg = l2_gradient_penalty(u)
    return -sim + config.lam * reg, sim, reg


def composite_loss(f, m, u, config):
    return loss_terms(f, m, u, config)[0]


def loss_and_gradient(f, m, u, config, voxel_map=None):
    """Loss terms and the gradient with respect to every component of ``u``.

    Returns ``((total, similarity, regularizer), gradient)`` where gradient has
    the shape of ``u.vectors``.  ``voxel_map`` optionally places a fixed
    affine between the deformation and the moving grid (see
    :func:`_warp_with_grad`).
    """
    if not f.geometry.matches(u.geometry):
        raise ShapeError("field must live on the fixed grid")
    warped, dwarp = _warp_with_grad(f.geometry, m, u.vectors, voxel_map)
    sim, dsim = _lncc_arrays(f.data, warped, config.lncc_window, config.epsilon, grad=True)
    reg = l2_gradient_penalty(u)
    grad = -dsim[..., None] * dwarp
    if config.lam:
        grad += config.lam * l2_gradient_penalty_grad(u.vectors)
    return (-sim + config.lam * reg, sim, reg), grad


def composite_loss_gradient(f, m, u, config):
    return loss_and_gradient(f, m, u, config)[1]


def mse(f, m):
    check_same_geometry(f, m)
    return float(np.mean((f.data - m.data) ** 2))


def _bin_coords(a, bins):
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.int64), np.zeros(a.shape)
    x = (a - lo) / (hi - lo) * (bins - 1)
    i0 = np.minimum(np.floor(x).astype(np.int64), bins - 2)
    return i0, x - i0


def joint_histogram(a, b, bins=32):
    """Partial-volume joint histogram (probabilities) of two equal-size arrays."""
    ia, ta = _bin_coords(np.ravel(a), bins)
    ib, tb = _bin_coords(np.ravel(b), bins)
    hist = np.zeros(bins * bins)
    for da, wa in ((0, 1.0 - ta), (1, ta)):
        for db, wb in ((0, 1.0 - tb), (1, tb)):
            hist += np.bincount((ia + da) * bins + ib + db, weights=wa * wb,
                                minlength=bins * bins)[: bins * bins]
    hist = hist.reshape(bins, bins)
    return hist / hist.sum()


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def entropy(a, bins=32):
    """Partial-volume marginal entropy in nats (same binning as the MI)."""
    return _entropy(joint_histogram(a, a, bins).sum(axis=1))


def mutual_information_arrays(a, b, bins=32):
    p = joint_histogram(a, b, bins)
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    return max(_entropy(pa) + _entropy(pb) - _entropy(p), 0.0)


def mutual_information(f, m, bins=32, mask=None):
    """Mutual information (nats) from a linearly weighted joint histogram.

    Each image is binned over its own intensity range into ``bins``
    equal-width bins; a voxel splits its unit mass between the two nearest
    bin centres on each axis.
    """
    check_same_geometry(f, m)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    a, b = f.data, m.data
    if mask is not None:
        a, b = a[mask], b[mask]
    return mutual_information_arrays(a, b, bins)

"""Synthetic brain-like phantoms with known deformations.

A phantom is a set of nested, slightly offset and tilted ellipsoids.  Label
``k`` occupies the inside of ellipsoid ``k`` minus ellipsoid ``k + 1``;
label 0 is background.  Because the geometry is analytic, deformed copies
are rendered by evaluating the continuous label function at pulled-back
points, so ground-truth correspondences carry no rasterization error of
their own.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InputError
from .transforms import (
    AffineMatrix,
    DisplacementField,
    VelocityField,
    compose_linear,
    euler_zyx,
    integrate_svf,
    resample_field,
)
from .volume import GridGeometry, ImageVolume, LabelVolume, smooth_array

# sub-voxel samples per axis and extra blur for rendered intensities
_SUPERSAMPLE = 3
_PV_SIGMA = 0.5
# angular frequency and count of the sinusoids that fold every surface
_FOLD_FREQUENCY = 8.0
_FOLD_TERMS = 6


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    region_count: int = 6
    noise_sigma: float = 0.02
    seed: int = 0
    spacing: float = 1.5
    intensity_range: float = 1.0
    # relative radial amplitude of the gyrus-like surface folds
    folding: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise InputError("phantom dims must be >= 16 per axis")
        if self.region_count < 2:
            raise InputError("region_count must be >= 2")
        if self.noise_sigma < 0:
            raise InputError("noise_sigma must be non-negative")
        if not 0 <= self.folding <= 0.3:
            raise InputError("folding must lie in [0, 0.3]")
        if self.spacing <= 0 or self.intensity_range <= 0:
            raise InputError("spacing and intensity_range must be positive")


@dataclass(frozen=True, eq=False)
class Folds:
    """Zero-mean radial modulation ``1 + amplitude * B(d)`` over unit directions."""

    amplitude: float
    freqs: np.ndarray  # (K, 3)
    phases: np.ndarray  # (K,)

    def __call__(self, d):
        if self.amplitude == 0:
            return np.ones(d.shape[:-1])
        k = np.linalg.norm(self.freqs, axis=1)
        # subtract the sphere average sin(phi) * sin|w| / |w| of each term
        mean = np.sin(self.phases) * np.sin(k) / k
        b = np.sin(d @ self.freqs.T + self.phases) - mean
        return 1.0 + self.amplitude * b.mean(axis=-1)


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    center: np.ndarray  # voxel coordinates
    axes: np.ndarray  # semi-axes, voxels
    rotation: np.ndarray
    folds: Folds = None

    def radius(self, pts):
        """Normalized radius: < 1 inside, 1 on the (folded) surface."""
        local = (np.asarray(pts, dtype=float) - self.center) @ self.rotation
        q = local / self.axes
        r = np.sqrt(np.sum(q * q, axis=-1))
        if self.folds is None:
            return r
        d = q / np.where(r > 0, r, 1.0)[..., None]
        return r / self.folds(d)

    def surface_point(self, direction):
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        scale = 1.0 if self.folds is None else float(self.folds(d[None])[0])
        return self.center + self.rotation @ (self.axes * d * scale)

    @property
    def volume(self):
        """Volume of the unfolded ellipsoid (folds change it only to second order)."""
        return 4.0 / 3.0 * np.pi * float(np.prod(self.axes))


@dataclass(eq=False)
class Phantom:
    """Rendered phantom; unpacks as ``(image, labels, landmarks)``."""

    spec: PhantomSpec
    geometry: GridGeometry
    ellipsoids: list
    intensities: np.ndarray
    image: ImageVolume = None
    labels: LabelVolume = None
    landmarks: np.ndarray = None

    def __iter__(self):
        return iter((self.image, self.labels, self.landmarks))

    def label_at(self, pts):
        """Continuous label function at ``(..., 3)`` voxel points."""
        pts = np.asarray(pts, dtype=float)
        lab = np.zeros(pts.shape[:-1], dtype=np.int32)
        for k, e in enumerate(self.ellipsoids, start=1):
            lab[e.radius(pts) <= 1.0] = k
        return lab

    def _partial_volume(self, pts):
        # average the piecewise-constant intensity over sub-voxel samples, with
        # the sample offsets pushed through the local Jacobian of ``pts``
        jac = np.stack(np.gradient(pts, axis=(0, 1, 2)), axis=-1)
        offsets = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE - 0.5
        acc = np.zeros(pts.shape[:-1])
        for dx in offsets:
            for dy in offsets:
                for dz in offsets:
                    sub = pts + jac @ np.array([dx, dy, dz])
                    acc += self.intensities[self.label_at(sub)]
        return smooth_array(acc / _SUPERSAMPLE ** 3, (_PV_SIGMA,) * 3)

    def render(self, pts, seed):
        """Labels and noisy intensities for voxel points shaped like the grid."""
        clean = self._partial_volume(pts)
        rng = np.random.default_rng(seed)
        sigma = self.spec.noise_sigma * self.spec.intensity_range
        noisy = clean + sigma * rng.standard_normal(clean.shape)
        return (ImageVolume(self.geometry, noisy),
                LabelVolume(self.geometry, self.label_at(pts)))

    def region_table(self):
        from .evaluation import RegionTable

        tissues = ("WM", "GM", "CSF")
        return RegionTable([(frozenset([k]), f"shell_{k}", tissues[(k - 1) % 3])
                            for k in range(1, self.spec.region_count + 1)])


def _intensity_levels(n, top):
    levels = np.linspace(0.3, 1.0, n)
    order = list(range(0, n, 2)) + list(range(1, n, 2))
    out = np.empty(n + 1)
    out[0] = 0.0
    out[1:] = levels[order] * top
    return out


def generate_phantom(spec=None):
    """Render a nested-ellipsoid phantom deterministically from ``spec.seed``.

    Shells shrink linearly from the outermost ellipsoid to 3/8 of its size.
    All surfaces share one fold pattern, like sulci cutting through every
    layer, which makes motion along the surfaces observable.
    """
    spec = spec or PhantomSpec()
    rng = np.random.default_rng(spec.seed)
    dims = np.asarray(spec.dims, dtype=float)
    center = (dims - 1.0) / 2.0
    outer = dims * np.array([0.42, 0.38, 0.35])
    n = spec.region_count
    dirs = rng.standard_normal((_FOLD_TERMS, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    folds = Folds(spec.folding, dirs * _FOLD_FREQUENCY, rng.uniform(0, 2 * np.pi, _FOLD_TERMS))
    ellipsoids = []
    for k in range(n):
        frac = 1.0 - 0.625 * k / (n - 1)
        if k == 0:
            offset = np.zeros(3)
            rot = np.eye(3)
        else:
            # shifts stay well inside the gap to the enclosing shell
            gap = 0.625 / (n - 1) * outer.min()
            offset = rng.uniform(-0.1, 0.1, 3) * gap
            rot = euler_zyx(rng.uniform(-0.03, 0.03, 3))
        ellipsoids.append(Ellipsoid(center + offset, outer * frac, rot, folds))
    geom = GridGeometry(spec.dims, (spec.spacing,) * 3)
    ph = Phantom(spec, geom, ellipsoids, _intensity_levels(n, spec.intensity_range))
    ph.image, ph.labels = ph.render(geom.grid(), seed=spec.seed + 7919)
    ph.landmarks = np.array([ellipsoids[i % n].surface_point(rng.standard_normal(3))
                             for i in range(20)])
    return ph


def smooth_velocity(geometry, max_disp, smoothness_sigma, seed):
    """Gaussian-smoothed white-noise velocity rescaled to ``max |v| = max_disp``."""
    if max_disp < 0:
        raise InputError("max_disp must be non-negative")
    if max_disp == 0:
        return VelocityField(geometry, np.zeros(geometry.dims + (3,)))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(geometry.dims + (3,))
    # periodic smoothing keeps the field statistically uniform up to the border
    v = ndimage.gaussian_filter(noise, (smoothness_sigma,) * 3 + (0.0,), mode="wrap")
    v *= max_disp / np.linalg.norm(v, axis=-1).max()
    return VelocityField(geometry, v)


def generate_smooth_deformation(geometry, max_disp, smoothness_sigma, seed):
    """Folding-free smooth displacement (exponential of a smooth velocity)."""
    return integrate_svf(smooth_velocity(geometry, max_disp, smoothness_sigma, seed))


@dataclass(eq=False)
class PhantomPair:
    """Fixed/moving pair with the true fixed-to-moving field.

    ``true_field`` maps fixed voxels to corresponding moving voxels, i.e.
    the field a perfect registration would return.
    """

    fixed: ImageVolume
    fixed_labels: LabelVolume
    moving: ImageVolume
    moving_labels: LabelVolume
    true_field: DisplacementField
    landmarks: np.ndarray
    phantom: Phantom = None


def make_pair(phantom, max_disp=5.0, smoothness_sigma=12.0, seed=1, linear=None):
    """Deform ``phantom`` by a smooth SVF and an optional world affine.

    The moving image is ``fixed ∘ psi^-1`` with ``psi = linear ∘ exp(v)``;
    it is rendered analytically with fresh noise.
    """
    geom = phantom.geometry
    vel = smooth_velocity(geom, max_disp, smoothness_sigma, seed)
    fwd = integrate_svf(vel)
    inv = integrate_svf(-vel)
    grid = geom.grid()
    pts = grid
    if linear is not None:
        pts = geom.voxel(linear.inverse().apply(geom.world(pts)))
    pts = pts + resample_field(inv, pts)
    moving, moving_labels = phantom.render(pts, seed=seed + 104729)
    true = compose_linear(linear, fwd) if linear is not None else fwd
    return PhantomPair(phantom.image, phantom.labels, moving, moving_labels, true,
                       phantom.landmarks, phantom)


def _growth_velocity(phantom, region, scale, margin):
    e = phantom.ellipsoids[region - 1]
    grid = phantom.geometry.grid()
    rho = e.radius(grid)
    inner = max(scale, 1.0)
    outer = inner + margin
    t = np.clip((rho - inner) / (outer - inner), 0.0, 1.0)
    weight = 0.5 * (1.0 + np.cos(np.pi * t))  # 1 inside, smooth roll-off to 0
    v = np.log(scale) * (grid - e.center) * weight[..., None]
    return VelocityField(phantom.geometry, v)


def simulate_growth(phantom, region, scale, seed=0, margin=0.6):
    """Radially expand one region by ``scale`` and render the grown phantom.

    Returns ``(image, labels, field)`` where ``field`` registers the grown
    phantom (as fixed) to the original (as moving): ``original ∘ (Id + field)``
    reproduces the grown anatomy.
    """
    if scale <= 0:
        raise InputError("scale must be positive")
    if not 1 <= region <= len(phantom.ellipsoids):
        raise InputError(f"region {region} not present in phantom")
    vel = _growth_velocity(phantom, region, scale, margin)
    back = integrate_svf(-vel)
    grid = phantom.geometry.grid()
    if scale == 1.0:
        return phantom.image, phantom.labels, back
    image, labels = phantom.render(grid + back.vectors, seed=seed + 15485863)
    return image, labels, back


def growth_inverse(phantom, region, scale, margin=0.6):
    """Forward growth field, the inverse of the one returned by :func:`simulate_growth`."""
    return integrate_svf(_growth_velocity(phantom, region, scale, margin))


def landmark_errors(field, landmarks, true_field):
    """Per-landmark Euclidean error (voxels) between two fields."""
    est = resample_field(field, landmarks)
    ref = resample_field(true_field, landmarks)
    return np.linalg.norm(est - ref, axis=-1)


def write_landmarks(landmarks, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "z"])
        for i, p in enumerate(landmarks):
            w.writerow([i, *(repr(float(c)) for c in p)])


def read_landmarks(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])


def random_linear(geometry, rotation_deg, translation_vox, scales=(1.0, 1.0, 1.0)):
    """World affine about the grid center: anisotropic scale, then ZYX rotation, then shift."""
    rot = euler_zyx(np.deg2rad(np.asarray(rotation_deg, dtype=float)))
    lin = rot @ np.diag(scales)
    c = geometry.center
    t = np.asarray(translation_vox, dtype=float) * np.asarray(geometry.spacing)
    return AffineMatrix(lin, c + t - lin @ c)

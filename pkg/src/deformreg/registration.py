"""Linear initialization stages and deformable instance optimization."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DivergenceError, RegistrationFailedError
from .objectives import LossConfig, loss_and_gradient, mutual_information_arrays
from .transforms import (
    AffineMatrix,
    DisplacementField,
    RigidParams,
    VelocityField,
    compose_linear,
    integrate_svf,
    integrate_svf_vjp,
)
from .volume import ImageVolume, pyramid_level

log = logging.getLogger(__name__)

PRESETS = ("NR", "RR", "RAR")


@dataclass(frozen=True)
class LinearStageConfig:
    kind: str = "rigid"
    step: float = 0.1
    iterations_per_level: tuple = (500, 250, 100)
    shrink_factors: tuple = (4, 2, 1)
    smoothing_sigmas: tuple = (2.0, 1.0, 0.0)
    convergence_threshold: float = 1e-6
    convergence_window: int = 10
    metric: str = "mi"
    bins: int = 32

    def __post_init__(self):
        for name in ("iterations_per_level", "shrink_factors", "smoothing_sigmas"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n = len(self.iterations_per_level)
        if not (n == len(self.shrink_factors) == len(self.smoothing_sigmas)) or n == 0:
            raise ValueError("per-level lists must share one non-zero length")
        if any(a < b for a, b in zip(self.shrink_factors, self.shrink_factors[1:])):
            raise ValueError("shrink factors must be non-increasing")
        if self.convergence_window < 2:
            raise ValueError("convergence_window must be >= 2")
        if self.kind not in ("rigid", "affine"):
            raise ValueError(f"unknown linear stage kind {self.kind!r}")
        if self.metric not in ("mi", "mse"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class DeformableConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    # Adam step in voxels per iteration (field values, not network weights)
    learning_rate: float = 0.1
    iterations: int = 500
    parameterization: str = "svf"
    squaring_steps: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.parameterization not in ("displacement", "svf"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")


@dataclass
class RegistrationResult:
    field: DisplacementField
    linear: AffineMatrix | None = None
    loss_trace: list = field(default_factory=list)
    similarity_trace: list = field(default_factory=list)
    regularizer_trace: list = field(default_factory=list)
    wall_time: float = 0.0
    stage_times: dict = field(default_factory=dict)

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "similarity_term", "regularizer_term"])
            for i, row in enumerate(zip(self.loss_trace, self.similarity_trace,
                                        self.regularizer_trace)):
                w.writerow([i, *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# linear stage


def _world_bounds(geom):
    corners = np.array([[i, j, k] for i in (-0.5, geom.dims[0] - 0.5)
                        for j in (-0.5, geom.dims[1] - 0.5)
                        for k in (-0.5, geom.dims[2] - 0.5)])
    w = geom.world(corners)
    return w.min(axis=0), w.max(axis=0)


def _check_overlap(f, m):
    flo, fhi = _world_bounds(f.geometry)
    mlo, mhi = _world_bounds(m.geometry)
    if np.any(np.minimum(fhi, mhi) <= np.maximum(flo, mlo)):
        raise RegistrationFailedError("fixed and moving volumes do not overlap")


class _LinearModel:
    """Scaled parameter vector <-> world affine about the fixed center.

    Scaling makes a unit change of any parameter move points by roughly one
    millimetre at the characteristic radius of the fixed volume.
    """

    def __init__(self, kind, center, radius):
        self.kind = kind
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)

    def initial(self, init):
        if self.kind == "rigid":
            if init is None:
                return np.zeros(6)
            angles = _rotation_to_euler(init.linear)
            t = init.apply(self.center) - self.center
            return np.concatenate([np.asarray(angles) * self.radius, t])
        lin = np.eye(3) if init is None else init.linear
        t = np.zeros(3) if init is None else init.apply(self.center) - self.center
        return np.concatenate([(lin - np.eye(3)).ravel() * self.radius, t])

    def affine(self, q):
        if self.kind == "rigid":
            return RigidParams(tuple(q[:3] / self.radius), tuple(q[3:])).to_affine(self.center)
        lin = np.eye(3) + q[:9].reshape(3, 3) / self.radius
        return AffineMatrix(lin, self.center + q[9:] - lin @ self.center)


def _rotation_to_euler(r):
    """Inverse of :func:`transforms.euler_zyx` (``R = Rx Ry Rz``)."""
    ay = np.arcsin(np.clip(r[0, 2], -1.0, 1.0))
    az = np.arctan2(-r[0, 1], r[0, 0])
    ax = np.arctan2(-r[1, 2], r[2, 2])
    return ax, ay, az


class _LevelMetric:
    def __init__(self, fixed, moving, config):
        self.fixed = fixed
        self.moving = moving
        self.config = config
        self.fixed_world = fixed.geometry.world(fixed.geometry.grid()).reshape(-1, 3)
        self.fixed_flat = fixed.data.reshape(-1)
        inv = np.linalg.inv(moving.geometry.affine)
        self.world_to_moving = inv[:3, :3], inv[:3, 3]
        self.moving4 = np.ascontiguousarray(moving.data[..., None])
        self.upper = np.asarray(moving.geometry.dims, dtype=float) - 1.0
        self.min_count = max(8, int(0.1 * self.fixed_flat.size))

    def __call__(self, aff):
        a, b = self.world_to_moving
        pts = aff.apply(self.fixed_world) @ a.T + b
        inside = np.all((pts >= 0.0) & (pts <= self.upper), axis=1)
        if inside.sum() < self.min_count:
            return -np.inf
        # score every fixed voxel (border-replicated sampling) so the sample
        # set, and hence the histogram's support, does not move with the transform
        vals = _kernels.trilinear_gather(self.moving4, np.ascontiguousarray(pts))[:, 0]
        fixed = self.fixed_flat
        if self.config.metric == "mse":
            return -float(np.mean((fixed - vals) ** 2))
        return mutual_information_arrays(fixed, vals, self.config.bins)


def _curvature_scales(metric, model, q, probe=1.0, floor=0.1):
    """Per-parameter scales that equalize the metric's curvature.

    Second differences with a ``probe``-unit step give each parameter's
    curvature; a parameter is rescaled by ``sqrt(curv / max curv)`` so that a
    unit step changes the metric comparably in every direction.  Scales are
    clipped to ``[floor, 1]`` since flat or noisy directions give unreliable
    estimates.
    """
    f0 = metric(model.affine(q))
    curv = np.zeros(q.size)
    for i in range(q.size):
        dq = np.zeros_like(q)
        dq[i] = probe
        hi = metric(model.affine(q + dq))
        lo = metric(model.affine(q - dq))
        if np.isfinite(hi) and np.isfinite(lo):
            curv[i] = max(2.0 * f0 - hi - lo, 0.0)
    top = curv.max()
    if not np.isfinite(f0) or top <= 0.0:
        return np.ones(q.size)
    return np.clip(np.sqrt(curv / top), floor, 1.0)


def _optimize_level(metric, model, q, iterations, step, config, scales=None):
    """Normalized-gradient ascent with central-difference gradients.

    The step is halved whenever a trial point does not improve the metric.
    Stops after ``iterations`` or when the best value has improved by less
    than the convergence threshold over the trailing window.
    """
    # search runs on p = q * scales
    scales = np.ones(q.size) if scales is None else scales
    h = step
    best = metric(model.affine(q))
    if not np.isfinite(best):
        raise RegistrationFailedError("no overlap between volumes at initial transform")
    history = [best]
    for _ in range(iterations):
        grad = np.zeros_like(q)
        for i in range(q.size):
            dq = np.zeros_like(q)
            dq[i] = h / scales[i]
            hi = metric(model.affine(q + dq))
            lo = metric(model.affine(q - dq))
            if np.isfinite(hi) and np.isfinite(lo):
                grad[i] = (hi - lo) / (2.0 * h)
        norm = np.linalg.norm(grad)
        if norm == 0.0:
            break
        cand = q + step * grad / norm / scales
        val = metric(model.affine(cand))
        if val > best:
            q, best = cand, val
        else:
            step *= 0.5
        history.append(best)
        w = config.convergence_window
        if len(history) > w and history[-1] - history[-1 - w] < config.convergence_threshold:
            break
    return q, best, len(history) - 1


def register_linear(f, m, config=None, init=None):
    """Multi-resolution rigid or affine alignment of ``m`` to ``f``.

    Returns the world transform mapping fixed-space points to moving-space
    points; rigid results are returned in matrix form.

    Parameters
    ----------
    f, m : ImageVolume
    config : LinearStageConfig
    init : AffineMatrix, optional
        Starting transform, e.g. the rigid result when running the affine
        stage.
    """
    config = config or LinearStageConfig()
    _check_overlap(f, m)
    lo, hi = _world_bounds(f.geometry)
    model = _LinearModel(config.kind, f.geometry.center, np.mean(hi - lo) / 2.0)
    q = model.initial(init)
    scales = None
    for iters, shrink, sigma in zip(config.iterations_per_level, config.shrink_factors,
                                    config.smoothing_sigmas):
        fl = pyramid_level(f, shrink, sigma)
        ml = pyramid_level(m, shrink, sigma)
        metric = _LevelMetric(fl, ml, config)
        if scales is None:
            # probe one coarse voxel so the estimate sees structure, not noise
            scales = _curvature_scales(metric, model, q, probe=float(np.mean(fl.geometry.spacing)))
            log.debug("%s parameter scales %s", config.kind, np.round(scales, 4))
        step = config.step * float(np.mean(fl.geometry.spacing))
        q, best, used = _optimize_level(metric, model, q, iters, step, config, scales)
        log.debug("%s level shrink=%d: metric %.6f after %d iterations",
                  config.kind, shrink, best, used)
    return model.affine(q)


# ---------------------------------------------------------------------------
# deformable stage


def resample_to(fixed, moving, aff=None):
    """Moving image pulled onto the fixed grid through an optional world affine."""
    geom = fixed.geometry
    world = geom.world(geom.grid())
    if aff is not None:
        world = aff.apply(world)
    pts = moving.geometry.voxel(world).reshape(-1, 3)
    vals = _kernels.trilinear_gather(np.ascontiguousarray(moving.data[..., None]),
                                     np.ascontiguousarray(pts))
    return ImageVolume(geom, vals[:, 0].reshape(geom.dims))


class Adam:
    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _field_from_params(params, geom, config, keep_history=False):
    if config.parameterization == "svf":
        return integrate_svf(VelocityField(geom, params), config.squaring_steps,
                             return_steps=keep_history)
    u = DisplacementField(geom, params)
    return (u, None) if keep_history else u


def register_deformable(f, m, init=None, config=None):
    """Optimize a dense field minimizing ``-LNCC + lambda * smoothness``.

    The moving image is sampled through ``init ∘ (Id + u)`` in one
    interpolation, so the linear initialization adds no resampling blur.
    The returned field is the total transform (``init`` composed with the
    deformable part) in fixed-grid voxel units.
    """
    config = config or DeformableConfig()
    t0 = time.perf_counter()
    geom = f.geometry
    voxel_map = None
    if init is not None:
        # fixed voxel -> fixed world -> init -> moving voxel
        full = np.linalg.inv(m.geometry.affine) @ init.matrix @ geom.affine
        voxel_map = (full[:3, :3], full[:3, 3])
    params = np.zeros(geom.dims + (3,))
    opt = Adam(params.shape, config.learning_rate)
    losses, sims, regs = [], [], []
    for it in range(config.iterations):
        u, history = _field_from_params(params, geom, config, keep_history=True)
        (loss, sim, reg), grad = loss_and_gradient(f, m, u, config.loss, voxel_map)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergenceError(it)
        losses.append(loss)
        sims.append(sim)
        regs.append(reg)
        if history is not None:
            grad = integrate_svf_vjp(history, grad)
        params = opt.step(params, grad)
        if not np.all(np.isfinite(params)):
            raise DivergenceError(it)
    u = _field_from_params(params, geom, config)
    if init is not None:
        u = compose_linear(init, u)
    return RegistrationResult(field=u, linear=init, loss_trace=losses,
                              similarity_trace=sims, regularizer_trace=regs,
                              wall_time=time.perf_counter() - t0)


@dataclass(frozen=True)
class PresetConfigs:
    rigid: LinearStageConfig = field(default_factory=lambda: LinearStageConfig(kind="rigid"))
    affine: LinearStageConfig = field(default_factory=lambda: LinearStageConfig(kind="affine"))
    deformable: DeformableConfig = field(default_factory=DeformableConfig)


def run_preset(pair, preset, configs=None):
    """Run NR, RR or RAR on a ``(fixed, moving)`` pair.

    NR is deformable only; RR runs a rigid stage first; RAR runs rigid, then
    affine started from the rigid result, then deformable.
    """
    configs = configs or PresetConfigs()
    fixed, moving = pair
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    times = {}
    init = None
    t0 = time.perf_counter()
    if preset in ("RR", "RAR"):
        t = time.perf_counter()
        init = register_linear(fixed, moving, configs.rigid)
        times["rigid"] = time.perf_counter() - t
    if preset == "RAR":
        t = time.perf_counter()
        init = register_linear(fixed, moving, configs.affine, init=init)
        times["affine"] = time.perf_counter() - t
    result = register_deformable(fixed, moving, init, configs.deformable)
    times["deformable"] = result.wall_time
    result.stage_times = times
    result.wall_time = time.perf_counter() - t0
    return result


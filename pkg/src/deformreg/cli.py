"""Command-line entry point: ``deformreg {register,evaluate,cohort,phantom}``.

Every command is a thin shell over library calls.  Exit codes: 0 success,
2 invalid input or configuration, 3 registration divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .errors import DivergenceError, RegistrationError
from .objectives import LossConfig
from .registration import PRESETS, DeformableConfig, LinearStageConfig, PresetConfigs

log = logging.getLogger("deformreg")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
WORKERS_ENV = "DEFORMREG_WORKERS"


@dataclass
class RunConfig:
    preset: str = "RAR"
    rigid: LinearStageConfig = field(default_factory=lambda: LinearStageConfig(kind="rigid"))
    affine: LinearStageConfig = field(default_factory=lambda: LinearStageConfig(kind="affine"))
    deformable: DeformableConfig = field(default_factory=DeformableConfig)
    region_table: str = ""
    resample_mm: float = 1.5
    workers: int = 1
    presets: tuple = ()

    def __post_init__(self):
        for p in (self.preset,) + tuple(self.presets):
            if p not in PRESETS:
                raise ValueError(f"unknown preset {p!r}; expected one of {PRESETS}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.resample_mm <= 0:
            raise ValueError("resample_mm must be positive")
        if self.region_table and not os.path.exists(self.region_table):
            raise ValueError(f"region table not found: {self.region_table}")

    @property
    def preset_configs(self):
        return PresetConfigs(self.rigid, self.affine, self.deformable)

    @property
    def cohort_presets(self):
        return tuple(self.presets) or (self.preset,)


def _build(cls, table, section, **fixed):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ValueError(f"[{section}] unknown keys: {sorted(unknown)}")
    return cls(**{**table, **fixed})


def load_run_config(path=None, workers=None):
    """Read a TOML run configuration; every key is optional.

    Sections ``[rigid]``, ``[affine]``, ``[deformable]`` and
    ``[deformable.loss]`` map onto the stage config dataclasses; top-level
    keys are ``preset``, ``presets``, ``region_table``, ``resample_mm`` and
    ``workers``.  Worker count precedence: ``workers`` argument, then the
    config file, then the ``DEFORMREG_WORKERS`` environment variable, then 1.
    """
    data = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
        base = Path(path).parent
        if data.get("region_table"):
            data["region_table"] = str(base / data["region_table"])
    data = dict(data)
    kw = {}
    if "rigid" in data:
        kw["rigid"] = _build(LinearStageConfig, data.pop("rigid"), "rigid", kind="rigid")
    if "affine" in data:
        kw["affine"] = _build(LinearStageConfig, data.pop("affine"), "affine", kind="affine")
    if "deformable" in data:
        d = dict(data.pop("deformable"))
        loss = _build(LossConfig, d.pop("loss", {}), "deformable.loss")
        kw["deformable"] = _build(DeformableConfig, d, "deformable", loss=loss)
    if "presets" in data:
        data["presets"] = tuple(data["presets"])
    if workers is None and "workers" not in data and os.environ.get(WORKERS_ENV):
        workers = int(os.environ[WORKERS_ENV])
    if workers is not None:
        data["workers"] = workers
    return _build(RunConfig, data, "top level", **kw)


def _region_table(cfg, override=None):
    from .evaluation import default_region_table, load_region_table

    path = override or cfg.region_table
    return load_region_table(path) if path else default_region_table()


def _require(*paths):
    for p in paths:
        if p is not None and not os.path.exists(p):
            raise FileNotFoundError(p)


def cmd_register(args):
    from .nifti import load_nifti, save_nifti
    from .registration import run_preset
    from .transforms import save_field, warp_image
    from .volume import resample_iso

    _require(args.fixed, args.moving, args.config)
    cfg = load_run_config(args.config)
    preset = args.preset or cfg.preset
    fixed = load_nifti(args.fixed, kind="image")
    moving = load_nifti(args.moving, kind="image")
    if cfg.resample_mm and not args.no_resample:
        fixed = resample_iso(fixed, cfg.resample_mm)
        moving = resample_iso(moving, cfg.resample_mm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_preset((fixed, moving), preset, cfg.preset_configs)
    save_field(result.field, out / "field.nii.gz")
    save_nifti(warp_image(moving, result.field), out / "warped.nii.gz")
    result.write_trace(out / "loss_trace.csv")
    with open(out / "timing.json", "w") as fh:
        json.dump({"preset": preset, "total_seconds": result.wall_time,
                   "stages": result.stage_times}, fh, indent=2)
    log.info("registered %s -> %s with %s in %.1f s", args.moving, args.fixed, preset,
             result.wall_time)
    return EXIT_OK


def cmd_evaluate(args):
    from .cohort import write_rows
    from .evaluation import evaluate
    from .nifti import load_nifti
    from .transforms import load_field, warp_labels

    _require(args.fixed_seg, args.moving_seg, args.field, args.regions)
    fixed_seg = load_nifti(args.fixed_seg, kind="label")
    moving_seg = load_nifti(args.moving_seg, kind="label")
    fld = load_field(args.field)
    table = _region_table(RunConfig(), args.regions)
    report = evaluate(fixed_seg, warp_labels(moving_seg, fld), fld, table)
    if report.negative_jd_pct > 0:
        log.warning("field folds: %.4f%% of brain voxels have non-positive Jacobian determinant",
                    report.negative_jd_pct)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "metrics.csv", [report.row()], report.columns())
    return EXIT_OK


def cmd_cohort(args):
    from .cohort import read_manifest, run_cohort

    _require(args.manifest, args.config)
    cfg = load_run_config(args.config, workers=args.workers)
    records = read_manifest(args.manifest)
    n_ok = run_cohort(records, args.out_dir, presets=cfg.cohort_presets,
                      configs=cfg.preset_configs, table=_region_table(cfg),
                      spacing=cfg.resample_mm, workers=cfg.workers)
    if n_ok == 0:
        log.error("no pair registered successfully")
        return EXIT_INVALID
    return EXIT_OK


def cmd_phantom(args):
    from .nifti import save_nifti
    from .phantom import PhantomSpec, generate_phantom, make_pair, write_landmarks
    from .transforms import save_field

    spec = PhantomSpec(dims=(args.size,) * 3, region_count=args.regions,
                       noise_sigma=args.noise, seed=args.seed, spacing=args.spacing,
                       intensity_range=args.intensity_range)
    ph = generate_phantom(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_nifti(ph.image, out / "image.nii.gz")
    save_nifti(ph.labels, out / "labels.nii.gz")
    write_landmarks(ph.landmarks, out / "landmarks.csv")
    if args.deform is not None:
        pair = make_pair(ph, max_disp=args.deform, seed=args.seed + 1)
        save_nifti(pair.moving, out / "moving.nii.gz")
        save_nifti(pair.moving_labels, out / "moving_labels.nii.gz")
        save_field(pair.true_field, out / "true_field.nii.gz")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="deformreg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="register one moving image onto a fixed image")
    r.add_argument("--fixed", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--config")
    r.add_argument("--preset", choices=PRESETS, help="overrides the config preset")
    r.add_argument("--no-resample", action="store_true",
                   help="register on the native grids")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="overlap and Jacobian metrics for a field")
    e.add_argument("--fixed-seg", required=True)
    e.add_argument("--moving-seg", required=True)
    e.add_argument("--field", required=True)
    e.add_argument("--regions", help="region table CSV (default: built-in 18 regions)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("cohort", help="register and analyse every longitudinal pair")
    c.add_argument("--manifest", required=True)
    c.add_argument("--config")
    c.add_argument("--workers", type=int, help=f"overrides ${WORKERS_ENV}")
    c.add_argument("--out-dir", required=True)
    c.set_defaults(func=cmd_cohort)

    ph = sub.add_parser("phantom", help="write a synthetic nested-ellipsoid phantom")
    ph.add_argument("--size", type=int, default=64)
    ph.add_argument("--regions", type=int, default=6)
    ph.add_argument("--noise", type=float, default=0.02)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--spacing", type=float, default=1.5)
    ph.add_argument("--intensity-range", type=float, default=1.0)
    ph.add_argument("--deform", type=float, metavar="VOXELS",
                    help="also write a deformed pair with this maximum displacement")
    ph.add_argument("--out-dir", required=True)
    ph.set_defaults(func=cmd_phantom)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: registration diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RegistrationError, ValueError, tomli.TOMLDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

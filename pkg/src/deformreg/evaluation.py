"""Overlap and deformation-regularity metrics.

Dice is computed per region of a :class:`RegionTable` (left/right label ids
merged by set union), then summarized as an inverse-volume weighted mean,
per-tissue means and the plain mean.  Jacobian metrics are evaluated on the
fixed grid, masked by the fixed segmentation.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DegenerateInputError, InputError, NonInvertibleFieldError, ShapeError
from .transforms import jacobian_determinant
from .volume import check_same_geometry

log = logging.getLogger(__name__)

TISSUES = ("WM", "GM", "CSF")


@dataclass(frozen=True)
class Region:
    label_ids: frozenset
    name: str
    tissue: str


class RegionTable:
    """Ordered list of scoring regions.

    Parameters
    ----------
    entries : iterable of (label_ids, name, tissue)
    """

    def __init__(self, entries):
        regions = []
        seen = set()
        for ids, name, tissue in entries:
            ids = frozenset(int(i) for i in ids)
            if not ids:
                raise InputError(f"region {name!r} has no label ids")
            if tissue not in TISSUES:
                raise InputError(f"region {name!r}: unknown tissue {tissue!r}")
            if ids & seen:
                raise InputError(f"region {name!r} reuses label ids {sorted(ids & seen)}")
            if 0 in ids:
                raise InputError("label 0 is background and cannot be scored")
            seen |= ids
            regions.append(Region(ids, str(name), tissue))
        self.regions = tuple(regions)

    def __len__(self):
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    @property
    def names(self):
        return [r.name for r in self.regions]

    def by_tissue(self, tissue):
        return [r for r in self.regions if r.tissue == tissue]

    def tissues(self):
        return [t for t in TISSUES if self.by_tissue(t)]

    def all_labels(self):
        return frozenset().union(*(r.label_ids for r in self.regions))

    def _lookup(self, max_label):
        lut = np.full(max(max_label, max(self.all_labels())) + 1, -1, dtype=np.int64)
        for i, r in enumerate(self.regions):
            lut[list(r.label_ids)] = i
        return lut


def load_region_table(path):
    """Read ``label_ids,region_name,tissue`` rows; ids are ``;``-separated."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return RegionTable(([int(x) for x in r["label_ids"].split(";") if x.strip()],
                            r["region_name"].strip(), r["tissue"].strip()) for r in rows)
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: malformed region table ({exc})") from exc


def default_region_table():
    """The 18 merged-hemisphere regions in SynthSeg/FreeSurfer numbering."""
    with resources.as_file(resources.files("deformreg") / "data" / "synthseg_regions.csv") as p:
        return load_region_table(p)


def _dice_from_counts(inter, a, b):
    if a + b == 0:
        return 1.0
    return 2.0 * inter / (a + b)


def dice(fixed_seg, moved_seg, region):
    """Dice overlap of one region (a set of label ids)."""
    check_same_geometry(fixed_seg, moved_seg)
    ids = list(region)
    f = np.isin(fixed_seg.data, ids)
    m = np.isin(moved_seg.data, ids)
    return _dice_from_counts(int(np.count_nonzero(f & m)), int(f.sum()), int(m.sum()))


def _region_counts(fixed_seg, moved_seg, table):
    check_same_geometry(fixed_seg, moved_seg)
    top = int(max(fixed_seg.data.max(), moved_seg.data.max()))
    lut = table._lookup(top)
    n = len(table)
    fi = lut[fixed_seg.data].ravel()
    mi = lut[moved_seg.data].ravel()
    vf = np.bincount(fi[fi >= 0], minlength=n)
    vm = np.bincount(mi[mi >= 0], minlength=n)
    same = (fi == mi) & (fi >= 0)
    inter = np.bincount(fi[same], minlength=n)
    return inter, vf, vm


def region_dice(fixed_seg, moved_seg, table):
    """``{region name: Dice}`` for every region of ``table``."""
    inter, vf, vm = _region_counts(fixed_seg, moved_seg, table)
    return {r.name: _dice_from_counts(int(inter[i]), int(vf[i]), int(vm[i]))
            for i, r in enumerate(table)}


def region_weights(fixed_seg, table):
    """Normalized inverse-volume weights; regions absent from ``fixed_seg`` are dropped."""
    _, vf, _ = _region_counts(fixed_seg, fixed_seg, table)
    inv = {r.name: 1.0 / int(vf[i]) for i, r in enumerate(table) if vf[i] > 0}
    if not inv:
        raise DegenerateInputError("no region of the table is present in the fixed segmentation")
    total = math.fsum(inv.values())
    return {k: v / total for k, v in inv.items()}


def weighted_dice(fixed_seg, moved_seg, table):
    """Dice averaged with weights proportional to ``1 / |fixed region|``."""
    weights = region_weights(fixed_seg, table)
    scores = region_dice(fixed_seg, moved_seg, table)
    return math.fsum(w * scores[name] for name, w in weights.items())


def _mean(values):
    return math.fsum(values) / len(values)


def tissue_dice(fixed_seg, moved_seg, table):
    """Per-tissue unweighted mean of region Dice, and the mean over all regions.

    Returns
    -------
    per_tissue : dict
        ``{tissue: mean Dice}`` for tissues that have at least one region.
    mean_dice : float
    """
    scores = region_dice(fixed_seg, moved_seg, table)
    per_tissue = {t: _mean([scores[r.name] for r in table.by_tissue(t)])
                  for t in table.tissues()}
    return per_tissue, _mean(list(scores.values()))


def _mask(field, labels, region):
    if labels is None:
        return np.ones(field.geometry.dims, dtype=bool)
    if labels.geometry.dims != field.geometry.dims:
        raise ShapeError("mask geometry does not match field")
    if region is None:
        return labels.data > 0
    return np.isin(labels.data, list(region))


def _jd(field, jd):
    return jacobian_determinant(field).data if jd is None else jd


def negative_jd_pct(field, labels=None, region=None, jd=None):
    """Percentage of (masked) voxels whose Jacobian determinant is negative.

    ``labels`` with ``region=None`` masks to every non-background voxel;
    without ``labels`` the whole grid is used.
    """
    mask = _mask(field, labels, region)
    count = int(mask.sum())
    if count == 0:
        raise DegenerateInputError("empty mask")
    return 100.0 * int(np.count_nonzero(_jd(field, jd)[mask] < 0)) / count


def abs_log_jd(field, labels=None, region=None, jd=None):
    """Sum of ``|log JD|`` over the mask divided by the masked voxel count."""
    mask = _mask(field, labels, region)
    count = int(mask.sum())
    if count == 0:
        raise DegenerateInputError("empty mask")
    vals = _jd(field, jd)[mask]
    if np.any(vals <= 0):
        raise NonInvertibleFieldError("non-positive Jacobian determinant inside the mask")
    return float(np.abs(np.log(vals)).sum() / count)


@dataclass(frozen=True)
class MethodComparison:
    fraction: float
    wins: int
    ties: int
    n: int


def compare_methods(dice_a, dice_b):
    """Fraction of pairs where method ``a`` scores strictly higher than ``b``."""
    if set(dice_a) != set(dice_b):
        raise InputError("score tables cover different pairs")
    if not dice_a:
        raise InputError("no pairs to compare")
    wins = sum(1 for k in dice_a if dice_a[k] > dice_b[k])
    ties = sum(1 for k in dice_a if dice_a[k] == dice_b[k])
    return MethodComparison(wins / len(dice_a), wins, ties, len(dice_a))


def _column(name):
    return name.replace(" ", "_")


@dataclass
class MetricsReport:
    per_region_dice: dict
    weighted_dice: float
    tissue_dice: dict
    mean_dice: float
    negative_jd_pct: float
    abs_log_jd_sum: dict
    timings: dict = field(default_factory=dict)

    def columns(self):
        """Metric columns in their fixed order (timings are reported separately)."""
        cols = ["weighted_dice", "mean_dice"]
        cols += [f"dice_{t}" for t in TISSUES]
        cols += ["negative_jd_pct", "abs_log_jd_whole_brain"]
        cols += [f"abs_log_jd_{t}" for t in TISSUES]
        cols += [f"dice_{_column(n)}" for n in self.per_region_dice]
        cols += [f"abs_log_jd_{_column(n)}" for n in self.per_region_dice]
        return cols

    def row(self):
        out = {"weighted_dice": self.weighted_dice, "mean_dice": self.mean_dice,
               "negative_jd_pct": self.negative_jd_pct}
        for t in TISSUES:
            out[f"dice_{t}"] = self.tissue_dice.get(t, float("nan"))
            out[f"abs_log_jd_{t}"] = self.abs_log_jd_sum.get(t, float("nan"))
        out["abs_log_jd_whole_brain"] = self.abs_log_jd_sum.get("whole_brain", float("nan"))
        for n, v in self.per_region_dice.items():
            out[f"dice_{_column(n)}"] = v
            out[f"abs_log_jd_{_column(n)}"] = self.abs_log_jd_sum.get(n, float("nan"))
        return {c: out[c] for c in self.columns()}


def _safe_abs_log_jd(field, labels, region, jd):
    try:
        return abs_log_jd(field, labels, region, jd)
    except (NonInvertibleFieldError, DegenerateInputError):
        return float("nan")


def evaluate(fixed_seg, moved_seg, field, table, timings=None):
    """Full metrics for one registration.

    ``moved_seg`` is the moving segmentation already warped onto the fixed
    grid.  Jacobian metrics use the fixed segmentation as mask; a masked
    region containing non-positive determinants reports NaN for its
    ``|log JD|`` entry.
    """
    check_same_geometry(fixed_seg, moved_seg)
    jd = jacobian_determinant(field).data
    per_region = region_dice(fixed_seg, moved_seg, table)
    per_tissue, mean = tissue_dice(fixed_seg, moved_seg, table)
    try:
        wdice = weighted_dice(fixed_seg, moved_seg, table)
    except DegenerateInputError:
        wdice = float("nan")
    brain = fixed_seg.data > 0
    neg = negative_jd_pct(field, jd=jd) if not brain.any() else \
        negative_jd_pct(field, fixed_seg, None, jd)
    logjd = {"whole_brain": _safe_abs_log_jd(field, fixed_seg, None, jd)}
    for t in table.tissues():
        ids = frozenset().union(*(r.label_ids for r in table.by_tissue(t)))
        logjd[t] = _safe_abs_log_jd(field, fixed_seg, ids, jd)
    for r in table:
        logjd[r.name] = _safe_abs_log_jd(field, fixed_seg, r.label_ids, jd)
    if neg > 0:
        log.warning("field folds: %.4f%% negative Jacobian determinants", neg)
    return MetricsReport(per_region, wdice, per_tissue, mean, neg, logjd, dict(timings or {}))

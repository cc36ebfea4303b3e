"""Longitudinal pairs, trend regression, signed-rank tests and batch runs.

The analysis functions are pure; :func:`run_cohort` is the batch driver that
registers every pair under every requested preset in a worker pool, then
evaluates and writes the CSV artifact set in a deterministic row order.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, InputError

log = logging.getLogger(__name__)

EXACT_MAX_N = 25


@dataclass(frozen=True)
class ScanRecord:
    subject_id: str
    age: float
    sex: str
    path: str
    seg_path: str = ""
    exclude: bool = False

    def __post_init__(self):
        if not self.age > 0:
            raise InputError(f"{self.subject_id}: age must be positive, got {self.age}")
        if self.sex not in ("F", "M"):
            raise InputError(f"{self.subject_id}: sex must be F or M, got {self.sex!r}")


@dataclass(frozen=True)
class PairRecord:
    moving: ScanRecord
    fixed: ScanRecord

    def __post_init__(self):
        if self.moving.subject_id != self.fixed.subject_id:
            raise InputError("pairs must be intra-subject")
        if self.fixed.age < self.moving.age:
            raise InputError("the moving scan must be the earlier one")

    @property
    def age_interval(self):
        return self.fixed.age - self.moving.age

    @property
    def subject_id(self):
        return self.moving.subject_id

    @property
    def pair_id(self):
        return f"{self.subject_id}_{self.moving.age:g}_{self.fixed.age:g}"


@dataclass(frozen=True)
class RegressionFit:
    slope: float
    intercept: float
    r_squared: float
    n: int


_TRUE = {"1", "true", "yes", "y"}


def read_manifest(path, check_paths=True):
    """Parse a ``subject_id,age_years,sex,path`` CSV.

    Optional columns: ``seg_path`` (segmentation for evaluation) and
    ``exclude`` (truthy rows are dropped, e.g. QC failures).  Relative paths
    resolve against the manifest's directory.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "age_years", "sex", "path"} - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path}: manifest lacks columns {sorted(missing)}")
        rows = list(reader)
    records = []
    for lineno, row in enumerate(rows, start=2):
        if row.get("exclude", "").strip().lower() in _TRUE:
            continue
        try:
            age = float(row["age_years"])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: bad age {row['age_years']!r}") from exc
        scan = path.parent / row["path"].strip()
        seg = row.get("seg_path", "").strip()
        seg = str(path.parent / seg) if seg else ""
        if check_paths:
            for p in filter(None, (str(scan), seg)):
                if not os.path.exists(p):
                    raise InputError(f"{path}:{lineno}: file not found: {p}")
        records.append(ScanRecord(row["subject_id"].strip(), age, row["sex"].strip().upper(),
                                  str(scan), seg))
    return records


def make_pairs(records):
    """All within-subject scan combinations, oriented earlier -> later.

    Sorted by subject id, then moving age, then fixed age.
    """
    by_subject = defaultdict(list)
    for r in records:
        by_subject[r.subject_id].append(r)
    pairs = []
    for sid in sorted(by_subject):
        scans = sorted(by_subject[sid], key=lambda r: (r.age, r.path))
        for i, moving in enumerate(scans):
            for fixed in scans[i + 1:]:
                pairs.append(PairRecord(moving, fixed))
    return pairs


def ols_fit(x, y):
    """Closed-form least-squares line ``y = slope * x + intercept``.

    A constant ``y`` has no variance to explain; its R-squared is reported
    as 0 by convention.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("x and y must be 1-D and of equal length")
    n = x.size
    if n < 2:
        raise DegenerateInputError("regression needs at least 2 points")
    xm, ym = x.mean(), y.mean()
    dx, dy = x - xm, y - ym
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        raise DegenerateInputError("regression on constant x")
    slope = float(np.dot(dx, dy)) / sxx
    intercept = float(ym - slope * xm)
    ss_tot = float(np.dot(dy, dy))
    if ss_tot == 0.0:
        return RegressionFit(slope, intercept, 0.0, n)
    res = dy - slope * dx
    r2 = 1.0 - float(np.dot(res, res)) / ss_tot
    return RegressionFit(slope, intercept, min(max(r2, 0.0), 1.0), n)


def _midranks(a):
    order = np.argsort(a, kind="stable")
    ranks = np.empty(a.size)
    s = a[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_cdf(ranks2, w2):
    """P(W+ <= w) under the sign-flip null; ranks and w are doubled to integers."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in ranks2:
        r = int(r)
        counts[r:] = counts[r:] + counts[:-r].copy()
    return float(counts[: w2 + 1].sum() / 2.0 ** ranks2.size)


def wilcoxon_signed_rank(a, b, method="auto"):
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped before ranking; tied magnitudes get mid-ranks.
    ``method="auto"`` enumerates the exact null distribution for up to 25
    non-zero differences and otherwise uses the normal approximation with
    tie-corrected variance and a 0.5 continuity correction.

    Returns
    -------
    statistic : float
        ``min(W+, W-)``.
    p : float
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("paired samples must be 1-D and of equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise DegenerateInputError("all paired differences are zero")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w = min(w_plus, float(ranks.sum()) - w_plus)
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    if method == "exact" or (method == "auto" and n <= EXACT_MAX_N):
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        p = 2.0 * _exact_cdf(ranks2, int(round(2 * w)))
    else:
        mu = n * (n + 1) / 4.0
        _, t = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(t ** 3 - t)) / 48.0
        z = max(abs(w - mu) - 0.5, 0.0) / math.sqrt(var)
        p = math.erfc(z / math.sqrt(2.0))
    return w, min(p, 1.0)


def prorate_time(total_seconds, pair_count):
    """Per-pair share of a batch wall time."""
    if pair_count < 1:
        raise ZeroDivisionError("cannot pro-rate over zero pairs")
    return total_seconds / pair_count


def metric_targets(columns):
    """Dice columns analysed per tissue and per region."""
    return [c for c in columns if c == "weighted_dice" or c == "mean_dice" or c.startswith("dice_")]


def stratify(rows, by, targets, x="age_interval"):
    """Per-group trend fits and summaries.

    Parameters
    ----------
    rows : list of dict
        One row per (pair, preset) with numeric ``x`` and target columns.
    by : str or None
        Grouping column (``sex``, ``preset``, ...); ``None`` pools all rows
        into the group ``"all"``.
    targets : list of str

    Returns
    -------
    regression, summary : list of dict
        Rows ``group, target, slope, intercept, r_squared, n`` and
        ``group, target, mean, sd, median, n``; groups in sorted order.
    """
    groups = defaultdict(list)
    for r in rows:
        if by is not None and by not in r:
            raise InputError(f"row lacks grouping key {by!r}")
        groups["all" if by is None else str(r[by])].append(r)
    regression, summary = [], []
    for g in sorted(groups):
        for t in targets:
            pts = [(float(r[x]), float(r[t])) for r in groups[g]
                   if math.isfinite(float(r[t]))]
            if not pts:
                log.info("group %s has no finite %s values; omitted", g, t)
                continue
            xs, ys = (np.array(v) for v in zip(*pts))
            summary.append({"group": g, "target": t, "mean": float(ys.mean()),
                            "sd": float(ys.std(ddof=1)) if ys.size > 1 else float("nan"),
                            "median": float(np.median(ys)), "n": int(ys.size)})
            try:
                fit = ols_fit(xs, ys)
            except DegenerateInputError as exc:
                log.info("group %s, %s: no regression (%s)", g, t, exc)
                continue
            regression.append({"group": g, "target": t, "slope": fit.slope,
                               "intercept": fit.intercept, "r_squared": fit.r_squared,
                               "n": fit.n})
    return regression, summary


def preset_tests(rows, target="weighted_dice"):
    """Signed-rank tests between every pair of presets on the pairs both completed."""
    scores = defaultdict(dict)
    for r in rows:
        v = float(r.get(target, "nan"))
        if math.isfinite(v):
            scores[r["preset"]][r["pair_id"]] = v
    out = []
    names = [p for p in ("RAR", "RR", "NR") if p in scores] + \
        sorted(p for p in scores if p not in ("RAR", "RR", "NR"))
    for i, p in enumerate(names):
        for q in names[i + 1:]:
            keys = sorted(set(scores[p]) & set(scores[q]))
            row = {"test": f"wilcoxon_{target}", "groups": f"{p} vs {q}", "n": len(keys)}
            try:
                w, pv = wilcoxon_signed_rank([scores[p][k] for k in keys],
                                             [scores[q][k] for k in keys])
            except (DegenerateInputError, InputError) as exc:
                log.info("%s vs %s: no test (%s)", p, q, exc)
                w, pv = float("nan"), float("nan")
            row.update(W=w, p=pv)
            out.append(row)
    return out


def write_rows(path, rows, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


def write_pairs(path, pairs):
    rows = [{"pair_id": p.pair_id, "subject_id": p.subject_id, "sex": p.moving.sex,
             "moving_age": p.moving.age, "fixed_age": p.fixed.age,
             "age_interval": p.age_interval, "moving_path": p.moving.path,
             "fixed_path": p.fixed.path} for p in pairs]
    write_rows(path, rows, ["pair_id", "subject_id", "sex", "moving_age", "fixed_age",
                            "age_interval", "moving_path", "fixed_path"])


# ---------------------------------------------------------------- batch driver


@dataclass(frozen=True)
class CohortJob:
    pair: PairRecord
    preset: str


def _load_scan(scan, spacing):
    from .nifti import load_nifti
    from .volume import resample_iso

    image = resample_iso(load_nifti(scan.path, kind="image"), spacing)
    seg = None
    if scan.seg_path:
        seg = resample_iso(load_nifti(scan.seg_path, kind="label"), spacing)
    return image, seg


def run_job(job, configs, table, spacing):
    """Register one pair under one preset and evaluate it.

    Returns ``(metrics_row, timings)``; failures are reported in the row
    rather than raised so that a batch survives bad inputs.
    """
    from .evaluation import evaluate
    from .registration import run_preset
    from .transforms import warp_labels

    row = {"pair_id": job.pair.pair_id, "subject_id": job.pair.subject_id,
           "sex": job.pair.moving.sex, "preset": job.preset,
           "age_interval": job.pair.age_interval}
    try:
        fixed, fixed_seg = _load_scan(job.pair.fixed, spacing)
        moving, moving_seg = _load_scan(job.pair.moving, spacing)
        result = run_preset((fixed, moving), job.preset, configs)
        row["final_loss"] = result.loss_trace[-1]
        if fixed_seg is not None and moving_seg is not None:
            report = evaluate(fixed_seg, warp_labels(moving_seg, result.field), result.field, table)
            row.update(report.row())
        row["status"] = "ok"
        row["error"] = ""
        timings = dict(result.stage_times, total=result.wall_time)
    except Exception as exc:  # noqa: BLE001 - isolate per-pair failures
        log.error("pair %s (%s) failed: %s", job.pair.pair_id, job.preset, exc)
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
        timings = {}
    return row, timings


def _run_job_args(args):
    return run_job(*args)


def run_cohort(records, out_dir, presets=("RAR",), configs=None, table=None,
               spacing=1.5, workers=1):
    """Register, evaluate and analyse every pair; write the CSV artifact set.

    Output files in ``out_dir``: ``pairs.csv``, ``metrics.csv`` (one row per
    pair x preset, no timings), ``regression.csv``, ``summary.csv``,
    ``stats.csv`` and ``timing.csv``.  Row order depends only on the
    manifest, never on job completion order.

    Returns
    -------
    int
        Number of successful (pair, preset) jobs.
    """
    from .evaluation import default_region_table
    from .registration import PresetConfigs

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = table or default_region_table()
    configs = configs or PresetConfigs()
    pairs = make_pairs(records)
    if not pairs:
        raise DegenerateInputError("no subject has two or more scans")
    write_pairs(out / "pairs.csv", pairs)
    jobs = [CohortJob(p, preset) for p in pairs for preset in presets]
    args = [(j, configs, table, spacing) for j in jobs]
    log.info("running %d jobs on %d workers", len(jobs), workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job_args, args))
    else:
        results = [run_job(*a) for a in args]

    rows = [r for r, _ in results]
    metric_cols = []
    for r in rows:
        if r["status"] == "ok" and "weighted_dice" in r:
            metric_cols = [c for c in r if c not in _ID_COLUMNS]
            break
    write_rows(out / "metrics.csv", rows, list(_ID_COLUMNS) + metric_cols)

    ok = [r for r in rows if r["status"] == "ok"]
    scored = [r for r in ok if "weighted_dice" in r]
    targets = metric_targets(metric_cols)
    reg_rows, sum_rows = [], []
    for by in (None, "sex", "preset"):
        reg, summ = stratify(scored, by, targets)
        name = "all" if by is None else by
        reg_rows += [dict(r, stratum=name) for r in reg]
        sum_rows += [dict(r, stratum=name) for r in summ]
    write_rows(out / "regression.csv", reg_rows,
               ["stratum", "group", "target", "slope", "intercept", "r_squared", "n"])
    write_rows(out / "summary.csv", sum_rows,
               ["stratum", "group", "target", "mean", "sd", "median", "n"])
    write_rows(out / "stats.csv", preset_tests(scored), ["test", "groups", "n", "W", "p"])

    timing_rows = []
    for (r, t) in results:
        if t:
            timing_rows.append({"pair_id": r["pair_id"], "preset": r["preset"], **t})
    per_preset = defaultdict(list)
    for t in timing_rows:
        per_preset[t["preset"]].append(t["total"])
    for preset, vals in per_preset.items():
        timing_rows.append({"pair_id": "ALL", "preset": preset, "total": math.fsum(vals),
                            "prorated": prorate_time(math.fsum(vals), len(vals))})
    write_rows(out / "timing.csv", timing_rows,
               ["pair_id", "preset", "rigid", "affine", "deformable", "total", "prorated"])
    return len(ok)


_ID_COLUMNS = ("pair_id", "subject_id", "sex", "preset", "age_interval", "status", "error",
               "final_loss")

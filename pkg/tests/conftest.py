"""Shared fixtures; the acceptance report is printed in the terminal summary."""

import numpy as np
import pytest

from deformreg.nifti import save_nifti
from deformreg.phantom import PhantomSpec, generate_phantom, make_pair

ACCEPTANCE = []


def record(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} :: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_phantom():
    return generate_phantom(PhantomSpec(dims=(24, 24, 24), seed=3, spacing=2.0))


def write_cohort(root, subjects=3, scans=3, size=16):
    """Tiny synthetic cohort: each later scan is a deformed copy of a base phantom."""
    rows = ["subject_id,age_years,sex,path,seg_path"]
    for s in range(subjects):
        ph = generate_phantom(PhantomSpec(dims=(size,) * 3, seed=s, region_count=3,
                                          spacing=4.0, intensity_range=1000.0))
        for k in range(scans):
            pair = make_pair(ph, max_disp=0.5 * k, seed=10 * s + k)
            img, seg = root / f"s{s}_{k}.nii.gz", root / f"s{s}_{k}_seg.nii.gz"
            save_nifti(pair.moving, img)
            save_nifti(pair.moving_labels, seg)
            rows.append(f"sub{s},{1.0 + k:.1f},{'FM'[s % 2]},{img.name},{seg.name}")
    (root / "manifest.csv").write_text("\n".join(rows) + "\n")
    (root / "run.toml").write_text(
        'presets = ["NR", "RR"]\nresample_mm = 4.0\n'
        "[rigid]\niterations_per_level = [10]\nshrink_factors = [1]\n"
        "smoothing_sigmas = [0.0]\n[deformable]\niterations = 5\n")
    return root / "manifest.csv", root / "run.toml"

import numpy as np
import pytest

from deformreg.errors import ShapeError
from deformreg.volume import (
    GridGeometry,
    ImageVolume,
    LabelVolume,
    gaussian_kernel,
    gaussian_smooth,
    pyramid_level,
    resample_iso,
    sample_nearest,
    sample_trilinear,
)


def test_geometry_validation():
    with pytest.raises(ShapeError):
        GridGeometry((0, 2, 2))
    with pytest.raises(ShapeError):
        GridGeometry((2, 2, 2), (1.0, -1.0, 1.0))
    with pytest.raises(ShapeError):
        GridGeometry((2, 2, 2), direction=np.diag([2.0, 1.0, 1.0]))


def test_world_voxel_roundtrip(rng):
    rot = np.linalg.qr(rng.standard_normal((3, 3)))[0]
    g = GridGeometry((5, 6, 7), (1.5, 2.0, 0.5), (10.0, -3.0, 2.0), rot)
    v = rng.uniform(0, 5, (20, 3))
    w = g.world(v)
    np.testing.assert_allclose(w, g.origin + v @ (rot * np.array(g.spacing)).T, atol=1e-12)
    np.testing.assert_allclose(g.voxel(w), v, atol=1e-10)


def test_image_rejects_nonfinite():
    with pytest.raises(ValueError):
        ImageVolume(GridGeometry((2, 2, 2)), np.full((2, 2, 2), np.nan))
    with pytest.raises(ShapeError):
        ImageVolume(GridGeometry((2, 2, 2)), np.zeros((2, 2, 3)))


def test_trilinear_lattice_and_ramp(rng):
    g = GridGeometry((4, 4, 4))
    data = rng.standard_normal((4, 4, 4))
    vol = ImageVolume(g, data)
    assert sample_trilinear(vol, (1, 2, 3)) == data[1, 2, 3]
    ramp = ImageVolume(g, np.broadcast_to(np.arange(4.0)[:, None, None], (4, 4, 4)))
    assert sample_trilinear(ramp, (2.5, 1.0, 1.0)) == pytest.approx(2.5, abs=1e-15)


def test_trilinear_matches_corner_expansion(rng):
    data = rng.standard_normal((4, 4, 4))
    vol = ImageVolume(GridGeometry((4, 4, 4)), data)
    p = np.array([1.25, 0.5, 2.75])
    i0 = np.floor(p).astype(int)
    t = p - i0
    expect = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((t[0] if dx else 1 - t[0]) * (t[1] if dy else 1 - t[1])
                     * (t[2] if dz else 1 - t[2]))
                expect += w * data[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    assert abs(sample_trilinear(vol, p) - expect) < 1e-12


def test_nearest_tie_rule_and_bruteforce(rng):
    data = np.zeros((2, 1, 1), dtype=int)
    data[0], data[1] = 3, 7
    vol = LabelVolume(GridGeometry((2, 1, 1)), data)
    assert sample_nearest(vol, (0.5, 0, 0)) == 7
    labels = rng.integers(0, 6, (5, 5, 5))
    lv = LabelVolume(GridGeometry((5, 5, 5)), labels)
    for p in rng.uniform(-1, 5, (100, 3)):
        idx = np.clip(np.floor(p + 0.5).astype(int), 0, 4)
        assert sample_nearest(lv, p) == labels[tuple(idx)]


def test_gaussian_smoothing():
    g = GridGeometry((9, 9, 9))
    imp = np.zeros((9, 9, 9))
    imp[4, 4, 4] = 1.0
    vol = ImageVolume(g, imp)
    assert np.array_equal(gaussian_smooth(vol, 0).data, imp)
    k = gaussian_kernel(1.0)
    out = gaussian_smooth(vol, 1.0).data
    assert abs(out[4, 4, 4] - k[len(k) // 2] ** 3) < 1e-10
    const = ImageVolume(g, np.full((9, 9, 9), 3.7))
    np.testing.assert_allclose(gaussian_smooth(const, (2.0, 0.5, 1.0)).data, 3.7, atol=1e-12)


def test_resample_iso_cases():
    g = GridGeometry((4, 4, 4), (1.0, 1.0, 1.0))
    vol = ImageVolume(g, np.arange(64.0).reshape(4, 4, 4))
    same = resample_iso(vol, 1.0)
    assert same.geometry.dims == (4, 4, 4)
    np.testing.assert_allclose(same.data, vol.data, atol=1e-10)
    half = resample_iso(vol, 2.0)
    assert half.geometry.dims == (2, 2, 2)
    lo = half.geometry.world((-0.5,) * 3)
    hi = half.geometry.world((1.5,) * 3)
    np.testing.assert_allclose(lo, g.world((-0.5,) * 3), atol=1e-12)
    np.testing.assert_allclose(hi, g.world((3.5,) * 3), atol=1.0)


def test_resample_linear_gradient():
    g = GridGeometry((12, 10, 8), (1.0, 1.0, 1.0), (2.0, -1.0, 0.5))
    coef = np.array([0.3, -0.7, 1.1])
    world = g.world(g.grid())
    vol = ImageVolume(g, world @ coef + 2.0)
    out = resample_iso(vol, 1.5)
    pts = out.geometry.world(out.geometry.grid())
    # stay inside the source grid where trilinear interpolation is exact
    vox = g.voxel(pts)
    inside = np.all((vox >= 0) & (vox <= np.array(g.dims) - 1), axis=-1)
    np.testing.assert_allclose(out.data[inside], (pts @ coef + 2.0)[inside], atol=1e-6)


def test_resample_labels_nearest(rng):
    g = GridGeometry((6, 6, 6))
    lab = LabelVolume(g, rng.integers(0, 4, (6, 6, 6)))
    out = resample_iso(lab, 1.5)
    assert isinstance(out, LabelVolume)
    assert out.labels() <= lab.labels()


def test_pyramid_level():
    g = GridGeometry((8, 8, 8), (1.0, 1.0, 1.0))
    vol = ImageVolume(g, np.arange(512.0).reshape(8, 8, 8))
    assert np.array_equal(pyramid_level(vol, 1, 0).data, vol.data)
    half = pyramid_level(vol, 2, 1.0)
    assert half.geometry.dims == (4, 4, 4)
    assert half.geometry.spacing == (2.0, 2.0, 2.0)
    const = ImageVolume(g, np.full((8, 8, 8), -1.25))
    np.testing.assert_allclose(pyramid_level(const, 4, 2.0).data, -1.25, atol=1e-12)

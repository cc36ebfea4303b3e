import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from deformreg.errors import InputError
from deformreg.evaluation import negative_jd_pct
from deformreg.phantom import (
    PhantomSpec,
    generate_phantom,
    generate_smooth_deformation,
    growth_inverse,
    landmark_errors,
    make_pair,
    read_landmarks,
    simulate_growth,
    write_landmarks,
)
from deformreg.transforms import DisplacementField, compose, resample_field, warp_labels
from deformreg.volume import GridGeometry


def test_deterministic(small_phantom):
    again = generate_phantom(small_phantom.spec)
    assert np.array_equal(again.image.data, small_phantom.image.data)
    assert np.array_equal(again.labels.data, small_phantom.labels.data)
    assert np.array_equal(again.landmarks, small_phantom.landmarks)
    other = generate_phantom(PhantomSpec(dims=(24,) * 3, seed=4, spacing=2.0))
    assert not np.array_equal(other.image.data, small_phantom.image.data)


def test_spec_validation():
    with pytest.raises(InputError):
        PhantomSpec(dims=(8, 8))
    with pytest.raises(InputError):
        PhantomSpec(region_count=0)
    with pytest.raises(InputError):
        PhantomSpec(noise_sigma=-1.0)
    with pytest.raises(InputError):
        PhantomSpec(folding=0.5)


def test_labels_and_volumes():
    ph = generate_phantom(PhantomSpec())
    labels = ph.labels.data
    assert set(np.unique(labels)) == set(range(7))
    # a shell's voxel count approximates the analytic volume difference
    # (fold terms are zero-mean, so the ellipsoid volume is preserved to first order)
    vols = [e.volume for e in ph.ellipsoids] + [0.0]
    for k in range(6):
        expected = vols[k] - vols[k + 1]
        assert np.count_nonzero(labels == k + 1) == pytest.approx(expected, rel=0.05)
    assert len(ph.region_table()) == 6
    assert ph.landmarks.shape == (20, 3)


def test_intensity_range_scales_image():
    a = generate_phantom(PhantomSpec(dims=(16,) * 3, seed=2, noise_sigma=0.0))
    b = generate_phantom(PhantomSpec(dims=(16,) * 3, seed=2, noise_sigma=0.0,
                                     intensity_range=1000.0))
    np.testing.assert_allclose(b.image.data, 1000.0 * a.image.data, rtol=1e-10, atol=1e-9)


def test_zero_deformation(small_phantom):
    pair = make_pair(small_phantom, max_disp=0.0)
    assert np.all(pair.true_field.vectors == 0)
    assert np.array_equal(pair.moving_labels.data, small_phantom.labels.data)


def test_smooth_deformation_is_invertible():
    g = GridGeometry((64,) * 3)
    u = generate_smooth_deformation(g, 5.0, 6.0, seed=11)
    assert negative_jd_pct(u) == 0.0
    assert np.abs(u.vectors).max() > 1.0
    again = generate_smooth_deformation(g, 5.0, 6.0, seed=11)
    assert np.array_equal(again.vectors, u.vectors)


def test_pair_field_maps_fixed_to_moving():
    ph = generate_phantom(PhantomSpec(dims=(32,) * 3, seed=3, region_count=3))
    pair = make_pair(ph, max_disp=2.0, seed=5)
    inner = (slice(4, -4),) * 3
    fixed = pair.fixed_labels.data[inner]
    # pulling the moving labels back through the true field restores the fixed anatomy
    back = warp_labels(pair.moving_labels, pair.true_field).data[inner]
    before = np.mean(pair.moving_labels.data[inner] == fixed)
    after = np.mean(back == fixed)
    assert after > 0.93 and after > before + 0.05


def test_growth():
    ph = generate_phantom(PhantomSpec(dims=(48,) * 3, seed=1, region_count=4, noise_sigma=0.0))
    region = 4  # innermost shell, a solid ellipsoid
    image, labels, field = simulate_growth(ph, region, 1.2)
    ratio = np.count_nonzero(labels.data == region) / np.count_nonzero(ph.labels.data == region)
    assert ratio == pytest.approx(1.2 ** 3, rel=0.10)
    fwd = growth_inverse(ph, region, 1.2)
    roundtrip = compose(field, fwd).vectors
    assert np.abs(roundtrip[(slice(3, -3),) * 3]).max() < 0.1
    same = simulate_growth(ph, region, 1.0)
    assert same[1] is ph.labels
    with pytest.raises(InputError):
        simulate_growth(ph, 9, 1.1)


def test_landmark_io_and_errors(tmp_path, small_phantom):
    path = tmp_path / "lm.csv"
    write_landmarks(small_phantom.landmarks, path)
    assert np.array_equal(read_landmarks(path), small_phantom.landmarks)
    zero = DisplacementField.zeros(small_phantom.geometry)
    assert np.all(landmark_errors(zero, small_phantom.landmarks, zero) == 0.0)


def test_histogram_modes_without_noise():
    ph = generate_phantom(PhantomSpec(seed=6, noise_sigma=0.0))
    data, labels = ph.image.data, ph.labels.data
    # away from partial-volume edges the per-region intensity ranges are disjoint
    ranges = []
    for k in range(7):
        core = binary_erosion(labels == k)
        if core.any():
            ranges.append((data[core].min(), data[core].max()))
    ranges.sort()
    assert len(ranges) == 7
    assert all(hi < lo for (_, hi), (lo, _) in zip(ranges, ranges[1:]))


def test_identity_landmark_error_is_displacement(small_phantom):
    pair = make_pair(small_phantom, max_disp=2.0, seed=7)
    zero = DisplacementField.zeros(small_phantom.geometry)
    err = landmark_errors(zero, pair.landmarks, pair.true_field)
    mag = np.linalg.norm(resample_field(pair.true_field, pair.landmarks), axis=-1)
    assert np.array_equal(err, mag)

import numpy as np
import pytest

from brainshift.biomarkers import ventricle_centroid_shift
from brainshift.diffeo import jacobian_determinant
from brainshift.metrics import soft_dice, volume_balance_loss
from brainshift.phantom import PhantomSpec, downsample_case, generate_cohort, generate_phantom, inject_hematoma
from brainshift.volume import sagittal_flip, warp


def mirror_dice(masks):
    return float(soft_dice(masks.channel("ventricle_left"), masks.channel("ventricle_right")[::-1].copy()))


def test_healthy_is_mirror_symmetric(healthy):
    np.testing.assert_allclose(sagittal_flip(healthy.volume).data, healthy.volume.data, atol=1e-6)
    assert float(volume_balance_loss(healthy.volume.data)) < 1e-3
    assert mirror_dice(healthy.masks) > 0.99
    assert not np.any(healthy.ground_truth_field.data)


def test_spec_validation():
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(grid=(16, 64, 64)))
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(side="up"))
    with pytest.raises(ValueError):
        inject_hematoma(generate_phantom(PhantomSpec()), "left", 20.0)


def test_zero_thickness_is_identity(healthy):
    out = inject_hematoma(healthy, "left", 0.0)
    np.testing.assert_array_equal(out.volume.data, healthy.volume.data)
    assert out.masks.channel("hematoma").sum() == 0


def test_left_hematoma_geometry(left_case):
    hem = left_case.masks.channel("hematoma")
    nx = hem.shape[0]
    assert hem.sum() > 0
    assert hem[nx // 2:].sum() == 0
    assert left_case.laterality == "unilateral"


def test_left_hematoma_shifts_midline_right(left_case):
    assert mirror_dice(left_case.masks) < 0.9
    shift = ventricle_centroid_shift(left_case.masks)
    assert shift > 0.5
    # backward warp: tissue moving to +x is read from -x, so u_x < 0 there
    vents = (left_case.masks.channel("ventricle_left") + left_case.masks.channel("ventricle_right")) > 0.5
    assert np.sign(left_case.ground_truth_field.data[0][vents].mean()) == -np.sign(shift)


def test_ground_truth_field_diffeomorphic(left_case, bilateral_case):
    for case in (left_case, bilateral_case):
        assert jacobian_determinant(case.ground_truth_field).data.min() > 0


def test_skull_not_displaced(left_case):
    skull = left_case.masks.channel("skull") >= 0.5
    mag = np.linalg.norm(left_case.ground_truth_field.data, axis=0)
    assert mag[skull].max() < 0.1


def test_inverse_field_restores_symmetry(left_case):
    restored = warp(left_case.masks, left_case.inverse_field)
    assert mirror_dice(restored) > 0.95


def test_masks_consistent(left_case):
    m = left_case.masks
    hem = m.channel("hematoma") >= 0.5
    vents = (m.channel("ventricle_left") + m.channel("ventricle_right")) >= 0.5
    assert not np.any(hem & vents)


def test_bilateral_centroid_near_zero(bilateral_case):
    hem = bilateral_case.masks.channel("hematoma")
    h = hem.shape[0] // 2
    assert hem[:h].sum() > 0 and hem[-h:].sum() > 0
    assert abs(ventricle_centroid_shift(bilateral_case.masks)) < 0.1


def test_cohort_deterministic_and_mixed():
    a = generate_cohort(6, seed=3, severity_range=(1.0, 5.0), surgery_threshold=3.0, grid=(32, 32, 32))
    b = generate_cohort(6, seed=3, severity_range=(1.0, 5.0), surgery_threshold=3.0, grid=(32, 32, 32))
    for x, y in zip(a, b):
        assert x.case.volume.data.tobytes() == y.case.volume.data.tobytes()
        assert x.record == y.record
    assert {m.record.surgery for m in a} == {True, False}
    with pytest.raises(ValueError):
        generate_cohort(3)


def test_cohort_midline_shift_by_laterality():
    members = generate_cohort(10, seed=0, severity_range=(1.5, 7.0), surgery_threshold=4.0,
                              grid=(48, 48, 48), bilateral_fraction=0.5)
    bil = [m.record.mls_mm for m in members if m.case.side == "bilateral"]
    uni = [m.record.mls_mm for m in members if m.case.side != "bilateral"]
    assert bil and uni
    assert max(bil) < 0.2
    assert min(uni) > 0.3


def test_downsample_case(left_case):
    small = downsample_case(left_case, 16)
    assert small.volume.dims == (16, 16, 16)
    assert small.volume.spacing == (4.0, 4.0, 4.0)
    assert small.masks.channel("hematoma").sum() > 0

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cov3d.augment import AugmentConfig, _rotate, apply_augmentations, center_eval_crop, sample_seed
from cov3d.volume import Volume


def unit_volume(shape, seed=0):
    return Volume(np.random.default_rng(seed).random(shape).astype(np.float32), "unit", "v")


def test_all_disabled_is_identity():
    v = unit_volume((8, 10, 12))
    out = apply_augmentations(v, AugmentConfig.disabled(), seed=1)
    np.testing.assert_array_equal(out.voxels, v.voxels)


def test_default_config_output_shape():
    v = unit_volume((128, 256, 256))
    assert apply_augmentations(v, AugmentConfig(), seed=7).shape == (64, 256, 256)


def test_seed_determinism():
    v = unit_volume((16, 24, 24))
    cfg = AugmentConfig(depth_crop_to=8)
    a = apply_augmentations(v, cfg, 42).voxels
    b = apply_augmentations(v, cfg, 42).voxels
    c = apply_augmentations(v, cfg, 43).voxels
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_depth_crop_preserves_slices_exactly():
    v = unit_volume((20, 6, 6))
    out = apply_augmentations(v, AugmentConfig.disabled(depth_crop=True, depth_crop_to=5), seed=3).voxels
    starts = [s for s in range(16) if np.array_equal(v.voxels[s:s + 5], out)]
    assert len(starts) == 1


def test_depth_crop_too_deep():
    with pytest.raises(ValueError, match="depth_crop_to"):
        apply_augmentations(unit_volume((4, 4, 4)), AugmentConfig(depth_crop_to=8), seed=0)


def test_zero_rotation_and_full_crop_identity():
    v = unit_volume((3, 9, 11))
    np.testing.assert_allclose(_rotate(v.voxels, 0.0), v.voxels, atol=1e-6)
    cfg = AugmentConfig.disabled(resized_crop=True, crop_scale=(1.0, 1.0), crop_aspect=(1.0, 1.0))
    np.testing.assert_allclose(apply_augmentations(v, cfg, 5).voxels, v.voxels, atol=1e-6)


def test_quarter_turn_rotation():
    img = np.zeros((1, 5, 5), dtype=np.float32)
    img[0, 0, 2] = 1.0
    out = _rotate(img, 90.0)
    assert out.sum() == pytest.approx(1.0, abs=1e-6)
    assert out[0, 2, 0] == pytest.approx(1.0, abs=1e-6) or out[0, 2, 4] == pytest.approx(1.0, abs=1e-6)


def test_invalid_config():
    with pytest.raises(ValueError):
        AugmentConfig(crop_scale=(0.9, 0.5))
    with pytest.raises(ValueError):
        AugmentConfig(depth_crop_to=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_intensity_stays_in_unit_interval(seed):
    v = unit_volume((6, 12, 10), seed=seed % 97)
    cfg = AugmentConfig(depth_crop_to=4, rotation_deg=30.0, brightness_delta=0.5, contrast_range=(0.5, 2.0))
    out = apply_augmentations(v, cfg, seed).voxels
    assert out.shape == (4, 12, 10)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_sample_seed_varies_by_epoch_and_index():
    seeds = {sample_seed(1, e, i) for e in range(3) for i in range(4)}
    assert len(seeds) == 12
    assert sample_seed(1, 2, 3) == sample_seed(1, 2, 3)


@pytest.mark.parametrize("shape, depth_to, start", [((128, 4, 4), 64, 32), ((7, 2, 2), 7, 0), ((5, 2, 2), 4, 0)])
def test_center_eval_crop(shape, depth_to, start):
    v = unit_volume(shape)
    out = center_eval_crop(v, depth_to)
    np.testing.assert_array_equal(out.voxels, v.voxels[start:start + depth_to])


def test_center_eval_crop_too_deep():
    with pytest.raises(ValueError):
        center_eval_crop(unit_volume((3, 2, 2)), 4)

import numpy as np
import pytest

from virtbiopsy.augment import (
    INTENSITY_TRANSFORMS,
    AugmentationConfig,
    augment,
)
from virtbiopsy.volume import PatchStack


def make_stack(seed=0, shape=(12, 12, 6), with_prior=True):
    rng = np.random.default_rng(seed)
    img = rng.normal(0.5, 0.2, size=shape).astype(np.float32)
    if with_prior:
        prior = (rng.random(shape) > 0.5).astype(np.float32)
        return PatchStack(np.stack([img, prior]), ["image", "prior"])
    return PatchStack(img[None], ["image"])


def intensity_only_config(seed=0, **overrides):
    kwargs = dict(
        zoom_prob=0.0, affine_prob=0.0, flip_prob=0.0,
        noise_prob=1.0, smooth_prob=1.0, scale_intensity_prob=1.0,
        gamma_prob=1.0, bias_field_prob=1.0, gibbs_prob=1.0,
        rng_seed=seed,
    )
    kwargs.update(overrides)
    return AugmentationConfig(**kwargs)


def test_all_probabilities_zero_is_identity():
    stack = make_stack()
    out = augment(stack, AugmentationConfig.identity())
    np.testing.assert_array_equal(out.channels, stack.channels)


def test_deterministic_under_seed():
    stack = make_stack()
    cfg = AugmentationConfig(rng_seed=42)
    a = augment(stack, cfg)
    b = augment(stack, cfg)
    np.testing.assert_array_equal(a.channels, b.channels)


def test_flip_applies_to_all_channels_jointly():
    stack = make_stack()
    cfg = AugmentationConfig(
        zoom_prob=0.0, affine_prob=0.0, flip_prob=1.0,
        noise_prob=0.0, smooth_prob=0.0, scale_intensity_prob=0.0,
        gamma_prob=0.0, bias_field_prob=0.0, gibbs_prob=0.0, rng_seed=3,
    )
    out = augment(stack, cfg)
    # whichever axis flipped, both channels flipped the same way
    matched = False
    for axis in range(3):
        flipped = np.flip(stack.channels, axis=axis + 1)
        if np.array_equal(out.channels, flipped):
            matched = True
    assert matched


def test_intensity_transforms_leave_prior_bitwise_unchanged():
    stack = make_stack()
    out = augment(stack, intensity_only_config(seed=11))
    np.testing.assert_array_equal(out.channels[1], stack.channels[1])
    assert not np.array_equal(out.channels[0], stack.channels[0])


def test_gamma_alone_leaves_prior_unchanged():
    stack = make_stack()
    cfg = intensity_only_config(
        seed=5, noise_prob=0.0, smooth_prob=0.0, scale_intensity_prob=0.0,
        bias_field_prob=0.0, gibbs_prob=0.0, gamma_prob=1.0,
    )
    out = augment(stack, cfg)
    np.testing.assert_array_equal(out.channels[1], stack.channels[1])


@pytest.mark.parametrize("seed", range(20))
def test_prior_invariance_over_seeds(seed):
    stack = make_stack(seed=seed)
    out = augment(stack, intensity_only_config(seed=seed * 7 + 1))
    np.testing.assert_array_equal(out.channels[1], stack.channels[1])


def test_spatial_transforms_cotransform_prior():
    stack = make_stack()
    cfg = AugmentationConfig(
        zoom_prob=1.0, affine_prob=1.0, flip_prob=1.0,
        noise_prob=0.0, smooth_prob=0.0, scale_intensity_prob=0.0,
        gamma_prob=0.0, bias_field_prob=0.0, gibbs_prob=0.0, rng_seed=9,
    )
    # duplicate the image into the prior slot: spatial-only augmentation
    # must transform both identically
    img = stack.channels[0]
    both = PatchStack(np.stack([img, np.clip(img, 0, 1)]), ["image", "prior"])
    spatial_ref = PatchStack(np.stack([img, np.clip(img, 0, 1)]), ["image", "image"])
    out = augment(both, cfg)
    ref = augment(spatial_ref, cfg)
    np.testing.assert_array_equal(out.channels[1], ref.channels[1])


def test_invalid_probability_rejected():
    with pytest.raises(ValueError):
        AugmentationConfig(zoom_prob=1.5)


def test_unordered_range_rejected():
    with pytest.raises(ValueError):
        AugmentationConfig(gamma_range=(1.2, 0.8))


def test_table_defaults():
    cfg = AugmentationConfig()
    assert cfg.zoom_prob == 0.2 and cfg.zoom_range == (0.9, 1.1)
    assert cfg.affine_prob == 0.5
    assert cfg.noise_prob == 0.1 and cfg.noise_std == 0.1
    assert cfg.scale_intensity_prob == 0.2
    assert cfg.gamma_range == (0.8, 1.2)
    assert cfg.bias_coeff_range == (0.1, 0.2)
    assert cfg.gibbs_alpha == (0.6, 0.8)
    assert set(INTENSITY_TRANSFORMS) == {
        "noise", "smooth", "scale_intensity", "gamma", "bias_field", "gibbs"
    }

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from virtbiopsy.volume import (
    EmptyMaskError,
    GeometryError,
    LabelMask,
    PatchSpec,
    PatchStack,
    Volume3D,
    assemble_channels,
    crop_to_roi,
    normalize,
    resample,
)


def make_vol(data, spacing=(1.0, 1.0, 1.0)):
    return Volume3D(np.asarray(data, dtype=np.float32), spacing)


def dense_linear_oracle(values, old_spacing, new_spacing):
    """1D linear interpolation at the resampled positions."""
    n = len(values)
    m = max(1, int(np.ceil((n - 1) * old_spacing / new_spacing)) + 1)
    pos = np.clip(np.arange(m) * new_spacing / old_spacing, 0, n - 1)
    return np.interp(pos, np.arange(n), values)


class TestVolumeTypes:
    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ValueError):
            Volume3D(np.zeros((2, 2, 2), np.float32), (0.0, 1.0, 1.0))

    def test_rejects_nonfinite(self):
        data = np.zeros((2, 2, 2), np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            Volume3D(data, (1, 1, 1))

    def test_mask_rejects_labels_outside_scheme(self):
        with pytest.raises(ValueError):
            LabelMask(np.full((2, 2, 2), 5, np.int16), (1, 1, 1))

    def test_patch_spec_rejects_noncanonical(self):
        with pytest.raises(ValueError):
            PatchSpec((100, 100, 10))
        PatchSpec((100, 100, 10), allow_noncanonical=True)

    def test_prior_channel_range_enforced(self):
        chans = np.stack([np.zeros((2, 2, 2)), np.full((2, 2, 2), 2.0)])
        with pytest.raises(ValueError):
            PatchStack(chans, ["image", "prior"])

    def test_nifti_roundtrip(self, tmp_path):
        vol = make_vol(np.random.default_rng(0).normal(size=(6, 5, 4)), (0.5, 0.5, 3.0))
        vol.save(tmp_path / "v.nii.gz")
        back = Volume3D.load(tmp_path / "v.nii.gz")
        np.testing.assert_array_equal(vol.data, back.data)
        assert back.spacing == (0.5, 0.5, 3.0)

    def test_patchstack_sidecar_roundtrip(self, tmp_path):
        stack = PatchStack(
            np.random.default_rng(1).random((2, 4, 4, 2)).astype(np.float32),
            ["image", "prior"],
        )
        stack.save(tmp_path / "p")
        back = PatchStack.load(tmp_path / "p")
        np.testing.assert_array_equal(stack.channels, back.channels)
        assert back.channel_roles == ["image", "prior"]


class TestResample:
    def test_identity_returns_grid_unchanged(self):
        vol = make_vol(np.random.default_rng(0).normal(size=(8, 8, 4)), (0.5, 0.5, 3.0))
        out = resample(vol, (0.5, 0.5, 3.0))
        assert out is vol

    def test_constant_field_reproduced(self):
        vol = make_vol(np.full((8, 8, 4), 7.0), (1.0, 1.0, 3.0))
        out = resample(vol, (0.4, 0.7, 1.0))
        np.testing.assert_allclose(out.data, 7.0, atol=1e-9)
        assert out.spacing == (0.4, 0.7, 1.0)

    def test_linear_ramp_matches_dense_oracle(self):
        n = 16
        ramp = np.tile(np.arange(n, dtype=np.float32)[:, None, None], (1, 4, 4))
        vol = make_vol(ramp, (1.0, 1.0, 1.0))
        out = resample(vol, (0.5, 1.0, 1.0))
        expected = dense_linear_oracle(np.arange(n, dtype=float), 1.0, 0.5)
        np.testing.assert_allclose(out.data[:, 2, 2], expected, atol=1e-6)

    def test_extent_covers_input(self):
        vol = make_vol(np.zeros((10, 10, 5)), (1.0, 1.0, 3.0))
        out = resample(vol, (0.3, 0.3, 1.0))
        for n_new, t, n_old, s in zip(out.shape, out.spacing, vol.shape, vol.spacing):
            assert (n_new - 1) * t >= (n_old - 1) * s - 1e-9

    def test_nearest_mode_emits_only_input_values(self):
        labels = np.random.default_rng(2).integers(0, 3, size=(7, 7, 4)).astype(np.int16)
        mask = LabelMask(labels, (1.0, 1.0, 3.0), scheme={0: "background", 1: "PZ", 2: "TZ"})
        out = resample(mask, (0.4, 0.4, 1.0), mode="nearest")
        assert set(np.unique(out.labels)) <= set(np.unique(labels))

    def test_rejects_bad_spacing(self):
        vol = make_vol(np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            resample(vol, (0.0, 1.0, 1.0))

    def test_idempotent_to_same_target(self):
        ramp = np.tile(np.arange(12, dtype=np.float32)[:, None, None], (1, 6, 6))
        vol = make_vol(ramp, (1.0, 1.0, 1.0))
        once = resample(vol, (0.7, 0.7, 0.7))
        twice = resample(once, (0.7, 0.7, 0.7))
        np.testing.assert_allclose(once.data, twice.data, atol=1e-5)


class TestCropToRoi:
    def spec(self, size=(8, 8, 4)):
        return PatchSpec(size, (1, 1, 1), allow_noncanonical=True)

    def test_centered_subvolume(self):
        data = np.random.default_rng(0).normal(size=(20, 20, 10)).astype(np.float32)
        vol = make_vol(data)
        labels = np.zeros((20, 20, 10), np.int16)
        labels[8:12, 8:12, 4:6] = 1  # centroid (9.5, 9.5, 4.5) -> rounds to (10, 10, 5)
        mask = LabelMask(labels, (1, 1, 1))
        patch = crop_to_roi(vol, mask, self.spec())
        np.testing.assert_array_equal(patch.channels[0], data[6:14, 6:14, 3:7])

    def test_offset_centroid_matches_bruteforce(self):
        rng = np.random.default_rng(5)
        data = rng.normal(size=(24, 24, 12)).astype(np.float32)
        labels = np.zeros_like(data, dtype=np.int16)
        labels[3:9, 14:22, 2:5] = 1
        idx = np.argwhere(labels > 0)
        centroid = idx.mean(axis=0)
        center = tuple(int(np.sign(c) * np.floor(abs(c) + 0.5)) for c in centroid)
        vol, mask = make_vol(data), LabelMask(labels, (1, 1, 1))
        patch = crop_to_roi(vol, mask, self.spec())
        start = [c - s // 2 for c, s in zip(center, (8, 8, 4))]
        expected = data[start[0]:start[0] + 8, start[1]:start[1] + 8, start[2]:start[2] + 4]
        np.testing.assert_array_equal(patch.channels[0], expected)

    def test_edge_mask_zero_padded(self):
        data = np.ones((10, 10, 6), np.float32)
        labels = np.zeros_like(data, dtype=np.int16)
        labels[0:2, 0:2, 0:2] = 1
        patch = crop_to_roi(make_vol(data), LabelMask(labels, (1, 1, 1)), self.spec())
        assert patch.size == (8, 8, 4)
        assert (patch.channels == 0).any()  # padded region
        assert (patch.channels == 1).any()  # real data

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyMaskError):
            crop_to_roi(
                make_vol(np.zeros((5, 5, 5))),
                LabelMask(np.zeros((5, 5, 5), np.int16), (1, 1, 1)),
                self.spec(),
            )

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_output_shape_for_random_phantoms(self, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(4, 20, size=3))
        labels = np.zeros(shape, np.int16)
        n_fg = int(rng.integers(1, 10))
        for _ in range(n_fg):
            labels[tuple(rng.integers(0, s) for s in shape)] = 1
        patch = crop_to_roi(
            make_vol(rng.normal(size=shape)), LabelMask(labels, (1, 1, 1)), self.spec()
        )
        assert patch.size == (8, 8, 4)


class TestNormalize:
    def stack(self, data):
        return PatchStack(np.asarray(data, np.float32)[None], ["image"])

    def test_constant_channel_degenerate(self):
        with pytest.warns(UserWarning):
            out = normalize(self.stack(np.full((4, 4, 2), 3.0)), "pminmax")
        np.testing.assert_array_equal(out.channels[0], 0.0)
        assert out.degenerate_channels == [0]

    def test_pminmax_matches_sorting_oracle(self):
        vals = np.linspace(0, 100, 4 * 4 * 4).reshape(4, 4, 4)
        out = normalize(self.stack(vals), "pminmax")
        flat = np.sort(vals.ravel())
        pos1, pos99 = (len(flat) - 1) * 0.01, (len(flat) - 1) * 0.99
        p1 = flat[int(pos1)] + (flat[int(pos1) + 1] - flat[int(pos1)]) * (pos1 % 1)
        p99 = flat[int(pos99)] + (flat[int(np.ceil(pos99))] - flat[int(pos99)]) * (pos99 % 1)
        expected = np.clip((vals - p1) / (p99 - p1), 0, 1)
        np.testing.assert_allclose(out.channels[0], expected, atol=1e-6)

    def test_pminmax_output_in_unit_interval(self):
        rng = np.random.default_rng(7)
        out = normalize(self.stack(rng.normal(size=(6, 6, 4)) * 50), "pminmax")
        assert out.channels[0].min() >= 0.0 and out.channels[0].max() <= 1.0

    def test_zscore_moments(self):
        rng = np.random.default_rng(8)
        out = normalize(self.stack(rng.normal(3, 10, size=(8, 8, 4))), "zscore")
        assert abs(out.channels[0].mean()) < 1e-6
        assert abs(out.channels[0].std() - 1) < 1e-6

    def test_prior_untouched(self):
        prior = np.random.default_rng(9).random((4, 4, 2)).astype(np.float32)
        stack = PatchStack(
            np.stack([np.random.default_rng(10).normal(size=(4, 4, 2)).astype(np.float32), prior]),
            ["image", "prior"],
        )
        out = normalize(stack, "pminmax")
        np.testing.assert_array_equal(out.channels[1], prior)


class TestAssembleChannels:
    def test_dup_plus_prior(self):
        img = PatchStack(np.random.default_rng(0).random((1, 4, 4, 2)).astype(np.float32), ["image"])
        prior = LabelMask(np.ones((4, 4, 2), np.int16), (1, 1, 1))
        out = assemble_channels(img, prior, "dup_plus_prior")
        assert out.channel_roles == ["image", "image", "prior"]
        np.testing.assert_array_equal(out.channels[0], out.channels[1])
        np.testing.assert_array_equal(out.channels[2], prior.binarized())

    def test_image_only(self):
        img = PatchStack(np.zeros((1, 4, 4, 2), np.float32), ["image"])
        out = assemble_channels(img, None, "image_only")
        assert out.channels.shape[0] == 1

    def test_wrong_shape_prior_errors(self):
        img = PatchStack(np.zeros((1, 4, 4, 2), np.float32), ["image"])
        prior = LabelMask(np.ones((5, 4, 2), np.int16), (1, 1, 1))
        with pytest.raises(GeometryError):
            assemble_channels(img, prior, "dup_plus_prior")

    def test_missing_prior_errors(self):
        img = PatchStack(np.zeros((1, 4, 4, 2), np.float32), ["image"])
        with pytest.raises(ValueError):
            assemble_channels(img, None, "dup_plus_prior")

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from virtbiopsy.phantom import (
    CaseRecord,
    LesionFitError,
    PhantomParams,
    build_manifest,
    generate_phantom,
    load_cases_jsonl,
    save_cases_jsonl,
)


def small_params(**kw):
    base = dict(grid_size=(32, 32, 10), gland_semi_axes=(11.0, 9.0, 12.0),
                lesion_radius_range=(2.0, 4.0), high_risk_radius=3.0)
    base.update(kw)
    return PhantomParams(**base)


class TestGeneratePhantom:
    def test_deterministic_under_seed(self):
        a = generate_phantom(small_params(lesion_count=1, rng_seed=7))
        b = generate_phantom(small_params(lesion_count=1, rng_seed=7))
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].labels, b[1].labels)
        assert a[3].to_json() == b[3].to_json()

    def test_no_lesions_means_low_risk(self):
        _, _, _, rec = generate_phantom(small_params(lesion_count=0, rng_seed=1))
        assert rec.risk == "low" and rec.lesions == [] and rec.ggg == 1

    def test_zones_partition_gland(self):
        _, gland, zones, _ = generate_phantom(small_params(rng_seed=2))
        np.testing.assert_array_equal(zones.labels > 0, gland.labels > 0)
        assert ((zones.labels == 1) & (zones.labels == 2)).sum() == 0
        assert (zones.labels == 2).sum() > 0 and (zones.labels == 1).sum() > 0

    def test_large_lesion_high_risk(self):
        _, _, _, rec = generate_phantom(
            small_params(lesion_count=1, lesion_radius_range=(3.5, 4.0), rng_seed=3)
        )
        assert rec.risk == "high" and rec.ggg >= 3

    def test_lesion_cannot_fit_raises(self):
        # a sub-voxel lesion never covers a voxel center, so placement
        # exhausts its attempt budget
        with pytest.raises(LesionFitError):
            generate_phantom(
                small_params(lesion_count=1, lesion_radius_range=(0.05, 0.08), rng_seed=0)
            )

    def test_oversized_lesion_rejected_at_params(self):
        with pytest.raises(ValueError):
            small_params(lesion_count=1, lesion_radius_range=(9.0, 9.5))

    @pytest.mark.parametrize("seed", range(8))
    def test_gland_centroid_inside_grid(self, seed):
        _, gland, _, _ = generate_phantom(small_params(rng_seed=seed))
        c = np.argwhere(gland.labels > 0).mean(axis=0)
        assert all(0 < x < s - 1 for x, s in zip(c, gland.shape))

    @pytest.mark.parametrize("seed", range(6))
    def test_lesions_hypointense_vs_gland(self, seed):
        params = small_params(lesion_count=1, rng_seed=seed + 100)
        vol, gland, _, rec = generate_phantom(params)
        assert rec.lesions
        les = rec.lesions[0]
        center = np.array(les["center_mm"]) / np.array(params.spacing)
        r_vox = les["radius_mm"] / np.array(params.spacing)
        idx = np.indices(vol.shape).transpose(1, 2, 3, 0)
        inside = (((idx - center) / r_vox) ** 2).sum(axis=-1) <= 1.0
        gland_only = (gland.labels > 0) & ~inside
        margin = abs(params.lesion_contrast) * params.gland_intensity - 3 * params.noise_sigma
        assert vol.data[gland_only].mean() - vol.data[inside].mean() >= margin


class TestCaseRecord:
    def test_risk_consistent_with_ggg(self):
        with pytest.raises(ValueError):
            CaseRecord("x", 60, 7.0, "low", ggg=4)

    def test_positive_psa_required(self):
        with pytest.raises(ValueError):
            CaseRecord("x", 60, -1.0, "low")

    def test_jsonl_roundtrip(self, tmp_path):
        cases = [CaseRecord(f"c{i}", 60 + i, 7.0, "low", ggg=1) for i in range(3)]
        save_cases_jsonl(cases, tmp_path / "cases.jsonl")
        back = load_cases_jsonl(tmp_path / "cases.jsonl")
        assert [c.case_id for c in back] == ["c0", "c1", "c2"]


def make_cases(n_high, n_low):
    return [
        CaseRecord(f"h{i}", 65, 8.0, "high", ggg=3) for i in range(n_high)
    ] + [
        CaseRecord(f"l{i}", 65, 6.0, "low", ggg=1) for i in range(n_low)
    ]


class TestBuildManifest:
    def test_published_ratio_sizes(self):
        m = build_manifest(make_cases(40, 60), (0.7, 0.1, 0.2))
        assert {k: len(v) for k, v in m.splits.items()} == {"train": 70, "val": 10, "test": 20}

    def test_stratification_within_one_case(self):
        cases = make_cases(37, 84)
        m = build_manifest(cases, (0.7, 0.1, 0.2))
        global_prop = 37 / 121
        for ids in m.splits.values():
            n_pos = sum(1 for c in ids if c.startswith("h"))
            assert abs(n_pos - global_prop * len(ids)) <= 1.0

    def test_invalid_ratios(self):
        with pytest.raises(ValueError):
            build_manifest(make_cases(5, 5), (0.5, 0.5, 0.5))

    def test_too_few_cases(self):
        with pytest.raises(ValueError):
            build_manifest(make_cases(1, 1), (0.7, 0.1, 0.2))

    def test_manifest_json_roundtrip(self, tmp_path):
        m = build_manifest(make_cases(10, 10))
        m.save(tmp_path / "manifest.json")
        from virtbiopsy.phantom import Manifest

        back = Manifest.load(tmp_path / "manifest.json")
        assert back.splits == m.splits and back.stratify_by == "risk"

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 60), st.integers(2, 60), st.integers(0, 1000))
    def test_splits_disjoint_and_exhaustive(self, n_high, n_low, seed):
        cases = make_cases(n_high, n_low)
        m = build_manifest(cases, (0.7, 0.1, 0.2), rng_seed=seed)
        all_ids = sorted(m.all_ids())
        assert all_ids == sorted(c.case_id for c in cases)
        assert sum(len(v) for v in m.splits.values()) == len(cases)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 50), st.integers(3, 50), st.integers(0, 1000))
    def test_stratification_property(self, n_high, n_low, seed):
        cases = make_cases(n_high, n_low)
        m = build_manifest(cases, (0.7, 0.1, 0.2), rng_seed=seed)
        prop = n_high / (n_high + n_low)
        for ids in m.splits.values():
            if not ids:
                continue
            n_pos = sum(1 for c in ids if c.startswith("h"))
            assert abs(n_pos - prop * len(ids)) <= 1.0

"""Case stores: uniform access to volumes, masks and records by case id.

An in-memory store backs desk-scale tests; the directory store persists
the same layout under a dataset root (one directory per case holding
NIfTI grids plus a cases.jsonl / manifest.json at the root).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, replace
from pathlib import Path

from .phantom import (
    CaseRecord,
    Manifest,
    PhantomParams,
    generate_phantom,
    load_cases_jsonl,
    save_cases_jsonl,
)
from .volume import LabelMask, Volume3D, ZONE_SCHEME


@dataclass
class Case:
    """Everything known about one case."""

    record: CaseRecord
    volume: Volume3D
    gland: LabelMask
    zones: LabelMask


class CaseStore:
    """In-memory mapping of case id to Case."""

    def __init__(self, cases: dict[str, Case] | None = None):
        self._cases = dict(cases or {})

    def __contains__(self, case_id):
        return case_id in self._cases

    def __len__(self):
        return len(self._cases)

    def ids(self) -> list[str]:
        return sorted(self._cases)

    def get(self, case_id: str) -> Case:
        if case_id not in self._cases:
            raise KeyError(f"unknown case {case_id!r}")
        return self._cases[case_id]

    def add(self, case: Case):
        self._cases[case.record.case_id] = case

    def records(self) -> list[CaseRecord]:
        return [self._cases[cid].record for cid in self.ids()]

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for cid in self.ids():
            case = self._cases[cid]
            d = root / cid
            d.mkdir(exist_ok=True)
            case.volume.save(d / "volume.nii.gz")
            case.gland.save(d / "gland.nii.gz")
            case.zones.save(d / "zones.nii.gz")
        save_cases_jsonl(self.records(), root / "cases.jsonl")

    @classmethod
    def load(cls, root) -> "CaseStore":
        root = Path(root)
        records = load_cases_jsonl(root / "cases.jsonl")
        cases = {}
        for rec in records:
            d = root / rec.case_id
            cases[rec.case_id] = Case(
                record=rec,
                volume=Volume3D.load(d / "volume.nii.gz"),
                gland=LabelMask.load(d / "gland.nii.gz"),
                zones=LabelMask.load(d / "zones.nii.gz", scheme=ZONE_SCHEME),
            )
        return cls(cases)


def generate_dataset(
    n_cases: int,
    seed: int = 0,
    prevalence: float = 0.5,
    base_params: PhantomParams | None = None,
) -> CaseStore:
    """Generate a deterministic phantom cohort.

    High-risk cases get a large hypointense lesion, low-risk cases get
    none, so the cohort is separable by construction. Prevalence is the
    fraction of high-risk cases (configurable, not fixed to any one
    dataset's balance).
    """
    base = base_params or PhantomParams()
    cases: dict[str, Case] = {}
    n_high = round(n_cases * prevalence)
    for i in range(n_cases):
        want_high = i < n_high
        if want_high:
            lo = max(base.high_risk_radius, base.lesion_radius_range[0])
            radius_range = (lo, max(lo + 1e-6, base.lesion_radius_range[1]))
            params = replace(base, rng_seed=seed * 100000 + i, lesion_count=1,
                             lesion_radius_range=radius_range)
        else:
            params = replace(base, rng_seed=seed * 100000 + i, lesion_count=0)
        volume, gland, zones, record = generate_phantom(params)
        record = dataclasses.replace(record, case_id=f"case-{seed:03d}-{i:04d}")
        cases[record.case_id] = Case(record, volume, gland, zones)
    return CaseStore(cases)


def split_cases(store: CaseStore, manifest: Manifest, split: str) -> list[Case]:
    return [store.get(cid) for cid in manifest.splits[split]]

"""Deterministic synthetic prostate phantoms with known ground truth.

Each phantom is a T2w-like volume containing an ellipsoidal gland split
into a transition-zone core and a peripheral-zone shell, optionally with
hypointense lesions implanted in the gland. Risk labels follow the
grade-group rule (GGG >= 3 is high risk), with GGG assigned from lesion
size so labels are a deterministic function of the implanted anatomy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import GLAND_SCHEME, ZONE_SCHEME, LabelMask, Volume3D


class LesionFitError(ValueError):
    """Raised when a lesion cannot be placed inside the gland."""


@dataclass
class PhantomParams:
    """Geometry, intensity and lesion settings for one synthetic case."""

    grid_size: tuple[int, int, int] = (64, 64, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)
    gland_semi_axes: tuple[float, float, float] = (22.0, 18.0, 16.0)  # mm
    center_jitter: float = 2.0  # mm, uniform per axis
    tz_fraction: float = 0.55
    lesion_count: int = 0
    lesion_radius_range: tuple[float, float] = (3.0, 6.0)  # mm
    lesion_contrast: float = -0.5  # relative hypointensity
    background_intensity: float = 0.2
    gland_intensity: float = 1.0
    pz_offset: float = 0.15
    tz_offset: float = -0.1
    noise_sigma: float = 0.02
    high_risk_radius: float = 4.0  # mm, lesion radius threshold for GGG >= 3
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tz_fraction < 1.0:
            raise ValueError(f"tz_fraction must be in (0,1), got {self.tz_fraction}")
        if self.lesion_count < 0:
            raise ValueError("lesion_count must be >= 0")
        lo, hi = self.lesion_radius_range
        if lo > hi or lo <= 0:
            raise ValueError(f"bad lesion radius range {self.lesion_radius_range}")
        if hi >= min(self.gland_semi_axes):
            raise ValueError("lesion radius must be smaller than the gland minor semi-axis")
        if not -1.0 < self.lesion_contrast < 0.0:
            raise ValueError(f"lesion contrast must be in (-1, 0), got {self.lesion_contrast}")


@dataclass
class CaseRecord:
    """Clinical metadata and label for one case."""

    case_id: str
    age: float
    psa: float
    risk: str  # "low" | "high"
    ggg: int | None = None
    psa_density: float | None = None
    volume_ref: str | None = None
    lesions: list = field(default_factory=list)  # [{center_mm, radius_mm}] for phantoms

    def __post_init__(self):
        if self.risk not in ("low", "high"):
            raise ValueError(f"risk must be low|high, got {self.risk!r}")
        if self.psa <= 0:
            raise ValueError("psa must be > 0")
        if self.age <= 0:
            raise ValueError("age must be > 0")
        if self.ggg is not None:
            if not 1 <= self.ggg <= 5:
                raise ValueError(f"ggg must be 1..5, got {self.ggg}")
            expected = "high" if self.ggg >= 3 else "low"
            if self.risk != expected:
                raise ValueError(f"risk {self.risk!r} inconsistent with ggg {self.ggg}")

    @property
    def label(self) -> int:
        return 1 if self.risk == "high" else 0

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "age": self.age,
            "psa": self.psa,
            "risk": self.risk,
            "ggg": self.ggg,
            "psa_density": self.psa_density,
            "volume_ref": self.volume_ref,
            "lesions": self.lesions,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CaseRecord":
        return cls(**d)


@dataclass
class Manifest:
    """Disjoint, exhaustive train/val/test split of case ids."""

    splits: dict[str, list[str]]
    ratios: tuple[float, ...]
    stratify_by: str = "risk"

    def __post_init__(self):
        seen: set[str] = set()
        for name, ids in self.splits.items():
            dup = seen & set(ids)
            if dup:
                raise ValueError(f"case ids {sorted(dup)} appear in multiple splits")
            seen |= set(ids)

    def all_ids(self) -> list[str]:
        return [cid for ids in self.splits.values() for cid in ids]

    def save(self, path):
        Path(path).write_text(json.dumps(
            {"splits": self.splits, "ratios": list(self.ratios), "stratify_by": self.stratify_by},
            indent=2,
        ))

    @classmethod
    def load(cls, path) -> "Manifest":
        d = json.loads(Path(path).read_text())
        return cls(d["splits"], tuple(d["ratios"]), d["stratify_by"])


def _ellipsoid(shape, spacing, center_mm, semi_axes_mm) -> np.ndarray:
    axes = [np.arange(n) * s for n, s in zip(shape, spacing)]
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    return (
        ((xx - center_mm[0]) / semi_axes_mm[0]) ** 2
        + ((yy - center_mm[1]) / semi_axes_mm[1]) ** 2
        + ((zz - center_mm[2]) / semi_axes_mm[2]) ** 2
    ) <= 1.0


def _assign_ggg(radius: float, params: PhantomParams) -> int:
    """Grade group from lesion size bands; >= high_risk_radius maps to 3..5."""
    lo, hi = params.lesion_radius_range
    thr = params.high_risk_radius
    if radius < thr:
        return 2
    if hi <= thr:
        return 3
    band = (radius - thr) / (hi - thr)  # in [0, 1]
    return 3 + min(2, int(band * 3))


def generate_phantom(params: PhantomParams):
    """Build one phantom: (volume, gland mask, zones mask, case record).

    Deterministic under params.rng_seed. Zones partition the gland
    (PZ union TZ == gland, disjoint); lesions are hypointense spheres
    fully inside the gland, preferentially in the PZ shell.
    """
    rng = np.random.default_rng(params.rng_seed)
    shape = tuple(params.grid_size)
    spacing = tuple(params.spacing)
    extent = [n * s for n, s in zip(shape, spacing)]
    center = np.array([e / 2.0 for e in extent])
    center += rng.uniform(-params.center_jitter, params.center_jitter, size=3)

    semi = np.asarray(params.gland_semi_axes, dtype=float)
    gland = _ellipsoid(shape, spacing, center, semi)
    tz = _ellipsoid(shape, spacing, center, semi * params.tz_fraction)
    tz &= gland
    pz = gland & ~tz

    zones = np.zeros(shape, dtype=np.int16)
    zones[pz] = 1
    zones[tz] = 2

    vol = np.full(shape, params.background_intensity, dtype=np.float32)
    vol[pz] = params.gland_intensity + params.pz_offset
    vol[tz] = params.gland_intensity + params.tz_offset

    lesions = []
    max_radius = 0.0
    for _ in range(params.lesion_count):
        radius = float(rng.uniform(*params.lesion_radius_range))
        placed = False
        for _attempt in range(200):
            # sample a center inside a shrunk gland so the sphere fits
            margin = radius / semi
            if np.any(margin >= 1.0):
                break
            u = rng.uniform(-1.0, 1.0, size=3) * (1.0 - margin)
            if np.sum(u**2) > 1.0:
                continue
            lesion_center = center + u * semi
            # prefer PZ: accept TZ placements only after several tries
            ball = _ellipsoid(shape, spacing, lesion_center, (radius,) * 3)
            if not ball.any() or not (ball <= gland).all():
                continue
            in_pz = (ball & pz).sum() >= 0.5 * ball.sum()
            if not in_pz and _attempt < 50:
                continue
            vol[ball] += params.lesion_contrast * params.gland_intensity
            lesions.append({"center_mm": [float(c) for c in lesion_center], "radius_mm": radius})
            max_radius = max(max_radius, radius)
            placed = True
            break
        if not placed:
            raise LesionFitError(
                f"could not fit a lesion of radius {radius:.1f} mm inside the gland"
            )

    vol += rng.normal(0.0, params.noise_sigma, size=shape).astype(np.float32)

    if lesions and max_radius >= params.high_risk_radius:
        ggg = _assign_ggg(max_radius, params)
    elif lesions:
        ggg = 2
    else:
        ggg = 1
    risk = "high" if ggg >= 3 else "low"

    # clinical fields sampled around published medians (age 68, PSA 7.5)
    age = float(np.clip(rng.normal(68.0, 8.0), 45.0, 90.0))
    psa = float(np.clip(rng.lognormal(np.log(7.5), 0.5), 0.5, 60.0))
    record = CaseRecord(
        case_id=f"phantom-{params.rng_seed:05d}",
        age=age,
        psa=psa,
        risk=risk,
        ggg=ggg,
        lesions=lesions,
    )
    volume = Volume3D(vol, spacing)
    gland_mask = LabelMask(gland.astype(np.int16), spacing, scheme=dict(GLAND_SCHEME))
    zone_mask = LabelMask(zones, spacing, scheme=dict(ZONE_SCHEME))
    return volume, gland_mask, zone_mask, record


def _largest_remainder(total: int, ratios) -> list[int]:
    raw = [total * r for r in ratios]
    base = [int(np.floor(x)) for x in raw]
    rem = total - sum(base)
    order = np.argsort([b - x for b, x in zip(base, raw)])  # largest fractional part first
    for i in order[:rem]:
        base[i] += 1
    return base


def build_manifest(cases, ratios=(0.7, 0.1, 0.2), stratify_by: str = "risk", rng_seed: int = 0) -> Manifest:
    """Stratified train/val/test split.

    Split sizes follow the ratios within rounding; every split's
    per-class count stays within one case of the class's global
    proportion applied to that split size.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ValueError("expected exactly three ratios (train, val, test)")
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be positive and sum to 1, got {ratios}")
    names = ("train", "val", "test")
    total = len(cases)
    if total < len(ratios):
        raise ValueError(f"need at least {len(ratios)} cases, got {total}")

    rng = np.random.default_rng(rng_seed)
    strata: dict[object, list[str]] = {}
    for c in cases:
        key = getattr(c, stratify_by)
        strata.setdefault(key, []).append(c.case_id)
    classes = sorted(strata, key=str)

    target_sizes = _largest_remainder(total, ratios)
    # per-class allocation, then column sums forced to the target sizes
    counts = {c: _largest_remainder(len(strata[c]), ratios) for c in classes}

    def ideal(c, s):
        return len(strata[c]) / total * target_sizes[s]

    for _ in range(total):
        col = [sum(counts[c][s] for c in classes) for s in range(3)]
        diffs = [col[s] - target_sizes[s] for s in range(3)]
        if max(diffs) <= 0:
            break
        s_hi = int(np.argmax(diffs))
        s_lo = int(np.argmin(diffs))
        # move one case of the class most over its ideal in s_hi
        c_mv = max(classes, key=lambda c: counts[c][s_hi] - ideal(c, s_hi))
        counts[c_mv][s_hi] -= 1
        counts[c_mv][s_lo] += 1

    # repair pass: enforce per-split class proportion within +/- 1 case
    for _ in range(total):
        worst = None
        for c in classes:
            for s in range(3):
                err = counts[c][s] - ideal(c, s)
                if worst is None or abs(err) > abs(worst[2]):
                    worst = (c, s, err)
        c, s, err = worst
        if abs(err) <= 1.0:
            break
        other = min(range(3), key=lambda t: counts[c][t] - ideal(c, t)) if err > 0 else \
            max(range(3), key=lambda t: counts[c][t] - ideal(c, t))
        # swap with the class most imbalanced the opposite way between s and other
        cc = min(classes, key=lambda k: (counts[k][s] - ideal(k, s)) * np.sign(err))
        if cc == c or counts[c][s if err > 0 else other] == 0 or counts[cc][other if err > 0 else s] == 0:
            break
        if err > 0:
            counts[c][s] -= 1
            counts[c][other] += 1
            counts[cc][other] -= 1
            counts[cc][s] += 1
        else:
            counts[c][other] -= 1
            counts[c][s] += 1
            counts[cc][s] -= 1
            counts[cc][other] += 1

    splits: dict[str, list[str]] = {n: [] for n in names}
    for c in classes:
        ids = sorted(strata[c])
        rng.shuffle(ids)
        start = 0
        for s, name in enumerate(names):
            splits[name].extend(ids[start : start + counts[c][s]])
            start += counts[c][s]

    return Manifest({n: sorted(splits[n]) for n in names}, ratios, stratify_by)


def save_cases_jsonl(cases, path):
    with open(path, "w") as f:
        for c in cases:
            f.write(json.dumps(c.to_json()) + "\n")


def load_cases_jsonl(path) -> list[CaseRecord]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(CaseRecord.from_json(json.loads(line)))
    return out

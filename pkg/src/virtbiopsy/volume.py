"""Geometry-aware 3D volume handling.

Volumes and masks carry per-axis spacing (mm/voxel) and a world origin.
Canonical axis order is (x, y, z) with slices along z; NIfTI I/O converts
into this order on load.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import niftiio

# Canonical patch geometries for the classification pipeline.
CANONICAL_PATCH_SIZES = ((224, 224, 28), (192, 192, 24), (160, 160, 20))
CLASSIFICATION_SPACING = (0.3125, 0.3125, 3.0)
SEGMENTATION_SPACING = (0.5, 0.5, 3.0)

GLAND_SCHEME = {0: "background", 1: "gland"}
ZONE_SCHEME = {0: "background", 1: "PZ", 2: "TZ"}


class GeometryError(ValueError):
    """Raised when two grids that must share geometry do not."""


class EmptyMaskError(ValueError):
    """Raised when an operation needs a non-empty ROI and the mask has none."""


@dataclass
class Volume3D:
    """A 3D scalar grid with voxel spacing (mm) and world origin (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"Volume3D needs a 3D grid, got ndim={self.data.ndim}")
        if any(d < 1 for d in self.data.shape):
            raise ValueError(f"degenerate grid shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite intensities")

    @property
    def shape(self):
        return self.data.shape

    def save(self, path):
        niftiio.save_nifti(path, self.data.astype(np.float32), self.spacing, self.origin)

    @classmethod
    def load(cls, path):
        data, spacing, origin = niftiio.load_nifti(path)
        return cls(data.astype(np.float32), spacing, origin)


@dataclass
class LabelMask:
    """An integer label grid sharing geometry with its paired volume.

    scheme maps label value -> name, e.g. {0: background, 1: gland} or
    {0: background, 1: PZ, 2: TZ}.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scheme: dict = field(default_factory=lambda: dict(GLAND_SCHEME))

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"LabelMask needs a 3D grid, got ndim={self.labels.ndim}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must be integer, got {self.labels.dtype}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        allowed = set(self.scheme)
        present = set(np.unique(self.labels).tolist())
        if not present <= allowed:
            raise ValueError(f"labels {sorted(present - allowed)} not in scheme {self.scheme}")

    @property
    def shape(self):
        return self.labels.shape

    def binarized(self) -> np.ndarray:
        """Foreground indicator in [0,1], float32."""
        return (self.labels > 0).astype(np.float32)

    def save(self, path):
        niftiio.save_nifti(path, self.labels.astype(np.int16), self.spacing, self.origin)

    @classmethod
    def load(cls, path, scheme=None):
        data, spacing, origin = niftiio.load_nifti(path)
        labels = np.rint(data).astype(np.int16)
        if scheme is None:
            scheme = ZONE_SCHEME if labels.max() > 1 else GLAND_SCHEME
        return cls(labels, spacing, origin, scheme=dict(scheme))


@dataclass
class PatchSpec:
    """Target patch geometry for classification inputs."""

    size: tuple[int, int, int] = CANONICAL_PATCH_SIZES[0]
    target_spacing: tuple[float, float, float] = CLASSIFICATION_SPACING
    allow_noncanonical: bool = False

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        self.target_spacing = tuple(float(v) for v in self.target_spacing)
        if any(v < 1 for v in self.size):
            raise ValueError(f"patch size must be positive, got {self.size}")
        if self.size not in CANONICAL_PATCH_SIZES and not self.allow_noncanonical:
            raise ValueError(
                f"{self.size} is not a canonical patch size {CANONICAL_PATCH_SIZES}; "
                "set allow_noncanonical=True to override"
            )


@dataclass
class PatchStack:
    """A multi-channel patch: channels stacked as (C, W, H, D)."""

    channels: np.ndarray
    channel_roles: list[str]
    spacing: tuple[float, float, float] = CLASSIFICATION_SPACING
    degenerate_channels: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 4:
            raise ValueError(f"channels must be (C, W, H, D), got ndim={self.channels.ndim}")
        if self.channels.shape[0] < 1:
            raise ValueError("need at least one channel")
        if len(self.channel_roles) != self.channels.shape[0]:
            raise ValueError("one role per channel required")
        bad = set(self.channel_roles) - {"image", "prior"}
        if bad:
            raise ValueError(f"unknown channel roles {sorted(bad)}")
        for i, role in enumerate(self.channel_roles):
            if role == "prior":
                ch = self.channels[i]
                if ch.min() < 0 or ch.max() > 1:
                    raise ValueError(f"prior channel {i} has values outside [0,1]")

    @property
    def size(self):
        return self.channels.shape[1:]

    def image_indices(self):
        return [i for i, r in enumerate(self.channel_roles) if r == "image"]

    def prior_indices(self):
        return [i for i, r in enumerate(self.channel_roles) if r == "prior"]

    def copy(self) -> "PatchStack":
        return PatchStack(
            self.channels.copy(),
            list(self.channel_roles),
            self.spacing,
            list(self.degenerate_channels),
        )

    def save(self, stem):
        """Write channels as NIfTI files plus a JSON sidecar with roles."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        paths = []
        for i in range(self.channels.shape[0]):
            p = stem.parent / f"{stem.name}_c{i}.nii.gz"
            niftiio.save_nifti(p, self.channels[i], self.spacing)
            paths.append(p.name)
        sidecar = {
            "channel_roles": self.channel_roles,
            "channels": paths,
            "spacing": list(self.spacing),
            "degenerate_channels": self.degenerate_channels,
        }
        (stem.parent / f"{stem.name}.json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, stem):
        stem = Path(stem)
        sidecar = json.loads((stem.parent / f"{stem.name}.json").read_text())
        chans = []
        for name in sidecar["channels"]:
            data, _, _ = niftiio.load_nifti(stem.parent / name)
            chans.append(data.astype(np.float32))
        return cls(
            np.stack(chans),
            sidecar["channel_roles"],
            tuple(sidecar["spacing"]),
            sidecar.get("degenerate_channels", []),
        )


def _check_same_geometry(a, b):
    sa = a.shape
    sb = b.shape
    if sa != sb or not np.allclose(a.spacing, b.spacing):
        raise GeometryError(
            f"geometry mismatch: shapes {sa} vs {sb}, spacings {a.spacing} vs {b.spacing}"
        )


def resample(vol, target_spacing, mode: str = "bspline"):
    """Resample a Volume3D or LabelMask to a new spacing.

    B-spline (order 3) interpolation for images, nearest neighbour for
    masks. Output grids align first-voxel centers with the input and are
    sized to cover the input physical extent.
    """
    if mode not in ("bspline", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise ValueError(f"target spacing must be strictly positive, got {target_spacing}")

    is_mask = isinstance(vol, LabelMask)
    grid = vol.labels if is_mask else vol.data
    spacing = vol.spacing
    if np.allclose(spacing, target_spacing):
        return vol  # identity: grid returned unchanged

    shape = grid.shape
    new_shape = tuple(
        max(1, int(np.ceil((n - 1) * s / t)) + 1)
        for n, s, t in zip(shape, spacing, target_spacing)
    )
    order = 0 if (mode == "nearest" or is_mask) else 3
    # odd-reflection padding linearly continues the field past the edges,
    # keeping the cubic prefilter polynomial-exact up to degree 1
    pad = 12 if order else 0
    axes = [
        np.clip(np.arange(m) * t / s, 0, n - 1) + pad
        for m, n, s, t in zip(new_shape, shape, spacing, target_spacing)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    src = grid.astype(np.float64) if order else grid
    if pad:
        src = np.pad(src, pad, mode="reflect", reflect_type="odd")
    out = ndimage.map_coordinates(src, np.stack(coords), order=order, mode="nearest")
    if is_mask:
        return LabelMask(out.astype(vol.labels.dtype), target_spacing, vol.origin, dict(vol.scheme))
    return Volume3D(out.astype(np.float32), target_spacing, vol.origin)


def _round_half_away(x: float) -> int:
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def mask_centroid(mask: LabelMask) -> tuple[int, int, int]:
    """Rounded (half-away-from-zero) voxel centroid of the mask foreground."""
    idx = np.argwhere(mask.labels > 0)
    if idx.size == 0:
        raise EmptyMaskError("mask has no foreground voxels, no ROI to center on")
    center = idx.mean(axis=0)
    return tuple(_round_half_away(c) for c in center)


def crop_to_roi(vol: Volume3D, gland: LabelMask, spec: PatchSpec) -> PatchStack:
    """Crop a patch of spec.size centered on the gland centroid.

    Regions outside the volume are zero-padded.
    """
    _check_same_geometry(vol, gland)
    center = mask_centroid(gland)
    out = crop_centered(vol.data, center, spec.size)
    return PatchStack(out[None], ["image"], vol.spacing)


def crop_centered(grid: np.ndarray, center, size) -> np.ndarray:
    """Extract a zero-padded window of the given size centered at a voxel."""
    out = np.zeros(tuple(size), dtype=np.float32)
    starts = [c - s // 2 for c, s in zip(center, size)]
    src = []
    dst = []
    for st, s, n in zip(starts, size, grid.shape):
        lo, hi = max(st, 0), min(st + s, n)
        if lo >= hi:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - st, hi - st))
    out[tuple(dst)] = grid[tuple(src)]
    return out


def _sorted_percentile(values: np.ndarray, q: float) -> float:
    # Linear-interpolated quantile over the sorted sample.
    v = np.sort(values.ravel())
    pos = (len(v) - 1) * q / 100.0
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    return float(v[lo] + (v[hi] - v[lo]) * (pos - lo))


def normalize(patch: PatchStack, method: str = "pminmax") -> PatchStack:
    """Normalize image channels; prior channels pass through untouched.

    pminmax maps [p1, p99] to [0,1] with clipping; zscore yields mean 0,
    std 1 per channel. Degenerate channels (p1 == p99 or std == 0) come
    back as all zeros with a warning and are listed in
    degenerate_channels.
    """
    if method not in ("zscore", "pminmax"):
        raise ValueError(f"unknown normalization method {method!r}")
    out = patch.copy()
    for i in out.image_indices():
        ch = out.channels[i]
        if not np.all(np.isfinite(ch)):
            raise ValueError(f"image channel {i} contains non-finite values")
        if method == "pminmax":
            p1 = _sorted_percentile(ch, 1.0)
            p99 = _sorted_percentile(ch, 99.0)
            if p99 <= p1:
                warnings.warn(f"degenerate image channel {i} (p1 == p99), emitting zeros")
                out.channels[i] = 0.0
                out.degenerate_channels.append(i)
                continue
            out.channels[i] = np.clip((ch - p1) / (p99 - p1), 0.0, 1.0)
        else:
            std = float(ch.std())
            if std == 0.0:
                warnings.warn(f"degenerate image channel {i} (std == 0), emitting zeros")
                out.channels[i] = 0.0
                out.degenerate_channels.append(i)
                continue
            out.channels[i] = (ch - ch.mean()) / std
    return out


def assemble_channels(image: PatchStack, prior: LabelMask | None, mode: str = "image_only") -> PatchStack:
    """Build the classifier input stack.

    image_only keeps a single image channel; dup_plus_prior duplicates
    the image and appends the binarized prior as a third channel.
    """
    if mode not in ("image_only", "dup_plus_prior"):
        raise ValueError(f"unknown channel mode {mode!r}")
    img = image.channels[image.image_indices()[0]]
    if mode == "image_only":
        return PatchStack(img[None], ["image"], image.spacing)
    if prior is None:
        raise ValueError("dup_plus_prior requires an anatomical prior mask")
    if prior.shape != img.shape:
        raise GeometryError(f"prior shape {prior.shape} does not match patch {img.shape}")
    return PatchStack(
        np.stack([img, img, prior.binarized()]),
        ["image", "image", "prior"],
        image.spacing,
    )

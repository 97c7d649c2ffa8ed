"""Training-time augmentation for multi-channel patches.

Spatial transforms (zoom, affine, flip) are applied with identical
parameters to every channel; intensity transforms (noise, smoothing,
scaling, gamma, bias field, Gibbs ringing) touch image channels only so
anatomical priors stay bitwise intact. Deterministic under a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import PatchStack


def _check_range(name, rng):
    lo, hi = rng
    if lo > hi:
        raise ValueError(f"{name} range must be ordered (min <= max), got {rng}")
    return (float(lo), float(hi))


@dataclass
class AugmentationConfig:
    """Per-transform probabilities and parameter ranges."""

    zoom_prob: float = 0.2
    zoom_range: tuple[float, float] = (0.9, 1.1)
    affine_prob: float = 0.5
    rotate_range_z: float = math.pi / 15
    shear_range: tuple[float, float] = (-0.1, 0.1)
    scale_range: tuple[float, float] = (-0.1, 0.1)
    flip_prob: float = 0.2
    noise_prob: float = 0.1
    noise_mean: float = 0.0
    noise_std: float = 0.1
    smooth_prob: float = 0.1
    smooth_sigma: tuple[float, float] = (0.5, 1.0)
    scale_intensity_prob: float = 0.2
    scale_intensity_factors: tuple[float, float] = (0.8, 1.2)
    gamma_prob: float = 0.2
    gamma_range: tuple[float, float] = (0.8, 1.2)
    bias_field_prob: float = 0.1
    bias_coeff_range: tuple[float, float] = (0.1, 0.2)
    gibbs_prob: float = 0.1
    gibbs_alpha: tuple[float, float] = (0.6, 0.8)
    rng_seed: int = 0

    def __post_init__(self):
        for name in (
            "zoom_prob", "affine_prob", "flip_prob", "noise_prob", "smooth_prob",
            "scale_intensity_prob", "gamma_prob", "bias_field_prob", "gibbs_prob",
        ):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {p}")
        self.zoom_range = _check_range("zoom", self.zoom_range)
        self.shear_range = _check_range("shear", self.shear_range)
        self.scale_range = _check_range("scale", self.scale_range)
        self.smooth_sigma = _check_range("smooth_sigma", self.smooth_sigma)
        self.scale_intensity_factors = _check_range("scale_intensity", self.scale_intensity_factors)
        self.gamma_range = _check_range("gamma", self.gamma_range)
        self.bias_coeff_range = _check_range("bias_coeff", self.bias_coeff_range)
        self.gibbs_alpha = _check_range("gibbs_alpha", self.gibbs_alpha)

    @classmethod
    def identity(cls, rng_seed: int = 0) -> "AugmentationConfig":
        """All probabilities zero: augment() is the identity."""
        kwargs = {f.name: 0.0 for f in _PROB_FIELDS}
        return cls(rng_seed=rng_seed, **kwargs)


_PROB_FIELDS = [
    f for f in AugmentationConfig.__dataclass_fields__.values() if f.name.endswith("_prob")
]

SPATIAL_TRANSFORMS = ("zoom", "affine", "flip")
INTENSITY_TRANSFORMS = ("noise", "smooth", "scale_intensity", "gamma", "bias_field", "gibbs")


def _affine_matrix(shape, rot_z, shears, scales):
    c = np.array([(n - 1) / 2.0 for n in shape])
    cos, sin = math.cos(rot_z), math.sin(rot_z)
    rot = np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
    shear = np.array([[1.0, shears[0], shears[1]], [0.0, 1.0, shears[2]], [0.0, 0.0, 1.0]])
    scale = np.diag(1.0 + np.asarray(scales))
    m = rot @ shear @ scale
    # output->input map about the grid center
    minv = np.linalg.inv(m)
    offset = c - minv @ c
    return minv, offset


def _apply_spatial(channels, matrix, offset):
    out = np.empty_like(channels)
    for i in range(channels.shape[0]):
        out[i] = ndimage.affine_transform(
            channels[i], matrix, offset=offset, order=1, mode="constant", cval=0.0
        )
    return out


def _bias_field(shape, rng, coeff_range):
    # smooth multiplicative field exp(low-order polynomial in [-1,1]^3)
    axes = [np.linspace(-1.0, 1.0, n, dtype=np.float32) for n in shape]
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    basis = [np.ones(shape, np.float32), xx, yy, zz, xx * yy, xx * zz, yy * zz, xx * xx, yy * yy, zz * zz]
    lo, hi = coeff_range
    coeffs = rng.uniform(lo, hi, size=len(basis)) * rng.choice([-1.0, 1.0], size=len(basis))
    log_field = sum(c * b for c, b in zip(coeffs, basis))
    return np.exp(log_field.astype(np.float32))


def _gibbs(ch, alpha):
    # truncate high spatial frequencies in k-space; alpha is the cut fraction
    k = np.fft.fftshift(np.fft.fftn(ch))
    dists = []
    for n in ch.shape:
        ax = np.abs(np.arange(n) - n // 2) / max(n // 2, 1)
        dists.append(ax)
    dd = np.maximum.reduce(np.meshgrid(*dists, indexing="ij"))
    mask = dd <= (1.0 - alpha)
    return np.real(np.fft.ifftn(np.fft.ifftshift(k * mask))).astype(np.float32)


def augment(patch: PatchStack, cfg: AugmentationConfig, seed: int | None = None) -> PatchStack:
    """Apply the configured augmentation menu to a patch.

    Pure function of (patch, cfg, seed): repeated calls are bitwise
    identical. seed defaults to cfg.rng_seed.
    """
    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    out = patch.copy()
    chans = out.channels
    shape = chans.shape[1:]

    # --- spatial: identical parameters for every channel ---
    if rng.random() < cfg.zoom_prob:
        factor = rng.uniform(*cfg.zoom_range)
        minv, offset = _affine_matrix(shape, 0.0, (0, 0, 0), (factor - 1.0,) * 3)
        chans = _apply_spatial(chans, minv, offset)
    if rng.random() < cfg.affine_prob:
        rot_z = rng.uniform(-cfg.rotate_range_z, cfg.rotate_range_z)
        shears = rng.uniform(cfg.shear_range[0], cfg.shear_range[1], size=3)
        scales = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=3)
        minv, offset = _affine_matrix(shape, rot_z, shears, scales)
        chans = _apply_spatial(chans, minv, offset)
    if rng.random() < cfg.flip_prob:
        axis = int(rng.integers(0, 3))
        chans = np.flip(chans, axis=axis + 1).copy()

    # --- intensity: image channels only ---
    img_idx = out.image_indices()

    if rng.random() < cfg.noise_prob:
        for i in img_idx:
            chans[i] = chans[i] + rng.normal(cfg.noise_mean, cfg.noise_std, size=shape).astype(np.float32)
    if rng.random() < cfg.smooth_prob:
        sigmas = rng.uniform(cfg.smooth_sigma[0], cfg.smooth_sigma[1], size=3)
        for i in img_idx:
            chans[i] = ndimage.gaussian_filter(chans[i], sigma=sigmas).astype(np.float32)
    if rng.random() < cfg.scale_intensity_prob:
        factor = rng.uniform(*cfg.scale_intensity_factors)
        for i in img_idx:
            chans[i] = chans[i] * factor
    if rng.random() < cfg.gamma_prob:
        gamma = rng.uniform(*cfg.gamma_range)
        for i in img_idx:
            ch = chans[i]
            lo, hi = float(ch.min()), float(ch.max())
            if hi > lo:
                chans[i] = ((ch - lo) / (hi - lo)) ** gamma * (hi - lo) + lo
    if rng.random() < cfg.bias_field_prob:
        fieldmap = _bias_field(shape, rng, cfg.bias_coeff_range)
        for i in img_idx:
            chans[i] = chans[i] * fieldmap
    if rng.random() < cfg.gibbs_prob:
        alpha = rng.uniform(*cfg.gibbs_alpha)
        for i in img_idx:
            chans[i] = _gibbs(chans[i], alpha)

    out.channels = chans.astype(np.float32)
    return out

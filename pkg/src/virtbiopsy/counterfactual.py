"""Gradient-driven latent counterfactual sweeps and heatmap synthesis.

Counterfactuals decode perturbed latents z_orig + alpha * grad, where
the gradient of the classifier's logit with respect to the latent is
taken through the decoder. Heatmaps aggregate absolute differences
against the reference, or between consecutive sweep samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import niftiio

DEFAULT_SHIFT_THRESHOLD = 0.05
FD_STEP = 1e-3


class FidelityGateError(ValueError):
    """Counterfactual requested for a case failing the fidelity gate."""

    def __init__(self, delta_p: float, threshold: float):
        self.delta_p = delta_p
        self.threshold = threshold
        super().__init__(
            f"reconstruction fidelity gate failed: |p(x) - p(x_bar)| = {delta_p:.4f} "
            f">= {threshold}"
        )


def default_alpha_schedule(alpha_max: float = 1.0, n_points: int = 11) -> list[float]:
    """Symmetric uniform grid over [-alpha_max, +alpha_max] including 0."""
    if n_points % 2 == 0:
        n_points += 1  # keep 0 on the grid
    return [float(a) for a in np.linspace(-alpha_max, alpha_max, n_points)]


def latent_gradient(z, decoder, clf_logit_fn, mode: str = "exact", h: float = FD_STEP):
    """Gradient of the classifier logit w.r.t. the latent vector.

    clf_logit_fn maps a decoded tensor (B, 1, W, H, D) to a logit
    tensor (B,). Exact mode differentiates through decoder and
    classifier; fd mode uses central finite differences with step h.
    """
    z = torch.as_tensor(z)
    if not z.is_floating_point():
        z = z.float()
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None]
    if not torch.all(torch.isfinite(z)):
        raise ValueError("latent vector contains non-finite values")

    if mode == "exact":
        zg = z.clone().requires_grad_(True)
        lgt = clf_logit_fn(decoder(zg)).sum()
        (grad,) = torch.autograd.grad(lgt, zg)
    elif mode == "fd":
        with torch.no_grad():
            grad = torch.zeros_like(z)
            for i in range(z.shape[1]):
                zp, zm = z.clone(), z.clone()
                zp[:, i] += h
                zm[:, i] -= h
                grad[:, i] = (clf_logit_fn(decoder(zp)) - clf_logit_fn(decoder(zm))) / (2 * h)
    else:
        raise ValueError(f"mode must be exact|fd, got {mode!r}")

    if not torch.all(torch.isfinite(grad)):
        raise ValueError("non-finite latent gradient")
    return grad[0] if squeeze else grad


@dataclass
class CounterfactualJob:
    """One case's alpha sweep: decoded counterfactuals and predictions."""

    case_id: str
    z_orig: np.ndarray
    alphas: list[float]
    counterfactuals: list[np.ndarray]
    predictions: list[float]
    fidelity_delta: float
    alpha_lower: float | None = None
    alpha_upper: float | None = None
    shift_threshold: float = DEFAULT_SHIFT_THRESHOLD
    mode: str = "linear"  # linear (fixed gradient) | iterative (recomputed)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.alphas, self.alphas[1:])):
            raise ValueError("alpha schedule must be strictly increasing")
        if 0.0 not in self.alphas:
            raise ValueError("alpha schedule must include 0")
        for p in self.predictions:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"prediction {p} outside [0,1]")

    def trace(self) -> dict:
        return {
            "case_id": self.case_id,
            "alphas": self.alphas,
            "predictions": self.predictions,
            "bounds": {"alpha_lower": self.alpha_lower, "alpha_upper": self.alpha_upper},
            "fidelity": self.fidelity_delta,
            "shift_threshold": self.shift_threshold,
            "mode": self.mode,
        }

    def save(self, directory, spacing=(1.0, 1.0, 1.0)):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "trace.json").write_text(json.dumps(self.trace(), indent=2))
        np.save(directory / "z_orig.npy", self.z_orig)
        for i, cf in enumerate(self.counterfactuals):
            niftiio.save_nifti(directory / f"cf_{i:02d}.nii.gz", cf.astype(np.float32), spacing)


def generate_counterfactuals(x, model, clf_logit_fn, alpha_schedule,
                             fidelity_predict_fn=None, fidelity_threshold: float = 0.1,
                             shift_threshold: float = DEFAULT_SHIFT_THRESHOLD,
                             mode: str = "linear", case_id: str = "") -> CounterfactualJob:
    """Sweep the latent along the classifier gradient.

    x: 3D array (the reference patch). model: a trained VaeGanModel.
    clf_logit_fn maps decoded tensors to logits. The fidelity gate is
    enforced when fidelity_predict_fn (array -> probability) is given.
    linear mode holds the gradient at z_orig; iterative mode recomputes
    it at each step outward from 0.
    """
    x_t = torch.from_numpy(np.asarray(x, dtype=np.float32))[None, None]
    model.eval()
    with torch.no_grad():
        z_orig = model.posterior_mean(x_t)
        x_rec = model.decoder(z_orig)

    if fidelity_predict_fn is not None:
        delta = abs(fidelity_predict_fn(np.asarray(x, dtype=np.float32))
                    - fidelity_predict_fn(x_rec[0, 0].numpy()))
        if delta >= fidelity_threshold:
            raise FidelityGateError(delta, fidelity_threshold)
    else:
        delta = 0.0

    alphas = sorted(float(a) for a in alpha_schedule)
    if 0.0 not in alphas:
        raise ValueError("alpha schedule must include 0")

    def decode_and_predict(z):
        with torch.no_grad():
            x_cf = model.decoder(z)
            p = float(torch.sigmoid(clf_logit_fn(x_cf)))
        return x_cf[0, 0].numpy(), min(max(p, 0.0), 1.0)

    results: dict[float, tuple[np.ndarray, float]] = {}
    if mode == "linear":
        grad = latent_gradient(z_orig, model.decoder, clf_logit_fn)
        for a in alphas:
            results[a] = decode_and_predict(z_orig + a * grad)
    elif mode == "iterative":
        zero_idx = alphas.index(0.0)
        for direction in (alphas[zero_idx:], alphas[zero_idx::-1]):
            z = z_orig.clone()
            prev_a = 0.0
            for a in direction:
                if a != prev_a:
                    grad = latent_gradient(z, model.decoder, clf_logit_fn)
                    z = z + (a - prev_a) * grad
                    prev_a = a
                if a not in results:
                    results[a] = decode_and_predict(z)
    else:
        raise ValueError(f"mode must be linear|iterative, got {mode!r}")

    preds = [results[a][1] for a in alphas]
    p0 = results[0.0][1]
    shifted = [a for a in alphas if abs(results[a][1] - p0) >= shift_threshold]
    alpha_lower = min((a for a in shifted if a < 0), default=None)
    alpha_upper = max((a for a in shifted if a > 0), default=None)

    return CounterfactualJob(
        case_id=case_id,
        z_orig=z_orig[0].numpy(),
        alphas=alphas,
        counterfactuals=[results[a][0] for a in alphas],
        predictions=preds,
        fidelity_delta=float(delta),
        alpha_lower=alpha_lower,
        alpha_upper=alpha_upper,
        shift_threshold=shift_threshold,
        mode=mode,
    )


@dataclass
class HeatmapSet:
    """Aggregate and sequential difference maps for one sweep."""

    aggregate: np.ndarray
    sequential: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if np.any(self.aggregate < 0) or any(np.any(s < 0) for s in self.sequential):
            raise ValueError("heatmaps must be nonnegative")

    def save(self, directory, spacing=(1.0, 1.0, 1.0)):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        niftiio.save_nifti(directory / "aggregate.nii.gz", self.aggregate.astype(np.float32), spacing)
        for i, s in enumerate(self.sequential):
            niftiio.save_nifti(directory / f"sequential_{i:02d}.nii.gz", s.astype(np.float32), spacing)


def heatmaps(job: CounterfactualJob, x_ref, aggregate_mode: str = "mean") -> HeatmapSet:
    """Difference heatmaps from a counterfactual sweep.

    aggregate: voxelwise mean of |x_cf - x_ref| over all samples (or the
    voxelwise minimum with aggregate_mode="min", reading "modified in
    every sample"). sequential: |x_cf[i+1] - x_cf[i]| for consecutive
    samples, N-1 maps.
    """
    if aggregate_mode not in ("mean", "min"):
        raise ValueError(f"aggregate_mode must be mean|min, got {aggregate_mode!r}")
    x_ref = np.asarray(x_ref, dtype=np.float32)
    diffs = np.stack([np.abs(cf - x_ref) for cf in job.counterfactuals])
    aggregate = diffs.mean(axis=0) if aggregate_mode == "mean" else diffs.min(axis=0)
    sequential = [
        np.abs(b - a) for a, b in zip(job.counterfactuals, job.counterfactuals[1:])
    ]
    return HeatmapSet(aggregate, sequential)

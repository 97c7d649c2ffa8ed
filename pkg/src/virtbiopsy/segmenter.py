"""Compact 3D encoder-decoder segmenter for gland and zonal masks.

A small U-Net trained with a cross-entropy + soft-Dice mix on phantom
volumes, with connected-component post-processing, Dice evaluation, and
gland-volume / PSA-density derivation.
"""

from __future__ import annotations

import io
import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .volume import GeometryError, LabelMask, Volume3D, GLAND_SCHEME, ZONE_SCHEME


@dataclass
class SegmenterConfig:
    """Architecture and training settings for the segmenter."""

    widths: tuple[int, ...] = (8, 16, 32)
    epochs: int = 40
    batch_size: int = 2
    learning_rate: float = 1e-2
    dice_weight: float = 0.5  # mix: (1-w)*CE + w*softDice
    n_classes: int = 2  # 2 for gland, 3 for zones
    rng_seed: int = 0

    def __post_init__(self):
        w = self.widths
        if any(x <= 0 for x in w) or any(a >= b for a, b in zip(w, w[1:])):
            raise ValueError(f"widths must be positive and increasing, got {w}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.dice_weight <= 1.0:
            raise ValueError("dice_weight must be in [0,1]")


class _Block(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(cin, cout, 3, padding=1),
            nn.InstanceNorm3d(cout, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv3d(cout, cout, 3, padding=1),
            nn.InstanceNorm3d(cout, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class UNet3D(nn.Module):
    """Minimal 3D U-Net; depth follows len(widths)."""

    def __init__(self, widths, n_classes):
        super().__init__()
        self.enc = nn.ModuleList()
        cin = 1
        for w in widths:
            self.enc.append(_Block(cin, w))
            cin = w
        self.pool = nn.MaxPool3d(2)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        rev = list(widths)[::-1]
        for skip_w, up_w in zip(rev[1:], rev[:-1]):
            self.up.append(nn.ConvTranspose3d(up_w, skip_w, 2, stride=2))
            self.dec.append(_Block(2 * skip_w, skip_w))
        self.head = nn.Conv3d(widths[0], n_classes, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < len(self.enc) - 1:
                skips.append(x)
                x = self.pool(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)


@dataclass
class SegmenterState:
    """Trained weights, config, and the training curve."""

    config: SegmenterConfig
    weights: dict
    curve: list[dict] = field(default_factory=list)  # per epoch: loss, val_dsc
    target: str = "gland"

    def model(self) -> UNet3D:
        net = UNet3D(self.config.widths, self.config.n_classes)
        net.load_state_dict(self.weights)
        net.eval()
        return net

    def save(self, path):
        path = Path(path)
        buf = io.BytesIO()
        torch.save(self.weights, buf)
        path.with_suffix(".pt").write_bytes(buf.getvalue())
        meta = {"config": asdict(self.config), "curve": self.curve, "target": self.target}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "SegmenterState":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        weights = torch.load(io.BytesIO(path.with_suffix(".pt").read_bytes()), weights_only=True)
        cfg = SegmenterConfig(**{**meta["config"], "widths": tuple(meta["config"]["widths"])})
        return cls(cfg, weights, meta["curve"], meta["target"])


def _soft_dice_loss(logits, target, n_classes):
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, n_classes).permute(0, 4, 1, 2, 3).float()
    dims = (0, 2, 3, 4)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + 1e-5) / (denom + 1e-5)
    return 1.0 - dice.mean()


def _pad_to_multiple(arr, mult):
    pads = [(0, (-s) % mult) for s in arr.shape]
    return np.pad(arr, pads), arr.shape


def _as_tensor_pair(vol: Volume3D, mask: LabelMask, mult: int):
    x, _ = _pad_to_multiple(vol.data.astype(np.float32), mult)
    y, _ = _pad_to_multiple(mask.labels.astype(np.int64), mult)
    return torch.from_numpy(x)[None], torch.from_numpy(y)


def train_segmenter(manifest, store, cfg: SegmenterConfig, target: str = "gland") -> SegmenterState:
    """Train on the manifest's train split, select best validation DSC.

    Deterministic under cfg.rng_seed. Aborts on non-finite loss.
    """
    if target not in ("gland", "zones"):
        raise ValueError(f"target must be gland|zones, got {target!r}")
    train_ids = manifest.splits.get("train", [])
    val_ids = manifest.splits.get("val", [])
    if not train_ids:
        raise ValueError("train split is empty")
    n_classes = 2 if target == "gland" else 3
    cfg = SegmenterConfig(**{**asdict(cfg), "n_classes": n_classes,
                             "widths": tuple(cfg.widths)})

    torch.manual_seed(cfg.rng_seed)
    mult = 2 ** (len(cfg.widths) - 1)
    net = UNet3D(cfg.widths, n_classes)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)

    def case_pair(cid):
        c = store.get(cid)
        mask = c.gland if target == "gland" else c.zones
        return _as_tensor_pair(c.volume, mask, mult)

    train_data = [case_pair(cid) for cid in train_ids]
    val_data = [(cid, case_pair(cid)) for cid in val_ids]

    rng = np.random.default_rng(cfg.rng_seed)
    curve = []
    best = None
    for epoch in range(cfg.epochs):
        net.train()
        order = rng.permutation(len(train_data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = torch.stack([train_data[i][0] for i in idx])
            y = torch.stack([train_data[i][1] for i in idx])
            logits = net(x)
            loss = (1 - cfg.dice_weight) * F.cross_entropy(logits, y) + \
                cfg.dice_weight * _soft_dice_loss(logits, y, n_classes)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch} (lr={cfg.learning_rate})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        epoch_loss = float(np.mean(losses))

        val_dsc = None
        if val_data:
            net.eval()
            dscs = []
            with torch.no_grad():
                for cid, (x, y) in val_data:
                    pred = net(x[None]).argmax(dim=1)[0]
                    dscs.append(_tensor_dice(pred, y))
            val_dsc = float(np.mean(dscs))
        curve.append({"epoch": epoch, "loss": epoch_loss, "val_dsc": val_dsc})

        score = val_dsc if val_dsc is not None else -epoch_loss
        if best is None or score >= best[0]:
            best = (score, {k: v.detach().clone() for k, v in net.state_dict().items()})

    return SegmenterState(cfg, best[1], curve, target)


def _tensor_dice(pred, truth):
    p = (pred > 0)
    t = (truth > 0)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return float(2 * int((p & t).sum()) / denom)


def segment(vol: Volume3D, state: SegmenterState, target: str | None = None) -> LabelMask:
    """Run the segmenter; output geometry matches the input volume."""
    target = target or state.target
    if target != state.target:
        raise ValueError(f"model was trained for {state.target!r}, not {target!r}")
    net = state.model()
    mult = 2 ** (len(state.config.widths) - 1)
    x, orig_shape = _pad_to_multiple(vol.data.astype(np.float32), mult)
    with torch.no_grad():
        pred = net(torch.from_numpy(x)[None, None]).argmax(dim=1)[0].numpy()
    pred = pred[tuple(slice(0, s) for s in orig_shape)].astype(np.int16)
    scheme = GLAND_SCHEME if target == "gland" else ZONE_SCHEME
    return LabelMask(pred, vol.spacing, vol.origin, scheme=dict(scheme))


_CONN26 = np.ones((3, 3, 3), dtype=bool)


def largest_component(mask: LabelMask) -> LabelMask:
    """Keep only the largest 26-connected component per foreground label."""
    out = np.zeros_like(mask.labels)
    labels_present = [v for v in np.unique(mask.labels) if v != 0]
    if not labels_present:
        warnings.warn("largest_component called on an empty mask")
        return LabelMask(out, mask.spacing, mask.origin, dict(mask.scheme))
    for value in labels_present:
        comp, n = ndimage.label(mask.labels == value, structure=_CONN26)
        if n == 0:
            continue
        sizes = ndimage.sum_labels(np.ones_like(comp), comp, index=range(1, n + 1))
        keep = int(np.argmax(sizes)) + 1
        out[comp == keep] = value
    return LabelMask(out, mask.spacing, mask.origin, dict(mask.scheme))


def dice(pred: LabelMask, truth: LabelMask, label: int = 1) -> float:
    """Dice similarity 2|A n B| / (|A| + |B|); both empty counts as 1.0."""
    if pred.shape != truth.shape or not np.allclose(pred.spacing, truth.spacing):
        raise GeometryError("dice requires masks with identical geometry")
    a = pred.labels == label
    b = truth.labels == label
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        warnings.warn("dice of two empty masks defined as 1.0")
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def gland_volume_cc(mask: LabelMask) -> float:
    """Foreground volume in cc (voxel count x voxel volume / 1000)."""
    voxel_mm3 = float(np.prod(mask.spacing))
    return float((mask.labels > 0).sum()) * voxel_mm3 / 1000.0


def psa_density(psa: float, volume_cc: float) -> float:
    """PSA density in ng/mL/cc."""
    if volume_cc <= 0:
        raise ValueError(f"gland volume must be > 0 cc, got {volume_cc}")
    return psa / volume_cc

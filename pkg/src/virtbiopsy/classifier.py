"""Risk classifiers: anisotropic 3D CNN and slice-encoder foundation style.

Two model families share the prediction contract (sigmoid probability
plus logit per case). The foundation family decomposes the volume into
2D slices, encodes each, squeezes to a 512-vector, groups the slice rows
into one embedding, optionally concatenates standardized clinical
features, and classifies with an MLP head. Multi-scale ensembling
averages member probabilities.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .augment import AugmentationConfig, augment
from .volume import (
    LabelMask,
    PatchSpec,
    PatchStack,
    assemble_channels,
    crop_centered,
    crop_to_roi,
    mask_centroid,
    normalize,
)

EPS = 1e-7

INPUT_VARIANTS = ("image_only", "gland", "zones", "clinical", "gland+clinical")

# published training defaults; desk configs scale these down
CNN_DEFAULTS = dict(
    loss="focal", focal_alpha=0.8, focal_gamma=2.0, optimizer="sgd", momentum=0.9,
    learning_rate=1e-3, weight_decay=1e-6, schedule="cosine", epochs=250, batch_size=6,
    accum_steps=1,
)
FOUNDATION_DEFAULTS = dict(
    loss="wbce", pos_weight=2.342, optimizer="adamw", learning_rate=5e-4,
    weight_decay=1e-4, schedule="cosine", epochs=200, batch_size=8, accum_steps=32,
)
# appendix grid marked this pos_weight best; exposed as a preset, not the default
POS_WEIGHT_GRID_BEST = 2.699


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def logit(p: float) -> float:
    p = min(max(p, EPS), 1.0 - EPS)
    return math.log(p / (1.0 - p))


@dataclass
class RiskPrediction:
    """One case's risk probability and logit from one model (or ensemble)."""

    case_id: str
    probability: float
    logit: float
    model_tag: str = ""
    patch_scale: tuple[int, int, int] | None = None

    def __post_init__(self):
        if abs(self.probability - sigmoid(self.logit)) > 1e-9:
            raise ValueError(
                f"probability {self.probability} inconsistent with logit {self.logit}"
            )

    @classmethod
    def from_logit(cls, case_id, lgt, model_tag="", patch_scale=None):
        return cls(case_id, sigmoid(lgt), lgt, model_tag, patch_scale)


def focal_loss(p, y, alpha: float = 0.8, gamma: float = 2.0):
    """Alpha-balanced focal loss on probabilities.

    y=1 term: -alpha * (1-p)^gamma * log(p);
    y=0 term: -(1-alpha) * p^gamma * log(1-p).
    Accepts floats or tensors; probabilities are clamped at 1e-7.
    """
    scalar = not torch.is_tensor(p)
    p_t = torch.as_tensor(p, dtype=torch.float64 if scalar else None)
    y_t = torch.as_tensor(y, dtype=p_t.dtype)
    p_t = p_t.clamp(EPS, 1.0 - EPS)
    loss = -(
        alpha * y_t * (1.0 - p_t) ** gamma * torch.log(p_t)
        + (1.0 - alpha) * (1.0 - y_t) * p_t**gamma * torch.log(1.0 - p_t)
    )
    return float(loss) if scalar else loss


def weighted_bce(p, y, pos_weight: float = FOUNDATION_DEFAULTS["pos_weight"]):
    """Binary cross-entropy with a positive-class weight on probabilities."""
    if pos_weight <= 0:
        raise ValueError(f"pos_weight must be > 0, got {pos_weight}")
    scalar = not torch.is_tensor(p)
    p_t = torch.as_tensor(p, dtype=torch.float64 if scalar else None)
    y_t = torch.as_tensor(y, dtype=p_t.dtype)
    p_t = p_t.clamp(EPS, 1.0 - EPS)
    loss = -(pos_weight * y_t * torch.log(p_t) + (1.0 - y_t) * torch.log(1.0 - p_t))
    return float(loss) if scalar else loss


# ---------------------------------------------------------------------------
# CNN family
# ---------------------------------------------------------------------------


@dataclass
class CnnConfig:
    """Anisotropic 3D CNN layout; defaults follow the published design."""

    stem_kernel: tuple[int, int, int] = (3, 3, 1)
    stage_strides: tuple = ((2, 2, 1), (2, 2, 2), (2, 2, 2), (2, 2, 1))
    widths: tuple[int, ...] = (32, 64, 128, 256, 320)
    pool_target: tuple[int, int, int] = (4, 4, 4)
    head_widths: tuple[int, ...] = (20480, 4096, 1024, 1)
    in_channels: int = 1
    patch_size: tuple[int, int, int] = (224, 224, 28)
    rng_seed: int = 0

    def __post_init__(self):
        flat = self.widths[-1] * int(np.prod(self.pool_target))
        if flat != self.head_widths[0]:
            raise ValueError(
                f"pooled feature size {flat} must equal first head width {self.head_widths[0]}"
            )
        if len(self.stage_strides) != len(self.widths) - 1:
            raise ValueError("need one stride per stage after the stem")


class CnnModel(nn.Module):
    def __init__(self, cfg: CnnConfig):
        super().__init__()
        self.cfg = cfg
        pad = tuple(k // 2 for k in cfg.stem_kernel)
        layers = [
            nn.Conv3d(cfg.in_channels, cfg.widths[0], cfg.stem_kernel, padding=pad),
            nn.LeakyReLU(0.01, inplace=True),
        ]
        cin = cfg.widths[0]
        for w, stride in zip(cfg.widths[1:], cfg.stage_strides):
            layers += [
                nn.Conv3d(cin, w, 3, stride=stride, padding=1),
                nn.LeakyReLU(0.01, inplace=True),
                nn.Conv3d(w, w, 3, padding=1),
                nn.LeakyReLU(0.01, inplace=True),
            ]
            cin = w
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveMaxPool3d(cfg.pool_target)
        head = []
        hw = cfg.head_widths
        for a, b in zip(hw[:-1], hw[1:]):
            head.append(nn.Linear(a, b))
            if b != 1:
                head.append(nn.LeakyReLU(0.01, inplace=True))
        self.head = nn.Sequential(*head)

    def pooled_features(self, x):
        return self.pool(self.features(x)).flatten(1)

    def forward(self, x):
        return self.head(self.pooled_features(x)).squeeze(-1)  # logits


# ---------------------------------------------------------------------------
# Foundation family: slice encoder -> squeezer -> grouper -> head
# ---------------------------------------------------------------------------


@dataclass
class FoundationConfig:
    """Pluggable slice-encoder pipeline; squeezer output is fixed at 512."""

    encoder_width: int = 8
    encoder_feature_dim: int = 64
    squeeze_dim: int = 512
    grouper: str = "attention"  # attention | mean
    head_hidden: int = 64
    in_channels: int = 1
    n_clinical: int = 0
    freeze_encoder: bool = True
    pos_weight: float = FOUNDATION_DEFAULTS["pos_weight"]
    patch_size: tuple[int, int, int] = (224, 224, 28)
    rng_seed: int = 0

    def __post_init__(self):
        if self.squeeze_dim != 512:
            raise ValueError("squeezer output dim is fixed at 512")
        if self.grouper not in ("attention", "mean"):
            raise ValueError(f"unknown grouper {self.grouper!r}")


class SmallSliceEncoder(nn.Module):
    """Default 2D encoder: any module mapping (B, C, H, W) -> (B, F) plugs in."""

    def __init__(self, in_channels: int, width: int, feature_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.01, inplace=True),
            nn.AdaptiveAvgPool2d(4),
        )
        self.fc = nn.Linear(2 * width * 16, feature_dim)
        self.feature_dim = feature_dim

    def forward(self, x):
        return self.fc(self.net(x).flatten(1))


class FoundationModel(nn.Module):
    def __init__(self, cfg: FoundationConfig, encoder: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = encoder or SmallSliceEncoder(
            cfg.in_channels, cfg.encoder_width, cfg.encoder_feature_dim
        )
        feat_dim = getattr(self.encoder, "feature_dim", cfg.encoder_feature_dim)
        self.squeezer = nn.Linear(feat_dim, cfg.squeeze_dim)
        if cfg.grouper == "attention":
            self.attn = nn.Linear(cfg.squeeze_dim, 1)
        self.head = nn.Sequential(
            nn.Linear(cfg.squeeze_dim + cfg.n_clinical, cfg.head_hidden),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Linear(cfg.head_hidden, 1),
        )
        if cfg.freeze_encoder:
            for p in self.encoder.parameters():
                p.requires_grad_(False)

    def slice_embeddings(self, x):
        """x: (B, C, W, H, D) -> (B, D, 512)."""
        b, c, w, h, d = x.shape
        slices = x.permute(0, 4, 1, 2, 3).reshape(b * d, c, w, h)
        feats = self.encoder(slices)
        return self.squeezer(feats).reshape(b, d, -1)

    def volume_embedding(self, x):
        rows = self.slice_embeddings(x)
        if self.cfg.grouper == "mean":
            return rows.mean(dim=1)
        weights = torch.softmax(self.attn(rows), dim=1)
        return (weights * rows).sum(dim=1)

    def forward(self, x, clinical=None):
        emb = self.volume_embedding(x)
        if self.cfg.n_clinical:
            if clinical is None:
                raise ValueError("model was configured with clinical features; none given")
            emb = torch.cat([emb, clinical], dim=1)
        elif clinical is not None:
            raise ValueError("model has no clinical pathway but clinical features were given")
        return self.head(emb).squeeze(-1)  # logits


# ---------------------------------------------------------------------------
# Clinical feature standardization
# ---------------------------------------------------------------------------


@dataclass
class ClinicalStandardizer:
    """Per-feature mean/std from the train split; applied everywhere else."""

    feature_names: tuple[str, ...] = ("age", "psa_density")
    means: tuple[float, ...] = ()
    stds: tuple[float, ...] = ()

    @classmethod
    def fit(cls, records, feature_names=("age", "psa_density")) -> "ClinicalStandardizer":
        rows = np.array([cls._raw(r, feature_names) for r in records], dtype=float)
        means = rows.mean(axis=0)
        stds = rows.std(axis=0)
        if np.any(stds <= 0):
            raise ValueError("clinical feature with zero variance on the train split")
        return cls(tuple(feature_names), tuple(means.tolist()), tuple(stds.tolist()))

    @staticmethod
    def _raw(record, feature_names):
        vals = []
        for name in feature_names:
            v = getattr(record, name)
            if v is None:
                raise ValueError(
                    f"case {record.case_id}: missing clinical field {name!r} (imputation is not allowed)"
                )
            vals.append(float(v))
        return vals

    def transform(self, record) -> np.ndarray:
        raw = np.array(self._raw(record, self.feature_names), dtype=float)
        return (raw - np.array(self.means)) / np.array(self.stds)


# ---------------------------------------------------------------------------
# Input assembly
# ---------------------------------------------------------------------------


def build_input(case, spec: PatchSpec, inputs: str = "image_only") -> PatchStack:
    """Crop, normalize, and assemble channels for one case."""
    if inputs not in INPUT_VARIANTS:
        raise ValueError(f"inputs must be one of {INPUT_VARIANTS}, got {inputs!r}")
    image = normalize(crop_to_roi(case.volume, case.gland, spec), "pminmax")
    prior = None
    if inputs.startswith("gland") or inputs == "zones":
        src = case.gland if inputs.startswith("gland") else case.zones
        center = mask_centroid(case.gland)
        maxlab = max(int(src.labels.max()), 1)
        cropped = crop_centered((src.labels / maxlab).astype(np.float32), center, spec.size)
        prior = LabelMask(
            np.rint(cropped * maxlab).astype(np.int16), case.volume.spacing, scheme=dict(src.scheme)
        )
        # keep fractional zone encoding by rebuilding the stack directly
        stack = assemble_channels(image, prior, "dup_plus_prior")
        if inputs == "zones":
            stack.channels[2] = cropped
        return stack
    return assemble_channels(image, None, "image_only")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Desk-scale knobs over the published defaults."""

    epochs: int | None = None
    batch_size: int | None = None
    learning_rate: float | None = None
    weight_decay: float | None = None
    accum_steps: int | None = None
    pos_weight: float | None = None
    focal_alpha: float | None = None
    focal_gamma: float | None = None
    patch_size: tuple[int, int, int] = (224, 224, 28)
    target_spacing: tuple[float, float, float] = (0.3125, 0.3125, 3.0)
    grouper: str = "attention"
    encoder_width: int = 8
    encoder_feature_dim: int = 64
    head_hidden: int = 64
    cnn_widths: tuple[int, ...] | None = None
    augmentation: AugmentationConfig | None = None
    rng_seed: int = 0

    def resolved(self, family: str) -> dict:
        base = dict(CNN_DEFAULTS if family == "cnn" else FOUNDATION_DEFAULTS)
        for key in ("epochs", "batch_size", "learning_rate", "weight_decay", "accum_steps",
                    "pos_weight", "focal_alpha", "focal_gamma"):
            v = getattr(self, key, None)
            if v is not None:
                base[key] = v
        return base


@dataclass
class ClassifierState:
    """Trained classifier: weights, configs, and the validation curve."""

    family: str
    inputs: str
    model_config: dict
    weights: dict
    standardizer: ClinicalStandardizer | None = None
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    patch_size: tuple[int, int, int] = (224, 224, 28)
    tag: str = ""

    def model(self) -> nn.Module:
        if self.family == "cnn":
            net = CnnModel(CnnConfig(**_detuple(self.model_config, CnnConfig)))
        else:
            net = FoundationModel(FoundationConfig(**_detuple(self.model_config, FoundationConfig)))
        net.load_state_dict(self.weights)
        net.eval()
        return net

    def save(self, path):
        path = Path(path)
        buf = io.BytesIO()
        torch.save(self.weights, buf)
        path.with_suffix(".pt").write_bytes(buf.getvalue())
        meta = {
            "family": self.family,
            "inputs": self.inputs,
            "model_config": self.model_config,
            "standardizer": asdict(self.standardizer) if self.standardizer else None,
            "curve": self.curve,
            "best_epoch": self.best_epoch,
            "patch_size": list(self.patch_size),
            "tag": self.tag,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "ClassifierState":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        weights = torch.load(io.BytesIO(path.with_suffix(".pt").read_bytes()), weights_only=True)
        std = meta["standardizer"]
        if std:
            std = ClinicalStandardizer(
                tuple(std["feature_names"]), tuple(std["means"]), tuple(std["stds"])
            )
        return cls(
            meta["family"], meta["inputs"], meta["model_config"], weights, std,
            meta["curve"], meta["best_epoch"], tuple(meta["patch_size"]), meta["tag"],
        )


def _detuple(cfg_dict: dict, cls) -> dict:
    out = {}
    for k, v in cfg_dict.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        out[k] = v
    return out


def variant_tag(family: str, inputs: str, patch_size) -> str:
    suffix = {"image_only": "", "gland": "+G", "zones": "+Z",
              "clinical": "+C", "gland+clinical": "+G+C"}[inputs]
    name = "DL" if family == "cnn" else "FM"
    return f"{name} {patch_size[0]}{suffix}"


def _uses_prior(inputs: str) -> bool:
    return inputs in ("gland", "zones", "gland+clinical")


def _uses_clinical(inputs: str) -> bool:
    return inputs in ("clinical", "gland+clinical")


def _prep_case(case, spec, inputs, standardizer):
    variant = inputs if not _uses_clinical(inputs) else ("gland" if "gland" in inputs else "image_only")
    stack = build_input(case, spec, variant)
    clinical = None
    if _uses_clinical(inputs):
        clinical = standardizer.transform(_with_density(case))
    return stack, clinical


def _with_density(case):
    rec = case.record
    if rec.psa_density is None:
        from .segmenter import gland_volume_cc, psa_density as _density

        vol_cc = gland_volume_cc(case.gland)
        rec = type(rec)(**{**rec.to_json(), "psa_density": _density(rec.psa, vol_cc)})
    return rec


def train_classifier(manifest, store, cfg: TrainConfig, family: str = "foundation",
                     inputs: str = "image_only") -> ClassifierState:
    """Train one classifier variant, selecting the best-validation state.

    Published hyperparameters are the defaults; cfg scales them down for
    desk runs. Gradient accumulation emulates the published effective
    batch size when accum_steps > 1.
    """
    from .metrics import roc_auc

    if family not in ("cnn", "foundation"):
        raise ValueError(f"family must be cnn|foundation, got {family!r}")
    if inputs not in INPUT_VARIANTS:
        raise ValueError(f"inputs must be one of {INPUT_VARIANTS}")
    train_ids = manifest.splits.get("train", [])
    val_ids = manifest.splits.get("val", [])
    if not train_ids or not val_ids:
        raise ValueError("train and val splits must both be non-empty")

    hp = cfg.resolved(family)
    torch.manual_seed(cfg.rng_seed)
    spec = PatchSpec(cfg.patch_size, cfg.target_spacing, allow_noncanonical=True)

    standardizer = None
    if _uses_clinical(inputs):
        standardizer = ClinicalStandardizer.fit(
            [_with_density(store.get(cid)) for cid in train_ids]
        )

    n_channels = 3 if _uses_prior(inputs) else 1
    n_clinical = 2 if _uses_clinical(inputs) else 0
    if family == "cnn":
        widths = cfg.cnn_widths or CnnConfig.__dataclass_fields__["widths"].default
        default_strides = CnnConfig.__dataclass_fields__["stage_strides"].default
        n_stages = len(widths) - 1
        strides = tuple(default_strides[i % len(default_strides)] for i in range(n_stages))
        head0 = widths[-1] * 64
        model_cfg = CnnConfig(
            widths=tuple(widths), stage_strides=strides,
            head_widths=(head0, 4096, 1024, 1),
            in_channels=n_channels, patch_size=tuple(cfg.patch_size), rng_seed=cfg.rng_seed,
        )
        net = CnnModel(model_cfg)
    else:
        model_cfg = FoundationConfig(
            encoder_width=cfg.encoder_width, encoder_feature_dim=cfg.encoder_feature_dim,
            grouper=cfg.grouper, head_hidden=cfg.head_hidden, in_channels=n_channels,
            n_clinical=n_clinical, pos_weight=hp.get("pos_weight", FOUNDATION_DEFAULTS["pos_weight"]),
            patch_size=tuple(cfg.patch_size), rng_seed=cfg.rng_seed,
        )
        net = FoundationModel(model_cfg)

    params = [p for p in net.parameters() if p.requires_grad]
    if hp["optimizer"] == "sgd":
        opt = torch.optim.SGD(params, lr=hp["learning_rate"], momentum=hp.get("momentum", 0.9),
                              weight_decay=hp["weight_decay"])
    else:
        opt = torch.optim.AdamW(params, lr=hp["learning_rate"], weight_decay=hp["weight_decay"])
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(hp["epochs"], 1))

    def loss_fn(logits, y):
        p = torch.sigmoid(logits)
        if hp["loss"] == "focal":
            return focal_loss(p, y, hp["focal_alpha"], hp["focal_gamma"]).mean()
        return weighted_bce(p, y, hp["pos_weight"]).mean()

    def prep(cid):
        case = store.get(cid)
        stack, clinical = _prep_case(case, spec, inputs, standardizer)
        return stack, clinical, float(case.record.label)

    train_set = [(cid, *prep(cid)) for cid in train_ids]
    val_set = [(cid, *prep(cid)) for cid in val_ids]

    def tensors(batch, aug_seed=None):
        stacks = []
        for i, (_, stack, _, _) in enumerate(batch):
            if cfg.augmentation is not None and aug_seed is not None:
                stack = augment(stack, cfg.augmentation, seed=aug_seed + i)
            stacks.append(torch.from_numpy(stack.channels))
        x = torch.stack(stacks)
        y = torch.tensor([b[3] for b in batch], dtype=torch.float32)
        clin = None
        if n_clinical:
            clin = torch.tensor(np.stack([b[2] for b in batch]), dtype=torch.float32)
        return x, clin, y

    rng = np.random.default_rng(cfg.rng_seed)
    accum = max(int(hp.get("accum_steps", 1)), 1)
    curve = []
    best = None
    for epoch in range(hp["epochs"]):
        net.train()
        order = rng.permutation(len(train_set))
        losses = []
        opt.zero_grad()
        pending = 0
        for bi, start in enumerate(range(0, len(order), hp["batch_size"])):
            batch = [train_set[i] for i in order[start : start + hp["batch_size"]]]
            x, clin, y = tensors(batch, aug_seed=cfg.rng_seed * 10000 + epoch * 100 + bi)
            logits = net(x, clin) if family == "foundation" else net(x)
            loss = loss_fn(logits, y)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}")
            (loss / accum).backward()
            pending += 1
            if pending == accum:
                opt.step()
                opt.zero_grad()
                pending = 0
            losses.append(float(loss.detach()))
        if pending:
            opt.step()
            opt.zero_grad()
        sched.step()

        net.eval()
        with torch.no_grad():
            scores, labels = [], []
            for item in val_set:
                x, clin, y = tensors([item])
                lgt = net(x, clin) if family == "foundation" else net(x)
                scores.append(float(torch.sigmoid(lgt)))
                labels.append(int(item[3]))
        try:
            val_auc = roc_auc(scores, labels)
        except Exception:
            val_auc = 0.5
        curve.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_auc": val_auc})
        if best is None or val_auc >= best[0]:
            best = (val_auc, epoch, {k: v.detach().clone() for k, v in net.state_dict().items()})

    cfg_dict = json.loads(json.dumps(asdict(model_cfg)))
    return ClassifierState(
        family=family,
        inputs=inputs,
        model_config=cfg_dict,
        weights=best[2],
        standardizer=standardizer,
        curve=curve,
        best_epoch=best[1],
        patch_size=tuple(cfg.patch_size),
        tag=variant_tag(family, inputs, cfg.patch_size),
    )


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _forward_logit(state: ClassifierState, patch: PatchStack, clinical=None) -> float:
    net = state.model()
    x = torch.from_numpy(patch.channels)[None]
    with torch.no_grad():
        if state.family == "foundation":
            clin = None
            if clinical is not None:
                clin = torch.tensor(np.asarray(clinical, dtype=np.float32))[None]
            lgt = net(x, clin)
        else:
            lgt = net(x)
    return float(lgt)


def predict_cnn(patch: PatchStack, state: ClassifierState, case_id: str = "") -> RiskPrediction:
    """CNN prediction; input must match the model's training patch size."""
    if state.family != "cnn":
        raise ValueError("predict_cnn requires a cnn-family state")
    if tuple(patch.size) != tuple(state.patch_size):
        raise ValueError(f"patch {patch.size} does not match model input {state.patch_size}")
    return RiskPrediction.from_logit(case_id, _forward_logit(state, patch), state.tag,
                                     tuple(state.patch_size))


def predict_foundation(patch: PatchStack, clinical, state: ClassifierState,
                       case_id: str = "") -> RiskPrediction:
    """Foundation prediction: encode slices, squeeze, group, classify."""
    if state.family != "foundation":
        raise ValueError("predict_foundation requires a foundation-family state")
    expect = 3 if _uses_prior(state.inputs) else 1
    if patch.channels.shape[0] != expect:
        raise ValueError(f"expected {expect} channels for variant {state.inputs!r}, got {patch.channels.shape[0]}")
    return RiskPrediction.from_logit(case_id, _forward_logit(state, patch, clinical), state.tag,
                                     tuple(state.patch_size))


def predict_case(case, state: ClassifierState) -> RiskPrediction:
    """End-to-end single-case prediction from a stored Case."""
    spec = PatchSpec(state.patch_size, allow_noncanonical=True)
    stack, clinical = _prep_case(case, spec, state.inputs, state.standardizer)
    if state.family == "cnn":
        return predict_cnn(stack, state, case.record.case_id)
    return predict_foundation(stack, clinical, state, case.record.case_id)


def ensemble_predict(preds: list[RiskPrediction]) -> RiskPrediction:
    """Average member probabilities for one case across patch scales."""
    if not preds:
        raise ValueError("ensemble needs at least one member prediction")
    ids = {p.case_id for p in preds}
    if len(ids) != 1:
        raise ValueError(f"mixed case ids in ensemble: {sorted(ids)}")
    p_mean = float(np.mean([p.probability for p in preds]))
    tags = "+".join(p.model_tag or "?" for p in preds)
    scales = ",".join(str(p.patch_scale[0]) if p.patch_scale else "?" for p in preds)
    return RiskPrediction(
        preds[0].case_id, p_mean, logit(p_mean), f"ensemble[{tags}]({scales})", None
    )

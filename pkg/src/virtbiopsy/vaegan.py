"""VAE-GAN representation learning and reconstruction-fidelity gating.

The encoder maps a patch x to a diagonal-Gaussian posterior over z, the
decoder doubles as the GAN generator, and a discriminator scores
real-vs-generated. Training combines L1 reconstruction, closed-form KL,
perceptual feature distance and an adversarial term that enters after a
warm-up period.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

LOG_EPS = 1e-7


@dataclass
class LossWeights:
    """Weighted-sum coefficients and warm-up schedule for the total loss."""

    w_kl: float = 1e-6
    w_perceptual: float = 1e-3
    w_adversarial: float = 1e-2
    warmup_epochs: int = 10

    def __post_init__(self):
        if min(self.w_kl, self.w_perceptual, self.w_adversarial) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class VaeGanConfig:
    patch_size: tuple[int, int, int] = (160, 160, 20)
    latent_dim: int = 32
    width: int = 8
    disc_width: int = 8
    epochs: int = 1000
    batch_size: int = 4
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-5
    patience: int = 200
    weights: LossWeights = field(default_factory=LossWeights)
    rng_seed: int = 0


def _down(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 4, stride=2, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
    )


def _up(cin, cout, final=False):
    layers = [nn.ConvTranspose3d(cin, cout, 4, stride=2, padding=1)]
    if not final:
        layers.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*layers)


class Encoder3D(nn.Module):
    """x -> (mu, logvar) of the diagonal-Gaussian posterior q(z|x)."""

    def __init__(self, patch_size, width, latent_dim):
        super().__init__()
        self.blocks = nn.Sequential(_down(1, width), _down(width, 2 * width))
        spatial = [s // 4 for s in patch_size]
        flat = 2 * width * int(np.prod(spatial))
        self.mu = nn.Linear(flat, latent_dim)
        self.logvar = nn.Linear(flat, latent_dim)
        self._spatial = tuple(spatial)
        self._width = width

    def forward(self, x):
        h = self.blocks(x).flatten(1)
        return self.mu(h), self.logvar(h)


class Decoder3D(nn.Module):
    """z -> reconstructed patch."""

    def __init__(self, patch_size, width, latent_dim):
        super().__init__()
        spatial = [s // 4 for s in patch_size]
        self._spatial = tuple(spatial)
        self._width = width
        self.fc = nn.Linear(latent_dim, 2 * width * int(np.prod(spatial)))
        self.blocks = nn.Sequential(_up(2 * width, width), _up(width, 1, final=True))

    def forward(self, z):
        h = self.fc(z).reshape(z.shape[0], 2 * self._width, *self._spatial)
        return self.blocks(h)


class Discriminator3D(nn.Module):
    """x -> likelihood-of-real in (0, 1)."""

    def __init__(self, patch_size, width):
        super().__init__()
        self.blocks = nn.Sequential(_down(1, width), _down(width, 2 * width))
        spatial = [s // 4 for s in patch_size]
        self.fc = nn.Linear(2 * width * int(np.prod(spatial)), 1)

    def forward(self, x):
        return torch.sigmoid(self.fc(self.blocks(x).flatten(1))).squeeze(-1)


class PerceptualFeatures(nn.Module):
    """Fixed small 2D conv stack applied slicewise; layers feed L_perceptual."""

    def __init__(self, width: int = 4, n_layers: int = 2, seed: int = 1234):
        super().__init__()
        torch.manual_seed(seed)
        layers = []
        cin = 1
        for _ in range(n_layers):
            layers.append(nn.Sequential(
                nn.Conv2d(cin, width, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
            ))
            cin = width
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        """x: (B, 1, W, H, D) -> list of per-layer feature maps."""
        b, c, w, h, d = x.shape
        h2d = x.permute(0, 4, 1, 2, 3).reshape(b * d, c, w, h)
        feats = []
        for layer in self.layers:
            h2d = layer(h2d)
            feats.append(h2d)
        return feats


class VaeGanModel(nn.Module):
    """Encoder + decoder + discriminator + fixed perceptual extractor."""

    def __init__(self, cfg: VaeGanConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.rng_seed)
        self.encoder = Encoder3D(cfg.patch_size, cfg.width, cfg.latent_dim)
        self.decoder = Decoder3D(cfg.patch_size, cfg.width, cfg.latent_dim)
        self.discriminator = Discriminator3D(cfg.patch_size, cfg.disc_width)
        self.perceptual = PerceptualFeatures(seed=cfg.rng_seed + 1234)

    def posterior_mean(self, x):
        mu, _ = self.encoder(x)
        return mu

    def reconstruct(self, x):
        return self.decoder(self.posterior_mean(x))

    def save(self, path):
        path = Path(path)
        buf = io.BytesIO()
        torch.save(self.state_dict(), buf)
        path.with_suffix(".pt").write_bytes(buf.getvalue())
        cfg = asdict(self.cfg)
        path.with_suffix(".json").write_text(json.dumps(cfg, indent=2))

    @classmethod
    def load(cls, path) -> "VaeGanModel":
        path = Path(path)
        cfg = json.loads(path.with_suffix(".json").read_text())
        cfg["patch_size"] = tuple(cfg["patch_size"])
        cfg["weights"] = LossWeights(**cfg["weights"])
        model = cls(VaeGanConfig(**cfg))
        model.load_state_dict(
            torch.load(io.BytesIO(path.with_suffix(".pt").read_bytes()), weights_only=True)
        )
        model.eval()
        return model


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def gaussian_kl(mu, logvar):
    """Closed-form KL(q(z|x) || N(0, I)) for a diagonal Gaussian.

    0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2), summed over latent dims
    and averaged over the batch.
    """
    mu = torch.as_tensor(mu, dtype=torch.float64 if not torch.is_tensor(mu) else None)
    logvar = torch.as_tensor(logvar, dtype=mu.dtype)
    if mu.ndim == 1:
        mu, logvar = mu[None], logvar[None]
    kl = 0.5 * (mu**2 + torch.exp(logvar) - 1.0 - logvar).sum(dim=1)
    return kl.mean()


def loss_components(x, x_bar, posterior, disc_real, disc_fake, phi: PerceptualFeatures):
    """(L_rec, L_KL, L_perc, L_adv) per the training objective.

    L_rec: mean absolute voxel difference. L_KL: closed-form Gaussian
    KL. L_perc: sum over layers of mean squared feature distance.
    L_adv: log Disc(x) + log(1 - Disc(x_bar)), eps-clamped.
    """
    mu, logvar = posterior
    if torch.is_tensor(logvar) and not torch.all(torch.isfinite(logvar)):
        raise ValueError("degenerate posterior (non-finite log-variance)")
    l_rec = (x - x_bar).abs().mean()
    l_kl = gaussian_kl(mu, logvar)
    feats_x = phi(x)
    feats_xb = phi(x_bar)
    l_perc = sum(((fx - fb) ** 2).sum() / fx.numel() for fx, fb in zip(feats_x, feats_xb))
    dr = torch.clamp(disc_real, LOG_EPS, 1.0 - LOG_EPS)
    df = torch.clamp(disc_fake, LOG_EPS, 1.0 - LOG_EPS)
    l_adv = (torch.log(dr) + torch.log(1.0 - df)).mean()
    return l_rec, l_kl, l_perc, l_adv


def vaegan_total_loss(l_rec, l_kl, l_perc, l_adv, weights: LossWeights, epoch: int):
    """Weighted component sum; adversarial term only after warm-up."""
    parts = [l_rec, l_kl, l_perc, l_adv]
    for name, v in zip(("rec", "kl", "perceptual", "adversarial"), parts):
        val = float(v) if not torch.is_tensor(v) else float(v.detach())
        if not np.isfinite(val):
            raise ValueError(f"non-finite loss component {name}={val}")
    total = l_rec + weights.w_kl * l_kl + weights.w_perceptual * l_perc
    if epoch >= weights.warmup_epochs:
        total = total + weights.w_adversarial * l_adv
    return total


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class DiscriminatorCollapse(RuntimeError):
    """Discriminator outputs stayed saturated for a full epoch."""


def train_vaegan(manifest, patches: dict, cfg: VaeGanConfig):
    """Alternating generator/discriminator training with early stopping.

    patches maps case_id -> single-channel 3D array at cfg.patch_size.
    Early stopping tracks validation total loss with cfg.patience.
    Returns (model, history).
    """
    train_ids = manifest.splits.get("train", [])
    val_ids = manifest.splits.get("val", [])
    if not train_ids:
        raise ValueError("train split is empty")

    torch.manual_seed(cfg.rng_seed)
    model = VaeGanModel(cfg)
    gen_params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=cfg.lr_generator)
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=cfg.lr_discriminator)

    def tensor_of(cid):
        return torch.from_numpy(np.asarray(patches[cid], dtype=np.float32))[None]

    train_x = torch.stack([tensor_of(c) for c in train_ids])
    val_x = torch.stack([tensor_of(c) for c in val_ids]) if val_ids else None

    rng = np.random.default_rng(cfg.rng_seed)
    history = []
    best = None
    stale = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train_x))
        epoch_stats = []
        saturated = True
        for start in range(0, len(order), cfg.batch_size):
            x = train_x[order[start : start + cfg.batch_size]]
            mu, logvar = model.encoder(x)
            std = torch.exp(0.5 * logvar)
            z = mu + std * torch.randn_like(std)
            x_bar = model.decoder(z)

            # generator update
            disc_fake = model.discriminator(x_bar)
            l_rec, l_kl, l_perc, _ = loss_components(
                x, x_bar, (mu, logvar), disc_fake.detach(), disc_fake.detach(), model.perceptual
            )
            g_loss = l_rec + cfg.weights.w_kl * l_kl + cfg.weights.w_perceptual * l_perc
            if epoch >= cfg.weights.warmup_epochs:
                # non-saturating generator objective standing in for the
                # adversarial term of the total loss
                df = torch.clamp(disc_fake, LOG_EPS, 1.0 - LOG_EPS)
                g_loss = g_loss - cfg.weights.w_adversarial * torch.log(df).mean()
            if not torch.isfinite(g_loss):
                raise RuntimeError(f"non-finite generator loss at epoch {epoch}")
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            # discriminator update
            disc_real = model.discriminator(x)
            disc_fake = model.discriminator(x_bar.detach())
            dr = torch.clamp(disc_real, LOG_EPS, 1.0 - LOG_EPS)
            df = torch.clamp(disc_fake, LOG_EPS, 1.0 - LOG_EPS)
            d_loss = -(torch.log(dr) + torch.log(1.0 - df)).mean()
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            outs = torch.cat([disc_real, disc_fake]).detach()
            if not (torch.all(outs <= LOG_EPS * 2) or torch.all(outs >= 1.0 - LOG_EPS * 2)):
                saturated = False
            epoch_stats.append(
                (float(l_rec.detach()), float(g_loss.detach()), float(d_loss.detach()))
            )

        if saturated:
            raise DiscriminatorCollapse(
                f"discriminator outputs saturated for all of epoch {epoch}"
            )

        rec_mean = float(np.mean([s[0] for s in epoch_stats]))
        entry = {"epoch": epoch, "rec": rec_mean,
                 "g_loss": float(np.mean([s[1] for s in epoch_stats])),
                 "d_loss": float(np.mean([s[2] for s in epoch_stats]))}

        val_total = None
        if val_x is not None:
            model.eval()
            with torch.no_grad():
                mu, logvar = model.encoder(val_x)
                x_bar = model.decoder(mu)
                dr = model.discriminator(val_x)
                df = model.discriminator(x_bar)
                comps = loss_components(val_x, x_bar, (mu, logvar), dr, df, model.perceptual)
                val_total = float(vaegan_total_loss(*comps, cfg.weights, epoch))
        entry["val_total"] = val_total
        history.append(entry)

        score = val_total if val_total is not None else rec_mean
        if best is None or score < best[0]:
            best = (score, {k: v.detach().clone() for k, v in model.state_dict().items()})
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    model.load_state_dict(best[1])
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# Reconstruction fidelity gate
# ---------------------------------------------------------------------------

FIDELITY_BIN_WIDTH = 0.02
FIDELITY_RANGE = 0.3


def reconstruction_fidelity(case_patches: dict, model: VaeGanModel, predict_fn,
                            threshold: float = 0.1):
    """Partition cases by |p(x) - p(x_bar)| against the gate threshold.

    predict_fn maps (case_id, 3D array) -> probability. Returns
    (pass_set, fail_set, histogram) where the histogram uses fixed
    0.02-wide bins over [0, 0.3] plus an overflow bin.
    """
    deltas = {}
    model.eval()
    for cid, patch in case_patches.items():
        x = torch.from_numpy(np.asarray(patch, dtype=np.float32))[None, None]
        with torch.no_grad():
            x_bar = model.reconstruct(x)
        p_orig = predict_fn(cid, np.asarray(patch, dtype=np.float32))
        p_rec = predict_fn(cid, x_bar[0, 0].numpy())
        deltas[cid] = abs(p_orig - p_rec)

    pass_set = {cid for cid, d in deltas.items() if d < threshold}
    fail_set = set(deltas) - pass_set
    n_bins = int(round(FIDELITY_RANGE / FIDELITY_BIN_WIDTH))
    edges = [i * FIDELITY_BIN_WIDTH for i in range(n_bins + 1)]
    counts = [0] * (n_bins + 1)  # final bin catches >= 0.3
    for d in deltas.values():
        idx = min(int(d / FIDELITY_BIN_WIDTH), n_bins)
        counts[idx] += 1
    histogram = {"bin_edges": edges, "counts": counts, "overflow_from": FIDELITY_RANGE,
                 "deltas": {cid: float(d) for cid, d in deltas.items()}}
    return pass_set, fail_set, histogram

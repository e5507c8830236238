"""Conditional feature generator, discriminator, and multimodal GAN training.

The generator turns a full-resolution label mask into a cut-point feature
tensor: the one-hot mask runs through a stack of dilated-convolution stages
(rates 1/2/4, fused by a 1x1 conv, then average-pool downsampled by 2) until
it reaches feature resolution, where a small U-Net conditioned on a spatially
broadcast latent code emits the feature map. The discriminator encodes the
mask the same way and scores (layout, feature) pairs patchwise. Training
combines an L1 feature reconstruction driven by an encoded latent, a KL
regularizer on that latent, non-saturating sigmoid-cross-entropy adversarial
terms, and a latent reconstruction from re-encoding the random-latent fake.

A stride-1 configuration with zero downsampling stages synthesizes at image
resolution; it exists for the stage-comparison diagnostics, not for training
augmentation.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IGNORE_LABEL, NonFiniteLossError
from .seg_model import init_parameters


def one_hot_mask(masks, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """(B,H,W) class ids -> (B,K,H,W) one-hot; ignore-label pixels embed to zeros."""
    m = torch.as_tensor(np.asarray(masks), dtype=torch.long)
    if m.dim() == 2:
        m = m.unsqueeze(0)
    valid = m != IGNORE_LABEL
    safe = torch.where(valid, m, torch.zeros_like(m))
    if int(safe.max()) >= num_classes:
        raise ValueError("mask contains class id >= num_classes")
    oh = F.one_hot(safe, num_classes).permute(0, 3, 1, 2).to(dtype)
    return oh * valid.unsqueeze(1).to(dtype)


@dataclass
class ASPPConfig:
    """Per-stage output channels and shared dilation rates; each stage halves
    the spatial dims, so len(channels) must equal log2(mask-to-feature stride)."""

    channels: tuple = (24, 48, 96)
    rates: tuple = (1, 2, 4)

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.channels)

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "rates": list(self.rates)}


class AsppStage(nn.Module):
    """Parallel dilated 3x3 convs -> concat -> 1x1 fuse -> ReLU -> 2x2 avg pool."""

    def __init__(self, in_ch: int, out_ch: int, rates):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(in_ch, out_ch, 3, padding=r, dilation=r, padding_mode="reflect")
            for r in rates
        )
        self.fuse = nn.Conv2d(out_ch * len(rates), out_ch, 1)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x):
        x = self.fuse(torch.cat([b(x) for b in self.branches], dim=1))
        return self.pool(F.relu(x))


class MaskEncoder(nn.Module):
    """One-hot embedding followed by the configured downsampling stages.

    With zero stages (stride 1) the encoding is the one-hot mask itself.
    """

    def __init__(self, num_classes: int, aspp: ASPPConfig):
        super().__init__()
        self.num_classes = num_classes
        self.aspp = aspp
        widths = (num_classes,) + tuple(aspp.channels)
        self.stages = nn.ModuleList(
            AsppStage(widths[i], widths[i + 1], aspp.rates) for i in range(len(aspp.channels))
        )

    @property
    def out_channels(self) -> int:
        return self.aspp.channels[-1] if self.aspp.channels else self.num_classes

    def forward(self, masks) -> torch.Tensor:
        dtype = next(self.parameters()).dtype if self.stages else torch.float32
        x = one_hot_mask(masks, self.num_classes, dtype=dtype)
        s = self.aspp.total_stride
        if x.shape[-1] % s or x.shape[-2] % s:
            raise ValueError(f"mask dims {tuple(x.shape[-2:])} not divisible by stride {s}")
        for stage in self.stages:
            x = stage(x)
        return x


@dataclass
class GeneratorConfig:
    num_classes: int = 5
    out_channels: int = 64
    stride: int = 8
    latent_dim: int = 8
    aspp: ASPPConfig = None
    # first U-Net conv width; default scales a 1320-wide reference layer by
    # out_channels/1024 (the toy-to-backbone channel ratio), floored at 16
    unet_base: int = 0
    unet_depth: int = 1
    stage_tag: str = "cut"
    seed: int = 0

    def __post_init__(self):
        if self.aspp is None:
            n_stages = int(math.log2(self.stride)) if self.stride > 1 else 0
            default = (24, 48, 96)
            self.aspp = ASPPConfig(channels=default[:n_stages] if n_stages <= 3 else default)
        if self.aspp.total_stride != self.stride:
            raise ValueError(
                f"ASPP stages give stride {self.aspp.total_stride}, config says {self.stride}"
            )
        if self.unet_base == 0:
            self.unet_base = max(16, round(1320 * self.out_channels / 1024))
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "out_channels": self.out_channels,
            "stride": self.stride,
            "latent_dim": self.latent_dim,
            "aspp": self.aspp.to_dict(),
            "unet_base": self.unet_base,
            "unet_depth": self.unet_depth,
            "stage_tag": self.stage_tag,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        a = d.pop("aspp")
        return cls(aspp=ASPPConfig(tuple(a["channels"]), tuple(a["rates"])), **d)


class FeatureGenerator(nn.Module):
    """U-Net over the encoded layout with the latent code broadcast to every cell."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.mask_encoder = MaskEncoder(config.num_classes, config.aspp)
        in_ch = self.mask_encoder.out_channels + config.latent_dim
        widths = [config.unet_base * 2**i for i in range(config.unet_depth + 1)]
        self.in_conv = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
            for i in range(config.unet_depth)
        )
        self.bottleneck = nn.Conv2d(widths[-1], widths[-1], 3, padding=1)
        self.ups = nn.ModuleList(
            nn.Conv2d(widths[i + 1] + widths[i], widths[i], 3, padding=1)
            for i in reversed(range(config.unet_depth))
        )
        self.out_conv = nn.Conv2d(widths[0], config.out_channels, 3, padding=1)
        init_parameters(self, config.seed)

    def forward(self, masks, z: torch.Tensor) -> torch.Tensor:
        return self.decode_layout(self.mask_encoder(masks), z)

    def decode_layout(self, layout: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Run the U-Net on a precomputed layout encoding (latent broadcast+concat)."""
        if z.dim() != 2 or z.shape[1] != self.config.latent_dim:
            raise ValueError(
                f"latent code has shape {tuple(z.shape)}, expected (B, {self.config.latent_dim})"
            )
        if z.shape[0] != layout.shape[0]:
            raise ValueError("latent batch does not match mask batch")
        zmap = z[:, :, None, None].expand(-1, -1, layout.shape[-2], layout.shape[-1])
        x = F.relu(self.in_conv(torch.cat([layout, zmap.to(layout.dtype)], dim=1)))
        skips = [x]
        for down in self.downs:
            x = F.relu(down(x))
            skips.append(x)
        x = F.relu(self.bottleneck(x))
        for i, up in enumerate(self.ups):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.relu(up(torch.cat([x, skips[len(self.ups) - 1 - i]], dim=1)))
        return self.out_conv(x)


@dataclass
class DiscriminatorConfig:
    num_classes: int = 5
    feature_channels: int = 64
    stride: int = 8
    aspp: ASPPConfig = None
    width: int = 64
    downs: int = 1
    seed: int = 1

    def __post_init__(self):
        if self.aspp is None:
            n_stages = int(math.log2(self.stride)) if self.stride > 1 else 0
            default = (12, 24, 48)
            self.aspp = ASPPConfig(channels=default[:n_stages])
        if self.aspp.total_stride != self.stride:
            raise ValueError("discriminator ASPP stride does not match config stride")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "feature_channels": self.feature_channels,
            "stride": self.stride,
            "aspp": self.aspp.to_dict(),
            "width": self.width,
            "downs": self.downs,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        d = dict(d)
        a = d.pop("aspp")
        return cls(aspp=ASPPConfig(tuple(a["channels"]), tuple(a["rates"])), **d)


class PatchDiscriminator(nn.Module):
    """Scores (mask, feature) pairs as a patch map of unnormalized logits.

    The score map halves the feature dims once per strided layer:
    (h, w) -> (h / 2^downs, w / 2^downs).
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        self.mask_encoder = MaskEncoder(config.num_classes, config.aspp)
        in_ch = self.mask_encoder.out_channels + config.feature_channels
        layers = [nn.Conv2d(in_ch, config.width, 3, padding=1), nn.LeakyReLU(0.2)]
        for _ in range(config.downs):
            layers += [
                nn.Conv2d(config.width, config.width, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
            ]
        layers.append(nn.Conv2d(config.width, 1, 1))
        self.net = nn.Sequential(*layers)
        init_parameters(self, config.seed)

    def forward(self, masks, features: torch.Tensor) -> torch.Tensor:
        return self.score_encoded(self.mask_encoder(masks), features)

    def score_encoded(self, layout: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-2:] != layout.shape[-2:]:
            raise ValueError(
                f"feature dims {tuple(features.shape[-2:])} != encoded mask dims "
                f"{tuple(layout.shape[-2:])}"
            )
        return self.net(torch.cat([layout, features.to(layout.dtype)], dim=1))


@dataclass
class LatentEncoderConfig:
    in_channels: int = 64
    latent_dim: int = 8
    widths: tuple = (48, 64)
    seed: int = 2

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "latent_dim": self.latent_dim,
            "widths": list(self.widths),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentEncoderConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class LatentEncoder(nn.Module):
    """Feature tensor -> (mu, logvar) of the posterior over latent codes."""

    def __init__(self, config: LatentEncoderConfig):
        super().__init__()
        self.config = config
        widths = (config.in_channels,) + tuple(config.widths)
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
            for i in range(len(config.widths))
        )
        self.head = nn.Linear(widths[-1], 2 * config.latent_dim)

    def forward(self, features: torch.Tensor):
        x = features
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        x = x.mean(dim=(-2, -1))
        out = self.head(x)
        d = self.config.latent_dim
        return out[:, :d], out[:, d:]


def reparameterize(mu, logvar, noise):
    return mu + torch.exp(0.5 * logvar) * noise


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over dims, batch mean."""
    per_sample = 0.5 * (mu**2 + torch.exp(logvar) - 1.0 - logvar).sum(dim=1)
    return per_sample.mean()


@dataclass
class GanLossReport:
    adv_G: float
    adv_D: float
    l1_recon: float
    kl: float
    latent_recon: float

    def to_dict(self) -> dict:
        return {
            "adv_G": self.adv_G,
            "adv_D": self.adv_D,
            "l1_recon": self.l1_recon,
            "kl": self.kl,
            "latent_recon": self.latent_recon,
        }


def _set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _bce(scores: torch.Tensor, target_real: bool) -> torch.Tensor:
    target = torch.ones_like(scores) if target_real else torch.zeros_like(scores)
    return F.binary_cross_entropy_with_logits(scores, target)


class GanTrainer:
    """Alternating updates: generator+latent encoder first, discriminator second.

    Latent reconstruction backpropagates into the generator only, matching the
    usual multimodal-translation recipe. Loss weights: lambda_l1 on the feature
    reconstruction, lambda_kl on the KL term, lambda_latent on the latent
    reconstruction; adversarial terms enter unweighted.
    """

    def __init__(
        self,
        gen: FeatureGenerator,
        disc: PatchDiscriminator,
        latenc: LatentEncoder,
        lambda_l1: float = 10.0,
        lambda_kl: float = 0.01,
        lambda_latent: float = 0.5,
        lr: float = 2e-4,
        betas=(0.5, 0.999),
    ):
        self.gen = gen
        self.disc = disc
        self.latenc = latenc
        self.lambda_l1 = lambda_l1
        self.lambda_kl = lambda_kl
        self.lambda_latent = lambda_latent
        self.opt_g = torch.optim.Adam(gen.parameters(), lr=lr, betas=betas)
        self.opt_d = torch.optim.Adam(disc.parameters(), lr=lr, betas=betas)
        self.opt_e = torch.optim.Adam(latenc.parameters(), lr=lr, betas=betas)

    def step(self, masks, real_features: torch.Tensor, torch_gen, iteration: int = 0):
        """One alternating update on a batch of (mask, real feature) pairs."""
        d = self.gen.config.latent_dim
        b = real_features.shape[0]
        real_features = real_features.detach()

        layout_g = self.gen.mask_encoder(masks)

        # posterior branch: encode the real feature, reconstruct it
        mu, logvar = self.latenc(real_features)
        noise = torch.randn(b, d, generator=torch_gen, dtype=mu.dtype)
        z_vae = reparameterize(mu, logvar, noise)
        fake_vae = self.gen.decode_layout(layout_g, z_vae)
        # prior branch: random latent, reconstruct the latent from the fake
        z_rand = torch.randn(b, d, generator=torch_gen, dtype=mu.dtype)
        fake_lr = self.gen.decode_layout(layout_g, z_rand)

        # generator + latent-encoder update (discriminator frozen)
        _set_requires_grad(self.disc, False)
        layout_d = self.disc.mask_encoder(masks)
        adv_vae = _bce(self.disc.score_encoded(layout_d, fake_vae), True)
        adv_lr = _bce(self.disc.score_encoded(layout_d, fake_lr), True)
        adv_g = 0.5 * (adv_vae + adv_lr)
        l1 = (fake_vae - real_features).abs().mean()
        kl = kl_divergence(mu, logvar)
        self.opt_g.zero_grad(set_to_none=True)
        self.opt_e.zero_grad(set_to_none=True)
        (adv_vae + adv_lr + self.lambda_l1 * l1 + self.lambda_kl * kl).backward(
            retain_graph=True
        )
        # latent reconstruction: gradient reaches the generator alone
        _set_requires_grad(self.latenc, False)
        mu_rec, _ = self.latenc(fake_lr)
        lat = (mu_rec - z_rand).abs().mean()
        (self.lambda_latent * lat).backward()
        _set_requires_grad(self.latenc, True)
        self.opt_g.step()
        self.opt_e.step()

        # discriminator update on the real pair and both (detached) fakes
        _set_requires_grad(self.disc, True)
        layout_d2 = self.disc.mask_encoder(masks)
        d_real = _bce(self.disc.score_encoded(layout_d2, real_features), True)
        d_fake = 0.5 * (
            _bce(self.disc.score_encoded(layout_d2, fake_vae.detach()), False)
            + _bce(self.disc.score_encoded(layout_d2, fake_lr.detach()), False)
        )
        adv_d = 0.5 * (d_real + d_fake)
        self.opt_d.zero_grad(set_to_none=True)
        (d_real + d_fake).backward()
        self.opt_d.step()

        report = GanLossReport(
            adv_G=float(adv_g.detach()),
            adv_D=float(adv_d.detach()),
            l1_recon=float(l1.detach()),
            kl=float(kl.detach()),
            latent_recon=float(lat.detach()),
        )
        for term, value in report.to_dict().items():
            if not math.isfinite(value):
                raise NonFiniteLossError(term, value, iteration)
        return report


def extract_feature_pool(model, data, n_patches: int, patch_size: int, seed: int):
    """Sample mask/feature patch pairs through the frozen encoder.

    Returns a list of (mask uint8 (P,P), feature float32 (C, P/s, P/s)).
    """
    from .training import random_crop

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 417])))
    records = []
    with torch.no_grad():
        for lo in range(0, n_patches, 16):
            count = min(16, n_patches - lo)
            ims, ms = [], []
            for _ in range(count):
                idx = int(rng.integers(0, len(data)))
                im, m = random_crop(data.images, data.masks, idx, patch_size, rng)
                ims.append(im)
                ms.append(m)
            feats = model.encode(torch.as_tensor(np.stack(ims)))
            for j in range(count):
                records.append((ms[j].copy(), feats[j].numpy().copy()))
    return records


def train_feature_gan(
    trainer: GanTrainer,
    pool,
    steps: int,
    batch_size: int,
    seed: int,
    log_sink=None,
    real_is_image: bool = False,
    images=None,
):
    """Train on a fixed patch pool; returns the per-step loss reports.

    With real_is_image the pool's features are ignored and `images` supplies
    the stride-1 targets (the stage-0 diagnostic configuration).
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 733])))
    torch_gen = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))
    reports = []
    for it in range(steps):
        idx = rng.integers(0, len(pool), size=batch_size)
        masks = np.stack([pool[i][0] for i in idx])
        if real_is_image:
            real = torch.as_tensor(np.stack([images[i] for i in idx]))
        else:
            real = torch.as_tensor(np.stack([pool[i][1] for i in idx]))
        report = trainer.step(masks, real, torch_gen, iteration=it)
        reports.append(report)
        if log_sink is not None:
            log_sink({"iteration": it, **report.to_dict()})
    return reports


class FeatureSampler:
    """Frozen-generator sampling with caller-owned randomness for z."""

    def __init__(self, gen: FeatureGenerator):
        self.gen = gen

    def __call__(self, masks, rng) -> np.ndarray:
        z = torch.as_tensor(
            rng.standard_normal((len(masks), self.gen.config.latent_dim)).astype(np.float32)
        )
        with torch.no_grad():
            return self.gen(masks, z).numpy()

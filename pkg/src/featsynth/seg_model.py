"""Toy encoder-decoder segmentation network with an explicit feature cut point.

The encoder downsamples by a power-of-2 stride and emits pre-ReLU activations
at the cut stage; the decoder applies the nonlinearity first, so features can
be swapped for generator output without retracing the encoder. Decoder convs
use replicate padding so a constant feature map decodes to a spatially
constant logit map.
"""

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CUT_STAGE_TAG = "cut"
IMAGE_STAGE_TAG = "image"


@dataclass
class SegModelConfig:
    num_classes: int = 5
    stride: int = 8
    feature_channels: int = 64
    encoder_widths: tuple = (16, 24, 32, 48)
    decoder_widths: tuple = (48, 32)
    seed: int = 0

    def __post_init__(self):
        if self.stride < 1 or self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of 2, got {self.stride}")
        n_down = int(math.log2(self.stride))
        if len(self.encoder_widths) != n_down + 1:
            raise ValueError(
                f"encoder_widths needs {n_down + 1} entries for stride {self.stride}"
            )
        if self.feature_channels < self.num_classes:
            raise ValueError("feature_channels must be >= num_classes")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "stride": self.stride,
            "feature_channels": self.feature_channels,
            "encoder_widths": list(self.encoder_widths),
            "decoder_widths": list(self.decoder_widths),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegModelConfig":
        d = dict(d)
        d["encoder_widths"] = tuple(d["encoder_widths"])
        d["decoder_widths"] = tuple(d["decoder_widths"])
        return cls(**d)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Fan-in-scaled normal init for weights, zeros for biases; seeded."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in module.named_parameters():
            if p.dim() > 1:
                fan_in = p.shape[1]
                for s in p.shape[2:]:
                    fan_in *= s
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) / math.sqrt(fan_in))
            else:
                p.zero_()


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over parameter names and raw bytes, for frozen-weights checks."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Encoder(nn.Module):
    """Strided conv stack; output is the cut-point activation before any ReLU."""

    def __init__(self, config: SegModelConfig):
        super().__init__()
        w = config.encoder_widths
        layers = [nn.Conv2d(3, w[0], 3, stride=1, padding=1), nn.ReLU()]
        for i in range(len(w) - 1):
            layers += [nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1), nn.ReLU()]
        layers.append(nn.Conv2d(w[-1], config.feature_channels, 3, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """ReLU first, replicate-padded convs, 1x1 head, bilinear upsample to input size."""

    def __init__(self, config: SegModelConfig):
        super().__init__()
        self.stride = config.stride
        widths = (config.feature_channels,) + tuple(config.decoder_widths)
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, padding=1, padding_mode="replicate")
            for i in range(len(widths) - 1)
        )
        self.head = nn.Conv2d(widths[-1], config.num_classes, 1)

    def forward(self, f):
        x = F.relu(f)
        for conv in self.convs:
            x = F.relu(conv(x))
        logits = self.head(x)
        if self.stride > 1:
            logits = F.interpolate(
                logits, scale_factor=self.stride, mode="bilinear", align_corners=False
            )
        return logits


class SegModel(nn.Module):
    def __init__(self, config: SegModelConfig, dtype=torch.float32):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.to(dtype)
        init_parameters(self, config.seed)

    def _batched(self, x, run):
        if x.dim() == 3:
            return run(x.unsqueeze(0)).squeeze(0)
        return run(x)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Extract cut-point features; image dims must divide by the stride."""

        def run(x):
            s = self.config.stride
            if x.shape[-1] % s or x.shape[-2] % s:
                raise ValueError(
                    f"image dims {tuple(x.shape[-2:])} not divisible by stride {s}"
                )
            return self.encoder(x)

        return self._batched(image, run)

    def decode(self, feature: torch.Tensor) -> torch.Tensor:
        """Decode features (from the encoder or a generator) to full-res logits."""

        def run(f):
            c = self.config.feature_channels
            if f.shape[-3] != c:
                raise ValueError(f"feature has {f.shape[-3]} channels, model expects {c}")
            return self.decoder(f)

        return self._batched(feature, run)

    def forward(self, image):
        return self.decode(self.encode(image))


def softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities, stabilized by max-subtraction.

    The class axis is dim -3 ((K,H,W) or (B,K,H,W) layouts).
    """
    shifted = logits - logits.amax(dim=-3, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=-3, keepdim=True)

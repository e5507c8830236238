"""Label-mask providers for the generator: split masks, external directories,
fresh procedural scenes, and pseudo ground truth from model posteriors.

A mask source mixes one primary provider with optional additional providers
at a fixed ratio, applied positionally inside each sampled group (ratio 3:1
means positions 0-2 of every group of 4 are primary), so the mix is exact and
deterministic rather than stochastic.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import IGNORE_LABEL
from .pnm import read_pgm
from .toy_scenes import SceneConfig, generate_scene


@dataclass
class PseudoGtParams:
    confidence_threshold: float = 0.7
    fill_method: str = "nearest"

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence threshold must be in (0, 1)")
        if self.fill_method != "nearest":
            raise ValueError(f"unknown fill method {self.fill_method!r}")


def pseudo_gt(probs: np.ndarray, params: PseudoGtParams) -> np.ndarray:
    """Confidence-thresholded argmax with nearest-neighbor hole filling.

    Pixels whose max posterior exceeds the threshold keep their argmax label;
    every other pixel copies the label of the nearest confident pixel
    (Euclidean grid distance, ties resolved toward the earliest confident
    pixel in row-major order). The result never contains the ignore label.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError(f"expected (K,H,W) probabilities, got shape {probs.shape}")
    conf = probs.max(axis=0)
    labels = probs.argmax(axis=0).astype(np.uint8)
    confident = conf > params.confidence_threshold
    if not confident.any():
        raise ValueError("no pixel exceeds the confidence threshold")
    if confident.all():
        return labels

    out = labels.copy()
    conf_coords = np.argwhere(confident)  # row-major order drives tie-breaking
    conf_labels = labels[confident]
    hole_coords = np.argwhere(~confident)
    cy = conf_coords[:, 0].astype(np.int64)
    cx = conf_coords[:, 1].astype(np.int64)
    for lo in range(0, hole_coords.shape[0], 256):
        chunk = hole_coords[lo : lo + 256]
        d2 = (chunk[:, :1] - cy[None, :]) ** 2 + (chunk[:, 1:] - cx[None, :]) ** 2
        nearest = d2.argmin(axis=1)
        out[chunk[:, 0], chunk[:, 1]] = conf_labels[nearest]
    return out


class ArrayMaskProvider:
    """Masks already in memory (e.g. the training split)."""

    def __init__(self, masks: np.ndarray):
        self.masks = masks

    def __len__(self):
        return len(self.masks)

    def __getitem__(self, i):
        return self.masks[i]


class DirMaskProvider:
    """Masks from a directory of P5 files, validated at construction."""

    def __init__(self, paths):
        self.paths = list(paths)
        self._cache = [None] * len(self.paths)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        if self._cache[i] is None:
            self._cache[i] = read_pgm(self.paths[i])
        return self._cache[i]


class ProceduralMaskProvider:
    """Fresh procedural scene masks from index space unseen by training."""

    def __init__(self, scene_config: SceneConfig, index_offset: int, length: int = 10000):
        self.scene_config = scene_config
        self.index_offset = index_offset
        self.length = length

    def __len__(self):
        return self.length

    def __getitem__(self, i):
        _, mask = generate_scene(self.scene_config, self.index_offset + i)
        return mask


def ingest_mask_dir(path, num_classes: int):
    """Validate every P5 file under `path`; returns (provider, report).

    The report lists each rejected file with the reason; accepted files back
    the provider in sorted-name order.
    """
    path = str(path)
    if not os.path.isdir(path):
        raise ValueError(f"not a directory: {path}")
    accepted, rejected = [], []
    for name in sorted(os.listdir(path)):
        if not name.endswith(".pgm"):
            continue
        full = os.path.join(path, name)
        try:
            mask = read_pgm(full)
        except (ValueError, OSError) as e:
            rejected.append({"file": name, "reason": str(e)})
            continue
        bad = (mask >= num_classes) & (mask != IGNORE_LABEL)
        if bad.any():
            rejected.append(
                {"file": name, "reason": f"label {int(mask[bad][0])} out of range (K={num_classes})"}
            )
            continue
        accepted.append(full)
    report = {"accepted": len(accepted), "rejected": rejected}
    return DirMaskProvider(accepted), report


class MaskSource:
    """Primary provider plus weighted additional providers at a fixed ratio.

    ratio=(3, 1) emits 3 primary then 1 additional mask per group of 4 drawn
    masks; the position counter persists across calls so streaming consumers
    see the same mix. With no additional providers every draw is primary.
    """

    def __init__(self, primary, additional=(), weights=(), ratio=(3, 1), crop: int = 64):
        self.primary = primary
        self.additional = list(additional)
        if self.additional:
            if len(weights) != len(self.additional):
                raise ValueError("need one weight per additional provider")
            w = np.asarray(weights, dtype=np.float64)
            if (w <= 0).any():
                raise ValueError("weights must be positive")
            self.weights = w / w.sum()
        else:
            self.weights = None
        if ratio[0] < 1 or ratio[1] < 0:
            raise ValueError("ratio must be (primary>=1, additional>=0)")
        self.ratio = tuple(ratio)
        self.crop = crop
        self._pos = 0

    def _draw(self, provider, rng) -> np.ndarray:
        if len(provider) == 0:
            raise ValueError("empty mask source")
        mask = provider[int(rng.integers(0, len(provider)))]
        h, w = mask.shape
        if h < self.crop or w < self.crop:
            raise ValueError(f"mask {h}x{w} smaller than crop {self.crop}")
        if h == self.crop and w == self.crop:
            return np.array(mask, dtype=np.uint8)
        y0 = int(rng.integers(0, h - self.crop + 1))
        x0 = int(rng.integers(0, w - self.crop + 1))
        return np.array(mask[y0 : y0 + self.crop, x0 : x0 + self.crop], dtype=np.uint8)

    def sample_masks(self, count: int, rng) -> list:
        """Draw `count` fixed-size mask crops honoring the source ratio."""
        group = self.ratio[0] + self.ratio[1]
        out = []
        for _ in range(count):
            slot = self._pos % group
            self._pos += 1
            if self.additional and self.ratio[1] > 0 and slot >= self.ratio[0]:
                idx = int(rng.choice(len(self.additional), p=self.weights))
                out.append(self._draw(self.additional[idx], rng))
            else:
                out.append(self._draw(self.primary, rng))
        return out

"""Procedural paired (image, mask) scenes: a desk-scale segmentation dataset.

Scenes are flat-textured shapes (rectangles, ellipses, bars) on a textured
background. Each class owns a base color and a texture frequency; with zero
pixel noise the color uniquely determines the class, so the labeling task is
learnable by construction. One class is deliberately rare (a few percent of
pixels) to give per-class analyses something to resolve.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .pnm import read_pgm, read_ppm, write_pgm, write_ppm

# base RGB per class; pairwise L2 separation large vs. texture/noise amplitude
DEFAULT_COLORS = (
    (0.20, 0.25, 0.30),  # 0 background
    (0.85, 0.30, 0.25),  # 1
    (0.25, 0.75, 0.35),  # 2
    (0.30, 0.45, 0.85),  # 3
    (0.88, 0.80, 0.25),  # 4 rare
)


@dataclass
class SceneConfig:
    grid: int = 64
    num_classes: int = 5
    objects_min: int = 1
    objects_max: int = 4
    noise_sigma: float = 0.05
    texture_amp: float = 0.08
    # texture cycles across the grid, one entry per class
    texture_freq: tuple = (2.0, 4.0, 6.0, 8.0, 11.0)
    # draw weights for object classes 1..K-1; last class kept rare
    class_weights: tuple = (0.40, 0.28, 0.22, 0.10)
    rare_class: int = 4
    rare_size_scale: float = 0.65
    colors: tuple = field(default_factory=lambda: DEFAULT_COLORS)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if len(self.colors) < self.num_classes:
            raise ValueError("need a color per class")
        if len(self.texture_freq) < self.num_classes:
            raise ValueError("need a texture frequency per class")
        if len(self.class_weights) != self.num_classes - 1:
            raise ValueError("need a draw weight per object class")
        if not 0 <= self.objects_min <= self.objects_max:
            raise ValueError("bad objects range")

    def to_dict(self) -> dict:
        return {
            "grid": self.grid,
            "num_classes": self.num_classes,
            "objects_min": self.objects_min,
            "objects_max": self.objects_max,
            "noise_sigma": self.noise_sigma,
            "texture_amp": self.texture_amp,
            "texture_freq": list(self.texture_freq),
            "class_weights": list(self.class_weights),
            "rare_class": self.rare_class,
            "rare_size_scale": self.rare_size_scale,
            "colors": [list(c) for c in self.colors],
            "seed": self.seed,
        }


def _scene_rng(config: SceneConfig, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, index])))


def _paint_texture(image, region, class_id, config, xx, yy):
    base = np.asarray(config.colors[class_id], dtype=np.float32)
    freq = config.texture_freq[class_id]
    # diagonal sinusoid; multiplicative so the color direction is preserved
    phase = 2.0 * np.pi * freq * (xx + 0.5 * yy) / config.grid
    mod = (1.0 + config.texture_amp * np.sin(phase)).astype(np.float32)
    for c in range(3):
        image[c][region] = base[c] * mod[region]


def generate_scene(config: SceneConfig, index: int):
    """Render scene `index`: returns (image (3,H,W) float32 in [0,1], mask (H,W) uint8).

    Deterministic per (config.seed, index). Every pixel is labeled.
    """
    rng = _scene_rng(config, index)
    g = config.grid
    yy, xx = np.mgrid[0:g, 0:g].astype(np.float32)
    mask = np.zeros((g, g), dtype=np.uint8)
    image = np.empty((3, g, g), dtype=np.float32)
    _paint_texture(image, np.ones((g, g), dtype=bool), 0, config, xx, yy)

    n_objects = int(rng.integers(config.objects_min, config.objects_max + 1))
    weights = np.asarray(config.class_weights, dtype=np.float64)
    weights = weights / weights.sum()
    for _ in range(n_objects):
        class_id = int(rng.choice(np.arange(1, config.num_classes), p=weights))
        shape = rng.choice(["rectangle", "ellipse", "bar"])
        scale = config.rare_size_scale if class_id == config.rare_class else 1.0
        if shape == "rectangle":
            w = max(3, int(rng.uniform(0.12, 0.42) * g * scale))
            h = max(3, int(rng.uniform(0.12, 0.42) * g * scale))
            x0 = int(rng.integers(0, g - w + 1))
            y0 = int(rng.integers(0, g - h + 1))
            region = np.zeros((g, g), dtype=bool)
            region[y0 : y0 + h, x0 : x0 + w] = True
        elif shape == "ellipse":
            rx = max(2.0, rng.uniform(0.08, 0.24) * g * scale)
            ry = max(2.0, rng.uniform(0.08, 0.24) * g * scale)
            cx = rng.uniform(rx, g - rx)
            cy = rng.uniform(ry, g - ry)
            region = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        else:  # bar
            length = max(6, int(rng.uniform(0.30, 0.70) * g * scale))
            thick = max(2, int(rng.uniform(0.05, 0.10) * g * scale))
            if rng.random() < 0.5:
                w, h = length, thick
            else:
                w, h = thick, length
            x0 = int(rng.integers(0, g - w + 1))
            y0 = int(rng.integers(0, g - h + 1))
            region = np.zeros((g, g), dtype=bool)
            region[y0 : y0 + h, x0 : x0 + w] = True
        mask[region] = class_id
        _paint_texture(image, region, class_id, config, xx, yy)

    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=image.shape).astype(np.float32)
    return np.clip(image, 0.0, 1.0, out=image), mask


def decode_by_color(image: np.ndarray, config: SceneConfig) -> np.ndarray:
    """Nearest-base-color class decode; inverts rendering when noise_sigma=0."""
    colors = np.asarray(config.colors[: config.num_classes], dtype=np.float32)  # (K,3)
    diff = image[None, :, :, :] - colors[:, :, None, None]  # (K,3,H,W)
    return np.argmin((diff**2).sum(axis=1), axis=0).astype(np.uint8)


def build_split(config: SceneConfig, n_train: int, n_val: int, out_dir) -> dict:
    """Write train/val splits (P6 images, P5 masks) plus a manifest; returns the manifest."""
    out_dir = str(out_dir)
    splits = {"train": range(0, n_train), "val": range(n_train, n_train + n_val)}
    for split, indices in splits.items():
        img_dir = os.path.join(out_dir, split, "images")
        mask_dir = os.path.join(out_dir, split, "masks")
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(mask_dir, exist_ok=True)
        for i, index in enumerate(indices):
            image, mask = generate_scene(config, index)
            write_ppm(os.path.join(img_dir, f"{i:05d}.ppm"), image)
            write_pgm(os.path.join(mask_dir, f"{i:05d}.pgm"), mask)
    manifest = {
        "n_train": n_train,
        "n_val": n_val,
        "seed": config.seed,
        "scene_config": config.to_dict(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


class SplitData:
    """In-memory split: images (N,3,H,W) float32, masks (N,H,W) uint8."""

    def __init__(self, images: np.ndarray, masks: np.ndarray, num_classes: int):
        self.images = images
        self.masks = masks
        self.num_classes = num_classes

    def __len__(self) -> int:
        return self.images.shape[0]


def load_split(dataset_dir, split: str) -> SplitData:
    dataset_dir = str(dataset_dir)
    with open(os.path.join(dataset_dir, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    img_dir = os.path.join(dataset_dir, split, "images")
    mask_dir = os.path.join(dataset_dir, split, "masks")
    names = sorted(n for n in os.listdir(img_dir) if n.endswith(".ppm"))
    images = np.stack([read_ppm(os.path.join(img_dir, n)) for n in names])
    masks = np.stack([read_pgm(os.path.join(mask_dir, n[:-4] + ".pgm")) for n in names])
    return SplitData(images, masks, manifest["scene_config"]["num_classes"])

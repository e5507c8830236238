"""Diagnostics for choosing what to synthesize: activation entropy under a
shared norm ball, histogram-overlap similarity across classes, and scoring of
candidate features through the frozen decoder.

Histograms are binned uniformly per channel over that channel's observed
range (64 bins by default) and shared across classes, so within-channel
class-pair overlaps are comparable. Entropy is Shannon entropy in bits.
"""

import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import IGNORE_LABEL
from .metrics import ConfusionMatrix, MetricBundle, compute_metrics
from .pnm import write_pgm, write_ppm


def normalize_to_ball(patch: np.ndarray, radius: float = 100.0) -> np.ndarray:
    """Rescale a feature patch to the given L2 norm; direction preserved."""
    patch = np.asarray(patch, dtype=np.float64)
    norm = float(np.sqrt((patch**2).sum()))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero-norm patch")
    return patch * (radius / norm)


def downsample_mask_majority(mask: np.ndarray, stride: int) -> np.ndarray:
    """Majority vote inside each stride x stride cell; ties go to the lower
    class id; cells that are entirely ignore-label stay ignore-label."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % stride or w % stride:
        raise ValueError(f"mask dims {(h, w)} not divisible by stride {stride}")
    if stride == 1:
        return mask.copy()
    valid = mask != IGNORE_LABEL
    k = int(mask[valid].max()) + 1 if valid.any() else 1
    onehot = np.zeros((h, w, k), dtype=np.int32)
    yy, xx = np.nonzero(valid)
    onehot[yy, xx, mask[yy, xx].astype(np.int64)] = 1
    cells = onehot.reshape(h // stride, stride, w // stride, stride, k).sum(axis=(1, 3))
    out = cells.argmax(axis=2).astype(np.uint8)
    out[cells.sum(axis=2) == 0] = IGNORE_LABEL
    return out


@dataclass
class FeatureHistogram:
    """Per-(class, channel) activation counts under shared per-channel bins."""

    edges: np.ndarray  # (C, bins+1)
    counts: np.ndarray  # (K, C, bins) int64


def build_histograms(features, masks, num_classes: int, bins: int = 64) -> FeatureHistogram:
    """Bin activations by the class of their grid cell.

    `features` are (C,h,w) arrays (normalize first for cross-stage
    comparisons); `masks` are full-resolution and get majority-downsampled to
    the feature grid.
    """
    if len(features) == 0 or len(features) != len(masks):
        raise ValueError("need equally many features and masks")
    c = features[0].shape[0]
    stride = masks[0].shape[0] // features[0].shape[1]
    flat_feats = []
    flat_labels = []
    for feat, mask in zip(features, masks):
        feat = np.asarray(feat, dtype=np.float64)
        small = downsample_mask_majority(np.asarray(mask), stride)
        if small.shape != feat.shape[1:]:
            raise ValueError("mask does not downsample to the feature grid")
        flat_feats.append(feat.reshape(c, -1))
        flat_labels.append(small.reshape(-1))
    acts = np.concatenate(flat_feats, axis=1)  # (C, N)
    labels = np.concatenate(flat_labels)  # (N,)
    valid = labels != IGNORE_LABEL

    edges = np.empty((c, bins + 1))
    counts = np.zeros((num_classes, c, bins), dtype=np.int64)
    for ch in range(c):
        col = acts[ch][valid]
        lo, hi = float(col.min()), float(col.max())
        if hi <= lo:
            hi = lo + 1.0  # all mass lands in bin 0
        edges[ch] = np.linspace(lo, hi, bins + 1)
        for k in range(num_classes):
            sel = acts[ch][valid & (labels == k)]
            if sel.size:
                counts[k, ch] = np.histogram(sel, bins=edges[ch])[0]
    return FeatureHistogram(edges=edges, counts=counts)


def entropy_bits(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        raise ValueError("empty histogram")
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def class_channel_entropy(features, masks, num_classes: int, bins: int = 64):
    """Mean Shannon entropy over non-empty (class, channel) cells.

    Returns (mean_entropy, table) where table[k, ch] is NaN for cells with no
    activations.
    """
    hist = build_histograms(features, masks, num_classes, bins)
    k, c, _ = hist.counts.shape
    table = np.full((k, c), np.nan)
    for ki in range(k):
        for ch in range(c):
            if hist.counts[ki, ch].sum() > 0:
                table[ki, ch] = entropy_bits(hist.counts[ki, ch])
    if np.isnan(table).all():
        raise ValueError("no class has any activations")
    return float(np.nanmean(table)), table


def hist_iou(hist_a: np.ndarray, hist_b: np.ndarray) -> float:
    """Sum of min over sum of max of two unit-mass histograms (same binning)."""
    a = np.asarray(hist_a, dtype=np.float64)
    b = np.asarray(hist_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("histograms must share binning")
    if a.sum() <= 0 or b.sum() <= 0:
        raise ValueError("empty histogram")
    a = a / a.sum()
    b = b / b.sum()
    return float(np.minimum(a, b).sum() / np.maximum(a, b).sum())


def mean_pairwise_hist_iou(hist: FeatureHistogram) -> float:
    """Average hist_iou over unordered class pairs per channel, then channels."""
    k, c, _ = hist.counts.shape
    per_channel = []
    for ch in range(c):
        present = [ki for ki in range(k) if hist.counts[ki, ch].sum() > 0]
        vals = [
            hist_iou(hist.counts[a, ch], hist.counts[b, ch])
            for i, a in enumerate(present)
            for b in present[i + 1 :]
        ]
        if vals:
            per_channel.append(float(np.mean(vals)))
    if not per_channel:
        raise ValueError("no channel has two classes to compare")
    return float(np.mean(per_channel))


def frozen_head_score(features, gts, model, batch: int = 8) -> MetricBundle:
    """Decode candidate features with the frozen decoder and score vs. masks.

    Works identically for encoder-extracted and generated features; argmax
    ties resolve toward the lower class index.
    """
    if len(features) != len(gts):
        raise ValueError("need one ground-truth mask per feature")
    conf = ConfusionMatrix(model.config.num_classes)
    with torch.no_grad():
        for lo in range(0, len(features), batch):
            chunk = features[lo : lo + batch]
            feats = torch.stack([torch.as_tensor(np.asarray(f, dtype=np.float32)) for f in chunk])
            logits = model.decode(feats)
            preds = np.argmax(logits.numpy(), axis=1)
            for j in range(len(chunk)):
                conf.accumulate(preds[j], np.asarray(gts[lo + j]))
    return compute_metrics(conf)


@dataclass
class StageStats:
    stage_tag: str
    mean_entropy: float
    mean_hist_iou: float
    frozen_head: MetricBundle

    def to_dict(self) -> dict:
        d = {
            "stage_tag": self.stage_tag,
            "mean_entropy": self.mean_entropy,
            "mean_hist_iou": self.mean_hist_iou,
        }
        d.update({f"frozen_{k}": v for k, v in self.frozen_head.to_dict().items()})
        return d


def compute_stage_stats(
    stage_tag: str,
    features,
    masks,
    num_classes: int,
    frozen_head: MetricBundle,
    bins: int = 64,
    radius: float = 100.0,
) -> StageStats:
    """Entropy and histogram overlap on norm-ball-normalized copies, plus the
    frozen-head bundle computed by the caller on the raw features."""
    normalized = [normalize_to_ball(f, radius) for f in features]
    mean_ent, _ = class_channel_entropy(normalized, masks, num_classes, bins)
    hist = build_histograms(normalized, masks, num_classes, bins)
    return StageStats(
        stage_tag=stage_tag,
        mean_entropy=mean_ent,
        mean_hist_iou=mean_pairwise_hist_iou(hist),
        frozen_head=frozen_head,
    )


def _to_gray(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.full(img.shape, 128, dtype=np.uint8)
    return np.clip(np.rint((img - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def render_feature_maps(real_feature, fakes, channel_ids, out_dir, model, gt_mask) -> list:
    """Write per-channel grayscale renders and correctness-difference maps.

    The difference map colors pixels where the generated feature decodes
    correctly and the real one does not in cyan, the reverse in red, and
    agreement in white. Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    real = np.asarray(real_feature, dtype=np.float32)
    c = real.shape[0]
    for ch in channel_ids:
        if not 0 <= ch < c:
            raise ValueError(f"channel {ch} out of range (C={c})")
    paths = []

    def save_gray(name, arr):
        p = os.path.join(out_dir, name)
        write_pgm(p, _to_gray(arr))
        paths.append(p)

    for ch in channel_ids:
        save_gray(f"real_ch{ch:03d}.pgm", real[ch])
    gt = np.asarray(gt_mask)
    with torch.no_grad():
        pred_real = np.argmax(model.decode(torch.as_tensor(real)).numpy(), axis=0)
    correct_real = pred_real == gt
    for i, fake in enumerate(fakes):
        fake = np.asarray(fake, dtype=np.float32)
        for ch in channel_ids:
            save_gray(f"fake{i:02d}_ch{ch:03d}.pgm", fake[ch])
        with torch.no_grad():
            pred_fake = np.argmax(model.decode(torch.as_tensor(fake)).numpy(), axis=0)
        correct_fake = pred_fake == gt
        diff = correct_fake.astype(np.int8) - correct_real.astype(np.int8)
        rgb = np.ones((3,) + diff.shape, dtype=np.float32)
        rgb[0][diff > 0] = 0.0  # cyan: generated feature decodes better
        rgb[1][diff < 0] = 0.0  # red: real feature decodes better
        rgb[2][diff < 0] = 0.0
        p = os.path.join(out_dir, f"diff{i:02d}.ppm")
        write_ppm(p, rgb)
        paths.append(p)
    return paths

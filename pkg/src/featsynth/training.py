"""Mixed real/synthetic segmentation training.

Real images go through encoder and decoder; synthetic features (from a frozen
generator) enter at the cut point and only update the decoder. The synthetic
branch uses label smoothing; both branch losses are means over valid pixels
and are summed unweighted. The optimizer is SGD with momentum under a poly
learning-rate schedule.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import IGNORE_LABEL, NonFiniteLossError
from .metrics import MetricBundle


@dataclass
class LsrParams:
    """Label smoothing: target weight 1 - (K-1)*eps/K, off-target eps/K."""

    epsilon: float
    num_classes: int

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")


def lsr_weight(k: int, y: int, params: LsrParams) -> float:
    """Weight q_eps(k) given target class y. Reduces to one-hot at eps=0."""
    kk = params.num_classes
    if not (0 <= k < kk and 0 <= y < kk):
        raise ValueError(f"class ids ({k}, {y}) out of range for K={kk}")
    if k == y:
        return 1.0 - (kk - 1) * params.epsilon / kk
    return params.epsilon / kk


def branch_loss(logits: torch.Tensor, gt, lsr: LsrParams) -> torch.Tensor:
    """Mean over non-ignored pixels of -sum_k q(k) log p(k).

    Equals standard cross-entropy when epsilon is 0. Accepts (K,H,W)/(H,W)
    or batched (B,K,H,W)/(B,H,W) inputs.
    """
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
    gt_t = torch.as_tensor(np.asarray(gt), dtype=torch.long, device=logits.device)
    if gt_t.dim() == 2:
        gt_t = gt_t.unsqueeze(0)
    if logits.shape[0] != gt_t.shape[0] or logits.shape[-2:] != gt_t.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} vs gt {tuple(gt_t.shape)} mismatch")

    k = lsr.num_classes
    valid = gt_t != IGNORE_LABEL
    if not bool(valid.any()):
        raise ValueError("all pixels ignored; branch loss undefined")
    logp = torch.log_softmax(logits, dim=1)
    a = 1.0 - (k - 1) * lsr.epsilon / k
    b = lsr.epsilon / k
    safe_gt = torch.where(valid, gt_t, torch.zeros_like(gt_t))
    logp_y = logp.gather(1, safe_gt.unsqueeze(1)).squeeze(1)
    per_pixel = -(a - b) * logp_y - b * logp.sum(dim=1)
    return per_pixel[valid].mean()


@dataclass
class BatchComposition:
    batch_size: int = 8
    real_fraction: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.real_fraction <= 1.0:
            raise ValueError("real_fraction must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def real_count(self) -> int:
        # round(rho * B), half away from zero, so the count is deterministic
        return int(math.floor(self.real_fraction * self.batch_size + 0.5))

    @property
    def syn_count(self) -> int:
        return self.batch_size - self.real_count


@dataclass
class LrSchedule:
    base_lr: float
    max_iter: int
    power: float = 0.9

    def __post_init__(self):
        if self.base_lr <= 0 or self.power <= 0 or self.max_iter < 1:
            raise ValueError("base_lr, power and max_iter must be positive")


def poly_lr(iteration: int, sched: LrSchedule) -> float:
    """base_lr * (1 - iter/max_iter)^power."""
    if not 0 <= iteration <= sched.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {sched.max_iter}]")
    return sched.base_lr * (1.0 - iteration / sched.max_iter) ** sched.power


@dataclass
class OhnmParams:
    enabled: bool = True
    pool_size: int = 64
    top_k: int = 8
    refresh_interval: int = 50

    def __post_init__(self):
        if self.top_k > self.pool_size:
            raise ValueError("top_k must not exceed pool_size")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be positive")


def ohnm_select(candidates, top_k: int):
    """Masks of the top_k largest losses; ties broken toward lower index."""
    if not candidates:
        raise ValueError("no OHNM candidates")
    if top_k > len(candidates):
        raise ValueError(f"top_k={top_k} exceeds {len(candidates)} candidates")
    losses = np.asarray([loss for _, loss in candidates], dtype=np.float64)
    order = np.argsort(-losses, kind="stable")
    return [candidates[i][0] for i in order[:top_k]]


class MixedTrainer:
    """Owns the model and one SGD(momentum) optimizer over it.

    Settings follow the fine-tuning schedule: momentum 0.9, weight decay 5e-4,
    poly learning rate. All state mutation happens in step().
    """

    def __init__(
        self,
        model,
        schedule: LrSchedule,
        epsilon: float,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
    ):
        self.model = model
        self.schedule = schedule
        self.lsr_real = LsrParams(0.0, model.config.num_classes)
        self.lsr_syn = LsrParams(epsilon, model.config.num_classes)
        self.optimizer = torch.optim.SGD(
            model.parameters(),
            lr=schedule.base_lr,
            momentum=momentum,
            weight_decay=weight_decay,
        )

    def mixed_step(self, real_images, real_masks, syn_features, syn_masks, iteration: int):
        """One optimizer step on real + synthetic branches; either may be empty.

        Synthetic features are detached, so the encoder receives gradient from
        the real branch only (parameters without gradients are left untouched
        by the optimizer, momentum buffers included).
        """
        lr = poly_lr(iteration, self.schedule)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        losses = {"iteration": iteration, "lr": lr, "loss_real": None, "loss_syn": None}
        total = None
        if real_images is not None and len(real_images) > 0:
            logits = self.model(torch.as_tensor(real_images))
            loss_real = branch_loss(logits, real_masks, self.lsr_real)
            losses["loss_real"] = float(loss_real.detach())
            total = loss_real
        if syn_features is not None and len(syn_features) > 0:
            feats = torch.as_tensor(syn_features).detach()
            syn_logits = self.model.decode(feats)
            loss_syn = branch_loss(syn_logits, syn_masks, self.lsr_syn)
            losses["loss_syn"] = float(loss_syn.detach())
            total = loss_syn if total is None else total + loss_syn
        if total is None:
            raise ValueError("mixed_step needs at least one non-empty branch")

        for term in ("loss_real", "loss_syn"):
            v = losses[term]
            if v is not None and not math.isfinite(v):
                raise NonFiniteLossError(term, v, iteration)

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        return losses


def evaluate_model(model, data, batch: int = 8) -> MetricBundle:
    """Full-split evaluation: encode, then score through the frozen head.

    Routing through frozen_head_score makes 'baseline eval' and 'frozen-head
    score of real features' the same computation by construction.
    """
    from .feature_stats import frozen_head_score

    with torch.no_grad():
        feats, gts = [], []
        for lo in range(0, len(data), batch):
            imgs = torch.as_tensor(data.images[lo : lo + batch])
            feats.extend(f for f in model.encode(imgs))
            gts.extend(data.masks[lo : lo + batch])
        return frozen_head_score(feats, gts, model, batch=batch)


def random_crop(images: np.ndarray, masks: np.ndarray, index: int, crop: int, rng):
    """Fixed-size window from scene `index`; consumes rng only when cropping."""
    h, w = masks.shape[-2:]
    if crop == h and crop == w:
        return images[index], masks[index]
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    return (
        images[index, :, y0 : y0 + crop, x0 : x0 + crop],
        masks[index, y0 : y0 + crop, x0 : x0 + crop],
    )


def train_segmentation(
    model,
    train_data,
    val_data,
    *,
    schedule: LrSchedule,
    composition: BatchComposition,
    epsilon: float,
    crop: int,
    seed: int,
    ohnm: OhnmParams | None = None,
    feature_sampler=None,
    mask_sampler=None,
    eval_interval: int = 200,
    log_sink=None,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
):
    """Run the full schedule; returns metric history (one bundle per eval).

    feature_sampler(masks, rng) -> features array is required when the batch
    composition reserves synthetic slots; mask_sampler(count, rng) supplies
    conditioning masks. Separate child rng streams keep the real-branch
    trajectory independent of the synthetic machinery, so real_fraction=1.0
    reproduces plain supervised fine-tuning bit for bit.
    """
    from .feature_stats import frozen_head_score  # local import, avoids cycle

    ss = np.random.SeedSequence([seed, 911])
    rng_real, rng_syn_sel, rng_z, rng_ohnm = (
        np.random.Generator(np.random.PCG64(c)) for c in ss.spawn(4)
    )
    syn_needed = composition.syn_count > 0
    if syn_needed and (feature_sampler is None or mask_sampler is None):
        raise ValueError("synthetic slots present but no generator/mask source given")

    trainer = MixedTrainer(
        model, schedule, epsilon, momentum=momentum, weight_decay=weight_decay
    )

    def run_eval(iteration):
        with torch.no_grad():
            feats, gts = [], []
            n = len(val_data)
            for lo in range(0, n, 8):
                imgs = torch.as_tensor(val_data.images[lo : lo + 8])
                feats.extend(f for f in model.encode(imgs))
                gts.extend(val_data.masks[lo : lo + 8])
            bundle = frozen_head_score(feats, gts, model)
        if log_sink is not None:
            log_sink({"iteration": iteration, "eval": bundle.to_dict()})
        return bundle

    history = [run_eval(0)]
    active_masks = None
    n_train = len(train_data)
    for it in range(schedule.max_iter):
        real_images, real_masks = None, None
        if composition.real_count > 0:
            ims, ms = [], []
            for _ in range(composition.real_count):
                idx = int(rng_real.integers(0, n_train))
                im, m = random_crop(train_data.images, train_data.masks, idx, crop, rng_real)
                ims.append(im)
                ms.append(m)
            real_images = np.stack(ims)
            real_masks = np.stack(ms)

        syn_features, syn_masks = None, None
        if syn_needed:
            if ohnm is not None and ohnm.enabled:
                if it % ohnm.refresh_interval == 0:
                    candidates = mask_sampler(ohnm.pool_size, rng_ohnm)
                    scored = score_candidates(
                        model, feature_sampler, candidates, trainer.lsr_syn, rng_ohnm
                    )
                    active_masks = ohnm_select(scored, ohnm.top_k)
                picks = [
                    active_masks[int(rng_syn_sel.integers(0, len(active_masks)))]
                    for _ in range(composition.syn_count)
                ]
            else:
                picks = mask_sampler(composition.syn_count, rng_syn_sel)
            syn_masks = np.stack(picks)
            syn_features = feature_sampler(syn_masks, rng_z)

        losses = trainer.mixed_step(real_images, real_masks, syn_features, syn_masks, it)
        if log_sink is not None:
            log_sink(losses)
        if (it + 1) % eval_interval == 0:
            history.append(run_eval(it + 1))
    return history


def score_candidates(model, feature_sampler, masks, lsr: LsrParams, rng):
    """Loss per conditioning mask under the current model, no parameter update."""
    scored = []
    with torch.no_grad():
        for lo in range(0, len(masks), 8):
            chunk = np.stack(masks[lo : lo + 8])
            feats = torch.as_tensor(feature_sampler(chunk, rng))
            logits = model.decode(feats)
            for j in range(chunk.shape[0]):
                loss = branch_loss(logits[j], chunk[j], lsr)
                scored.append((chunk[j], float(loss)))
    return scored

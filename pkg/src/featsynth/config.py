"""Experiment configuration: one JSON document describing a full run.

Sections: dataset, model, generator, training, mask_sources, eval, plus the
run seed. Unknown keys anywhere are rejected so stale configs fail loudly.
"""

import hashlib
import json
import zlib
from dataclasses import dataclass, field

from .errors import ConfigError


def _build(name: str, defaults: dict, given: dict) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"section '{name}' must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


@dataclass
class OhnmSection:
    enabled: bool = True
    pool_size: int = 64
    top_k: int = 8
    refresh_interval: int = 50


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    generator: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    mask_sources: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)


DATASET_DEFAULTS = {
    "grid": 64,
    "num_classes": 5,
    "n_train": 500,
    "n_val": 100,
    "noise_sigma": 0.05,
}

MODEL_DEFAULTS = {
    "stride": 8,
    "feature_channels": 64,
    "encoder_widths": [16, 24, 32, 48],
    "decoder_widths": [48, 32],
}

GENERATOR_DEFAULTS = {
    "latent_dim": 8,
    "aspp_channels": [24, 48, 96],
    "aspp_rates": [1, 2, 4],
    "unet_base": 0,  # 0 = derive from the channel-ratio rule
    "unet_depth": 1,
    "lambda_l1": 10.0,
    "lambda_kl": 0.01,
    "lambda_latent": 0.5,
    "lr": 2e-4,
    "beta1": 0.5,
    "beta2": 0.999,
    "steps": 2000,
    "batch_size": 4,
    "pool_patches": 2000,
    "patch_size": 64,
    "disc_aspp_channels": [12, 24, 48],
    "disc_width": 64,
    "disc_downs": 1,
    "latenc_widths": [48, 64],
    # stage-0 (image-resolution) diagnostic generator
    "image_unet_base": 12,
    "image_unet_depth": 2,
    "image_disc_width": 24,
    "image_disc_downs": 3,
    "image_latenc_widths": [16, 24, 32],
}

TRAINING_DEFAULTS = {
    "batch_size": 8,
    "real_fraction": 0.7,
    "epsilon": 1e-4,
    "base_lr": 0.02,
    "max_iter": 800,
    "power": 0.9,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "eval_interval": 200,
    "crop": 64,
    "baseline": {"base_lr": 0.1, "max_iter": 1200},
    "ohnm": {"enabled": True, "pool_size": 64, "top_k": 8, "refresh_interval": 50},
}

MASK_SOURCES_DEFAULTS = {
    "ratio": [3, 1],
    "crop": 64,
    # entries: {"name": str, "kind": "dir"|"procedural"|"val", "path": str?, "weight": float}
    "additional": [],
}

EVAL_DEFAULTS = {
    "batch_size": 8,
    "stats_patches": 128,
    "stats_bins": 64,
    "norm_radius": 100.0,
}

_ADDITIONAL_KEYS = {"name", "kind", "path", "weight"}


def resolve_config(doc: dict) -> ExperimentConfig:
    """Validate a raw config document and fill defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    known = {"seed", "dataset", "model", "generator", "training", "mask_sources", "eval"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")

    training_doc = dict(doc.get("training", {}))
    ohnm_doc = training_doc.pop("ohnm", {})
    baseline_doc = training_doc.pop("baseline", {})
    training = _build(
        "training",
        {k: v for k, v in TRAINING_DEFAULTS.items() if k not in ("ohnm", "baseline")},
        training_doc,
    )
    training["ohnm"] = _build("training.ohnm", TRAINING_DEFAULTS["ohnm"], ohnm_doc)
    training["baseline"] = _build("training.baseline", TRAINING_DEFAULTS["baseline"], baseline_doc)
    if not 0.0 <= training["real_fraction"] <= 1.0:
        raise ConfigError("training.real_fraction must be in [0, 1]")
    if not 0.0 <= training["epsilon"] < 1.0:
        raise ConfigError("training.epsilon must be in [0, 1)")

    mask_doc = dict(doc.get("mask_sources", {}))
    mask_sources = _build("mask_sources", MASK_SOURCES_DEFAULTS, mask_doc)
    for entry in mask_sources["additional"]:
        if not isinstance(entry, dict):
            raise ConfigError("mask_sources.additional entries must be objects")
        unknown = set(entry) - _ADDITIONAL_KEYS
        if unknown:
            raise ConfigError(f"unknown key(s) in mask source entry: {sorted(unknown)}")
        if entry.get("kind") not in ("dir", "procedural", "val"):
            raise ConfigError(f"unknown mask source kind {entry.get('kind')!r}")
        if entry.get("kind") == "dir" and "path" not in entry:
            raise ConfigError("dir mask source needs a path")

    return ExperimentConfig(
        seed=seed,
        dataset=_build("dataset", DATASET_DEFAULTS, doc.get("dataset", {})),
        model=_build("model", MODEL_DEFAULTS, doc.get("model", {})),
        generator=_build("generator", GENERATOR_DEFAULTS, doc.get("generator", {})),
        training=training,
        mask_sources=mask_sources,
        eval=_build("eval", EVAL_DEFAULTS, doc.get("eval", {})),
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return resolve_config(doc)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "seed": cfg.seed,
        "dataset": cfg.dataset,
        "model": cfg.model,
        "generator": cfg.generator,
        "training": cfg.training,
        "mask_sources": cfg.mask_sources,
        "eval": cfg.eval,
    }


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def derive_seed(root: int, tag: str) -> int:
    """Stable per-purpose seed in the run's seed hierarchy."""
    return int(
        np_seed_sequence([root & 0x7FFFFFFF, zlib.crc32(tag.encode())]).generate_state(1)[0]
    )


def np_seed_sequence(entropy):
    import numpy as np

    return np.random.SeedSequence(entropy)

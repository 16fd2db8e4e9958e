"""Run configuration, learning-rate schedules, and seeded RNG derivation."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, fields, replace

import numpy as np


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class Config:
    """All knobs for the pipeline.

    Defaults are desk scale so the full three-stage run finishes in minutes
    on a CPU; ``Config.paper()`` restores the published hyperparameters
    (512 hidden units, 100-epoch stages, the original learning rates).
    """

    seed: int = 123

    # corpus
    n_samples: int = 2000
    image_size: int = 32
    patch_grid: int = 4
    feature_dim: int = 64
    num_views: int = 2
    num_classes: int = 8
    noise_sigma: float = 0.1
    vocab_min_count: int = 3
    keyword_dict_size: int = 16
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    max_report_tokens: int = 128
    max_sentence_tokens: int = 32

    # model dims
    patch_hidden: int = 64
    text_hidden: int = 64
    attn_hidden: int = 32
    decoder_hidden: int = 64
    k_reports: int = 5
    k_sentences: int = 5
    n_keywords: int = 5
    m_diseases: int = 5
    max_sentences: int = 10

    # optimizer
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0

    # vlr stage
    vlr_epochs: int = 30
    vlr_batch: int = 16
    vlr_lr_image: float = 3e-3
    vlr_lr_text: float = 3e-3
    vlr_milestone: int = 50
    vlr_factor: float = 0.1
    vlr_l2: float = 1e-5

    # llr stage
    llr_epochs: int = 30
    llr_batch: int = 64
    llr_lr: float = 3e-3
    llr_every: int = 20
    llr_factor: float = 0.2
    llr_l2: float = 0.0
    llr_pairs_per_report: int = 4

    # decoder stage
    dec_epochs: int = 30
    dec_batch: int = 8
    dec_lr: float = 3e-4
    dec_milestone: int = 50
    dec_factor: float = 0.1
    dec_l2: float = 1e-5

    @classmethod
    def paper(cls) -> "Config":
        """Published hyperparameters (still on the synthetic corpus)."""
        return cls(
            decoder_hidden=512,
            vlr_epochs=100,
            vlr_batch=16,
            vlr_lr_image=1e-4,
            vlr_lr_text=1e-5,
            llr_epochs=100,
            llr_batch=64,
            llr_lr=1e-5,
            dec_epochs=100,
            dec_batch=32,
            dec_lr=3e-4,
        )

    def validate(self):
        for name in (
            "n_samples", "image_size", "patch_grid", "feature_dim", "num_views",
            "num_classes", "patch_hidden", "text_hidden", "attn_hidden",
            "decoder_hidden", "max_sentences", "max_report_tokens",
            "max_sentence_tokens",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k_reports < 1 or self.k_sentences < 1:
            raise ConfigError("k_reports and k_sentences must be >= 1")
        if self.n_keywords < 0 or self.m_diseases < 1:
            raise ConfigError("n_keywords must be >= 0 and m_diseases >= 1")
        if self.m_diseases > self.num_classes:
            raise ConfigError("m_diseases cannot exceed num_classes")
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {total}")
        if self.image_size % self.patch_grid != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_grid {self.patch_grid}"
            )
        return self

    def fingerprint(self) -> str:
        """Digest of every field that shapes data or model architecture."""
        keys = [
            "seed", "n_samples", "image_size", "patch_grid", "feature_dim",
            "num_views", "num_classes", "noise_sigma", "vocab_min_count",
            "keyword_dict_size", "train_frac", "val_frac", "test_frac",
            "max_report_tokens", "max_sentence_tokens", "patch_hidden",
            "text_hidden", "attn_hidden", "decoder_hidden", "k_reports",
            "k_sentences", "n_keywords", "m_diseases", "max_sentences",
        ]
        payload = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_SECTION_OF = {
    "seed": "run",
    "n_samples": "corpus", "image_size": "corpus", "patch_grid": "corpus",
    "feature_dim": "corpus", "num_views": "corpus", "num_classes": "corpus",
    "noise_sigma": "corpus", "vocab_min_count": "corpus",
    "keyword_dict_size": "corpus", "train_frac": "corpus", "val_frac": "corpus",
    "test_frac": "corpus", "max_report_tokens": "corpus",
    "max_sentence_tokens": "corpus",
    "patch_hidden": "model", "text_hidden": "model", "attn_hidden": "model",
    "decoder_hidden": "model", "k_reports": "model", "k_sentences": "model",
    "n_keywords": "model", "m_diseases": "model", "max_sentences": "model",
    "adam_beta1": "optim", "adam_beta2": "optim", "adam_eps": "optim",
    "grad_clip": "optim",
    "vlr_epochs": "vlr", "vlr_batch": "vlr", "vlr_lr_image": "vlr",
    "vlr_lr_text": "vlr", "vlr_milestone": "vlr", "vlr_factor": "vlr",
    "vlr_l2": "vlr",
    "llr_epochs": "llr", "llr_batch": "llr", "llr_lr": "llr",
    "llr_every": "llr", "llr_factor": "llr", "llr_l2": "llr",
    "llr_pairs_per_report": "llr",
    "dec_epochs": "decoder", "dec_batch": "decoder", "dec_lr": "decoder",
    "dec_milestone": "decoder", "dec_factor": "decoder", "dec_l2": "decoder",
}


def load_config(path: str | None = None, **overrides) -> Config:
    """Build a Config from an INI file plus keyword overrides."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        known = {f.name: f for f in fields(Config)}
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown config key '{key}' in [{section}]")
                if _SECTION_OF[key] != section:
                    raise ConfigError(
                        f"key '{key}' belongs in section [{_SECTION_OF[key]}], found in [{section}]"
                    )
                values[key] = known[key].type(raw) if known[key].type in (int, float) else raw
    cfg = Config(**values)
    if overrides:
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def save_config(cfg: Config, path: str):
    parser = configparser.ConfigParser()
    for f in fields(Config):
        section = _SECTION_OF[f.name]
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, f.name, repr(getattr(cfg, f.name)))
    with open(path, "w") as fh:
        parser.write(fh)


def config_help() -> str:
    lines = ["config keys by section:"]
    by_section: dict[str, list[str]] = {}
    for f in fields(Config):
        by_section.setdefault(_SECTION_OF[f.name], []).append(
            f"{f.name} (default {f.default!r})"
        )
    for section in ("run", "corpus", "model", "optim", "vlr", "llr", "decoder"):
        lines.append(f"  [{section}] " + ", ".join(by_section[section]))
    return "\n".join(lines)


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant multiplicative schedule.

    Either decay at fixed milestones (factor applied once per milestone
    reached) or every ``every`` epochs.
    """

    factor: float = 1.0
    milestones: tuple = ()
    every: int | None = None

    def scale(self, epoch: int) -> float:
        if epoch < 0:
            raise ConfigError(f"epoch must be >= 0, got {epoch}")
        if self.every is not None:
            return self.factor ** (epoch // self.every)
        hits = sum(1 for m in self.milestones if epoch >= m)
        return self.factor ** hits


def lr_schedule(epoch: int, base_lr: float, schedule: LrSchedule) -> float:
    return base_lr * schedule.scale(epoch)


def derived_rng(seed: int, label: str) -> np.random.Generator:
    """Stage-local generator derived stably from the global seed."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))

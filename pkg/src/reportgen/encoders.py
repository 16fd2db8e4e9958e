"""Desk-scale image and text encoders.

The image encoder is a patch perceptron: the G x G view is cut into a
k x k grid of patches and a shared two-layer MLP maps each flattened patch
to d channels. The text encoder is an embedding lookup followed by a
single-layer LSTM whose final hidden state is projected to d. Report-level
and sentence-level text encoders share the token embedding table but own
separate recurrent and projection weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LstmParams, ParameterStore, Tensor
from .config import Config, ConfigError


@dataclass
class ImageEncoderParams:
    w1: Tensor  # (patch_hidden, patch_size^2)
    b1: Tensor
    w2: Tensor  # (d, patch_hidden)
    b2: Tensor
    image_size: int
    patch_grid: int


@dataclass
class TextEncoderParams:
    embedding: Tensor  # (V, d) shared across levels
    lstm: LstmParams
    proj_w: Tensor  # (d, text_hidden)
    proj_b: Tensor
    max_tokens: int


def init_image_encoder(
    store: ParameterStore, prefix: str, rng: np.random.Generator, cfg: Config
) -> ImageEncoderParams:
    if cfg.image_size % cfg.patch_grid != 0:
        raise ConfigError(
            f"image size {cfg.image_size} not divisible by patch grid {cfg.patch_grid}"
        )
    patch = cfg.image_size // cfg.patch_grid
    in_dim = patch * patch
    return ImageEncoderParams(
        w1=store.add(f"{prefix}.w1", ad.uniform_init(rng, (cfg.patch_hidden, in_dim), in_dim)),
        b1=store.add(f"{prefix}.b1", np.zeros(cfg.patch_hidden)),
        w2=store.add(f"{prefix}.w2", ad.uniform_init(rng, (cfg.feature_dim, cfg.patch_hidden), cfg.patch_hidden)),
        b2=store.add(f"{prefix}.b2", np.zeros(cfg.feature_dim)),
        image_size=cfg.image_size,
        patch_grid=cfg.patch_grid,
    )


def init_text_encoder(
    store: ParameterStore,
    prefix: str,
    rng: np.random.Generator,
    cfg: Config,
    embedding: Tensor,
    max_tokens: int,
) -> TextEncoderParams:
    d = cfg.feature_dim
    hid = cfg.text_hidden
    lstm = LstmParams(
        w_input=store.add(f"{prefix}.lstm.w_input", ad.uniform_init(rng, (4 * hid, d), d)),
        w_hidden=store.add(f"{prefix}.lstm.w_hidden", ad.uniform_init(rng, (4 * hid, hid), hid)),
        bias=store.add(f"{prefix}.lstm.bias", np.zeros(4 * hid)),
    )
    return TextEncoderParams(
        embedding=embedding,
        lstm=lstm,
        proj_w=store.add(f"{prefix}.proj.w", ad.uniform_init(rng, (d, hid), hid)),
        proj_b=store.add(f"{prefix}.proj.b", np.zeros(d)),
        max_tokens=max_tokens,
    )


def encode_image(view, p: ImageEncoderParams) -> Tensor:
    """Encode one G x G view into a (k, k, d) feature map."""
    view = view if isinstance(view, Tensor) else Tensor(view)
    g = p.image_size
    k = p.patch_grid
    if view.shape != (g, g):
        raise ad.ShapeError(f"encode_image: expected view of shape ({g}, {g}), got {view.shape}")
    if g % k != 0:
        raise ConfigError(f"image size {g} not divisible by patch grid {k}")
    patch = g // k
    blocks = ad.reshape(view, (k, patch, k, patch))
    patches = ad.reshape(ad.transpose(blocks, (0, 2, 1, 3)), (k * k, patch * patch))
    hidden = ad.tanh(ad.linear(patches, p.w1, p.b1))
    cells = ad.linear(hidden, p.w2, p.b2)
    return ad.reshape(cells, (k, k, cells.shape[-1]))


def encode_text(token_ids, p: TextEncoderParams) -> Tensor:
    """Encode a token-id sequence into a d-dim vector.

    Sequences longer than the level's maximum keep their leading tokens.
    Out-of-vocabulary ids raise; callers map unknown words to UNK first.
    """
    ids = [int(t) for t in token_ids][: p.max_tokens]
    if not ids:
        raise ad.ValidationError("encode_text: empty token sequence")
    hid = p.lstm.w_hidden.data.shape[1]
    h = Tensor(np.zeros(hid))
    c = Tensor(np.zeros(hid))
    for tid in ids:
        x = ad.embedding_lookup(p.embedding, tid)
        h, c = ad.lstm_cell(x, (h, c), p.lstm)
    return ad.linear(h, p.proj_w, p.proj_b)

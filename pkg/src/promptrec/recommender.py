"""Attentive aspect fusion and the sigmoid rating head."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from . import autodiff as ad


class AttentionMode(str, enum.Enum):
    COMPONENTS = "components"  # softmax over the d_a entries of W_a * Z
    ASPECTS = "aspects"        # one scalar weight per aspect, softmax across the K aspects
    NONE = "none"              # raw aspect embeddings


@dataclass(frozen=True)
class RecShape:
    n_aspects: int
    d_a: int
    d_u: int
    d_i: int
    k: int
    hidden: int = 128
    n_hidden: int = 3

    @property
    def none_id(self) -> int:
        """Padding aspect row, appended after the aspect vocabulary."""
        return self.n_aspects

    @property
    def head_input(self) -> int:
        return self.k * self.d_a + self.d_u + self.d_i


def init_rec(p: ad.ParamStore, s: RecShape, g: np.random.Generator, scale: float = 0.1) -> None:
    """Dense layers from Uniform(-scale, scale); the aspect embedding table is
    standard normal, like the user and item tables."""
    def u(*shape):
        return g.uniform(-scale, scale, shape)

    p.add("rec.aspect_emb", g.standard_normal((s.n_aspects + 1, s.d_a)))
    p.add("rec.attn.w", u(s.d_a, s.d_u + s.d_i))
    p.add("rec.attn.b", u(s.d_a))
    width = s.head_input
    for layer in range(s.n_hidden):
        p.add(f"rec.f.{layer}.w", u(s.hidden, width))
        p.add(f"rec.f.{layer}.b", u(s.hidden))
        width = s.hidden
    p.add("rec.out.w", u(1, width))
    p.add("rec.out.b", u(1))


def attention_weights(w_a: torch.Tensor, w_u: torch.Tensor, w_i: torch.Tensor, p: ad.ParamStore) -> torch.Tensor:
    """softmax(W_a * Z_ui) over the d_a components, with Z_ui = dense([W_u; W_i]).

    ``w_a`` may carry an extra aspect axis: (B, K, d_a) against (B, d_u)."""
    z = ad.linear(ad.concat([w_u, w_i], axis=-1), p["rec.attn.w"], p["rec.attn.b"])
    if w_a.dim() == z.dim() + 1:
        z = z.unsqueeze(-2)
    if w_a.shape[-1] != z.shape[-1]:
        raise ad.ShapeError(f"attention: aspect width {w_a.shape[-1]} vs projection width {z.shape[-1]}")
    return ad.softmax(ad.mul(w_a, z), -1)


def modulate_aspect(w_a: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
    if w_a.shape != attn.shape:
        raise ad.ShapeError(f"modulate: aspect {tuple(w_a.shape)} vs attention {tuple(attn.shape)}")
    return w_a * attn


def aspect_features(p: ad.ParamStore, aspect_ids: torch.Tensor, w_u: torch.Tensor, w_i: torch.Tensor,
                    mode: AttentionMode = AttentionMode.COMPONENTS) -> torch.Tensor:
    """W_{u,i,A}: the K modulated aspect embeddings concatenated, shape (B, K*d_a)."""
    w_a = ad.embedding(p["rec.aspect_emb"], aspect_ids)  # (B, K, d_a)
    mode = AttentionMode(mode)
    if mode is AttentionMode.COMPONENTS:
        w_a = modulate_aspect(w_a, attention_weights(w_a, w_u, w_i, p))
    elif mode is AttentionMode.ASPECTS:
        z = ad.linear(ad.concat([w_u, w_i], axis=-1), p["rec.attn.w"], p["rec.attn.b"])
        weights = ad.softmax((w_a * z.unsqueeze(-2)).sum(-1), -1)  # (B, K)
        w_a = w_a * weights.unsqueeze(-1)
    return w_a.reshape(w_a.shape[0], -1)


def predict(p: ad.ParamStore, aspect_ids: torch.Tensor, w_u: torch.Tensor, w_i: torch.Tensor,
            mode: AttentionMode = AttentionMode.COMPONENTS) -> torch.Tensor:
    """Normalized rating predictions in (0, 1), shape (B,)."""
    x = ad.concat([aspect_features(p, aspect_ids, w_u, w_i, mode), w_u, w_i], axis=-1)
    layer = 0
    while f"rec.f.{layer}.w" in p:
        x = ad.sigmoid(ad.linear(x, p[f"rec.f.{layer}.w"], p[f"rec.f.{layer}.b"]))
        layer += 1
    return ad.sigmoid(ad.linear(x, p["rec.out.w"], p["rec.out.b"])).squeeze(-1)


def rec_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Sum of squared errors over the batch."""
    return ad.mse(y, y_hat, reduction="sum")


def normalize_rating(r):
    return (r - 1.0) / 4.0


def denormalize_rating(y):
    return 1.0 + 4.0 * y


def pad_aspects(ids: list[int], k: int, none_id: int) -> list[int]:
    ids = list(ids)[:k]
    return ids + [none_id] * (k - len(ids))

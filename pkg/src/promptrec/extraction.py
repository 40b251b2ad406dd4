"""Personalized aspect extraction through a soft prompt of user/item embeddings.

The prompt ``[W_u; W_i]`` is laid out as prefix rows in front of the review
embedding, the frozen decoder runs over both, and a dense aspect head maps the
pooled hidden state to logits over the aspect vocabulary.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from . import autodiff as ad
from .corpus import AspectVocabulary
from .lm import LmConfig, embed_review, lm_forward


class PromptMode(str, enum.Enum):
    SOFT = "soft"
    USER_ONLY = "user_only"
    ITEM_ONLY = "item_only"
    NONE = "none"
    DISCRETE = "discrete"


class UnknownEntityError(KeyError):
    pass


@dataclass(frozen=True)
class EmbeddingTables:
    """Row lookup for the user table ``<prefix>.user`` and item table ``<prefix>.item``."""

    users: tuple[str, ...]
    items: tuple[str, ...]
    prefix: str = "tables"

    def __post_init__(self):
        object.__setattr__(self, "_u", {u: k for k, u in enumerate(self.users)})
        object.__setattr__(self, "_i", {i: k for k, i in enumerate(self.items)})

    @property
    def user_param(self) -> str:
        return f"{self.prefix}.user"

    @property
    def item_param(self) -> str:
        return f"{self.prefix}.item"

    def user_row(self, user_id: str) -> int:
        try:
            return self._u[user_id]
        except KeyError:
            raise UnknownEntityError(f"unknown user {user_id!r}") from None

    def item_row(self, item_id: str) -> int:
        try:
            return self._i[item_id]
        except KeyError:
            raise UnknownEntityError(f"unknown item {item_id!r}") from None

    def rows(self, user_ids, item_ids) -> tuple[torch.Tensor, torch.Tensor]:
        return (torch.tensor([self.user_row(u) for u in user_ids], dtype=torch.long),
                torch.tensor([self.item_row(i) for i in item_ids], dtype=torch.long))

    def with_prefix(self, prefix: str) -> "EmbeddingTables":
        return EmbeddingTables(self.users, self.items, prefix)


def init_tables(p: ad.ParamStore, t: EmbeddingTables, d_u: int, d_i: int, g: np.random.Generator) -> None:
    """Standard-normal user and item tables."""
    p.add(t.user_param, g.standard_normal((len(t.users), d_u)))
    p.add(t.item_param, g.standard_normal((len(t.items), d_i)))


def build_soft_prompt(w_u: torch.Tensor | None, w_i: torch.Tensor | None, d_model: int) -> torch.Tensor:
    """Concatenate ``[W_u; W_i]`` along the feature axis and fold into rows of width
    ``d_model``; the tail of the last row is zero-padded. Works batched on a leading axis."""
    parts = [w for w in (w_u, w_i) if w is not None]
    flat = ad.concat(parts, axis=-1)
    width = flat.shape[-1]
    rows = -(-width // d_model)
    pad = rows * d_model - width
    if pad:
        flat = torch.nn.functional.pad(flat, (0, pad))
    return flat.reshape(*flat.shape[:-1], rows, d_model)


def prompt_rows(p: ad.ParamStore, t: EmbeddingTables, users: torch.Tensor, items: torch.Tensor,
                mode: PromptMode, cfg: LmConfig) -> torch.Tensor | None:
    mode = PromptMode(mode)
    if mode is PromptMode.NONE:
        return None
    if mode is PromptMode.DISCRETE:
        # ID tokens behave like ordinary vocabulary entries, positions 0 and 1.
        ids = torch.stack([ad.embedding(p["idtok.user"], users), ad.embedding(p["idtok.item"], items)], dim=1)
        return ids + p["lm.pos_emb"][:2]
    w_u = ad.embedding(p[t.user_param], users) if mode in (PromptMode.SOFT, PromptMode.USER_ONLY) else None
    w_i = ad.embedding(p[t.item_param], items) if mode in (PromptMode.SOFT, PromptMode.ITEM_ONLY) else None
    return build_soft_prompt(w_u, w_i, cfg.d_model)


def aspect_logits(p: ad.ParamStore, cfg: LmConfig, t: EmbeddingTables, ids: torch.Tensor,
                  lengths: torch.Tensor, users: torch.Tensor, items: torch.Tensor,
                  mode: PromptMode = PromptMode.SOFT, pooling: str = "last") -> torch.Tensor:
    """Aspect logits (B, V_a) for right-padded review ids (B, T) with true ``lengths``."""
    prefix = prompt_rows(p, t, users, items, mode, cfg)
    n_prefix = 0 if prefix is None else prefix.shape[1]
    body = embed_review(p, ids, cfg, offset=n_prefix)
    h, _ = lm_forward(p, prefix, body, cfg)
    ends = n_prefix + lengths  # exclusive end of real positions
    if pooling == "last":
        pooled = h[torch.arange(h.shape[0]), ends - 1]
    elif pooling == "mean":
        mask = (torch.arange(h.shape[1]).unsqueeze(0) < ends.unsqueeze(1)).to(h.dtype)
        pooled = (h * mask.unsqueeze(-1)).sum(1) / ends.unsqueeze(1).to(h.dtype)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return ad.linear(pooled, p["ext.head.w"], p["ext.head.b"])


def truth_matrix(truth: list[list[int]], n_aspects: int) -> torch.Tensor:
    """Padded (B, K_max) id matrix, -1 marking empty slots."""
    width = max(len(a) for a in truth)
    out = torch.full((len(truth), width), -1, dtype=torch.long)
    for row, ids in enumerate(truth):
        if not ids:
            raise ValueError(f"record {row} has no ground-truth aspects")
        for k, a in enumerate(ids):
            if not 0 <= a < n_aspects:
                raise ValueError(f"aspect id {a} outside [0, {n_aspects})")
            out[row, k] = a
    return out


def extraction_loss(logits: torch.Tensor, truth) -> torch.Tensor:
    """Summed negative log-probability of every ground-truth aspect under one
    shared softmax per record. ``truth`` is a list of id lists or a (B, K) matrix
    padded with -1; a 1-d ``logits`` is treated as a single record."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
        if not isinstance(truth, torch.Tensor):
            truth = [list(truth)]
    if not isinstance(truth, torch.Tensor):
        truth = truth_matrix(truth, logits.shape[-1])
    if int(truth.max()) >= logits.shape[-1]:
        raise ValueError(f"aspect id {int(truth.max())} outside [0, {logits.shape[-1]})")
    logp = ad.log_softmax(logits, -1)
    mask = truth >= 0
    picked = logp.gather(1, truth.clamp(min=0))
    return -(picked * mask).sum()


@dataclass(frozen=True)
class AspectPrediction:
    ids: tuple[int, ...]
    probs: tuple[float, ...]
    terms: tuple[str, ...] = ()


def topk_ids(logits: torch.Tensor, k: int) -> torch.Tensor:
    """Top-k ids per row, ties broken toward the lower id."""
    if k > logits.shape[-1]:
        raise ValueError(f"K={k} exceeds {logits.shape[-1]} aspects")
    order = torch.sort(-logits, dim=-1, stable=True).indices
    return order[..., :k]


def decode_topk(logits: torch.Tensor, k: int = 3, av: AspectVocabulary | None = None) -> AspectPrediction:
    logits = logits.detach().reshape(-1)
    ids = topk_ids(logits, k)
    probs = ad.softmax(logits.double(), -1)[ids]
    ids_t = tuple(int(j) for j in ids)
    terms = tuple(av.terms[j] for j in ids_t) if av is not None else ()
    return AspectPrediction(ids_t, tuple(float(q) for q in probs), terms)

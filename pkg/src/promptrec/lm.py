"""A small GPT-style causal language model with a residual fine-tuning layer.

Parameters live in a ``ParamStore`` under ``lm.`` (the base model) and
``ft.`` (the fine-tuning layer, present only after :func:`finetune`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import autodiff as ad
from . import rng as rng_mod
from .corpus import PAD, Dataset, Vocabulary, tokenize

log = logging.getLogger(__name__)

TOKEN_EMB_STD = 1.0


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


@dataclass
class LanguageModel:
    cfg: LmConfig
    vocab: Vocabulary
    params: ad.ParamStore
    history: dict = field(default_factory=dict)

    @property
    def has_finetune_layer(self) -> bool:
        return "ft.w" in self.params


def init_lm_params(cfg: LmConfig, seed: int, p: ad.ParamStore | None = None,
                   dtype: torch.dtype = torch.float32) -> ad.ParamStore:
    p = p if p is not None else ad.ParamStore(dtype)
    g = rng_mod.stream(seed, rng_mod.INIT, 1)
    d = cfg.d_model
    std = 0.02
    proj_std = std / math.sqrt(2 * cfg.n_layers)
    p.add("lm.tok_emb", g.normal(0, TOKEN_EMB_STD, (cfg.vocab_size, d)))
    p.add("lm.pos_emb", g.normal(0, std, (cfg.max_seq_len, d)))
    for layer in range(cfg.n_layers):
        pre = f"lm.blocks.{layer}."
        p.add(pre + "ln1.g", np.ones(d))
        p.add(pre + "ln1.b", np.zeros(d))
        p.add(pre + "attn.qkv.w", g.normal(0, std, (3 * d, d)))
        p.add(pre + "attn.qkv.b", np.zeros(3 * d))
        p.add(pre + "attn.out.w", g.normal(0, proj_std, (d, d)))
        p.add(pre + "attn.out.b", np.zeros(d))
        p.add(pre + "ln2.g", np.ones(d))
        p.add(pre + "ln2.b", np.zeros(d))
        p.add(pre + "mlp.fc.w", g.normal(0, std, (4 * d, d)))
        p.add(pre + "mlp.fc.b", np.zeros(4 * d))
        p.add(pre + "mlp.proj.w", g.normal(0, proj_std, (d, 4 * d)))
        p.add(pre + "mlp.proj.b", np.zeros(d))
    p.add("lm.ln_f.g", np.ones(d))
    p.add("lm.ln_f.b", np.zeros(d))
    p.add("lm.head.w", g.normal(0, std, (cfg.vocab_size, d)))
    return p


def add_finetune_layer(p: ad.ParamStore, d_model: int) -> None:
    """Zero-initialized, so the model is unchanged until the layer trains."""
    if "ft.w" not in p:
        p.add("ft.w", np.zeros((d_model, d_model)))
        p.add("ft.b", np.zeros(d_model))


def encode_reviews(d: Dataset, vocab: Vocabulary, max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    seqs = [tokenize(r.review, vocab, max_len) for r in d]
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = torch.tensor(s, dtype=torch.long)
    return ids, torch.tensor([len(s) for s in seqs], dtype=torch.long)


def embed_review(p: ad.ParamStore, ids: torch.Tensor, cfg: LmConfig, offset: int = 0) -> torch.Tensor:
    """Token plus learned positional embeddings for ``ids`` of shape (T,) or (B, T)."""
    T = ids.shape[-1]
    if offset + T > cfg.max_seq_len:
        raise ValueError(f"sequence of {T} tokens at offset {offset} exceeds max_seq_len={cfg.max_seq_len}")
    return ad.embedding(p["lm.tok_emb"], ids) + p["lm.pos_emb"][offset: offset + T]


def _block(p: ad.ParamStore, x: torch.Tensor, layer: int, n_heads: int) -> torch.Tensor:
    pre = f"lm.blocks.{layer}."
    h = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    x = x + ad.causal_self_attention(h, p[pre + "attn.qkv.w"], p[pre + "attn.qkv.b"],
                                     p[pre + "attn.out.w"], p[pre + "attn.out.b"], n_heads)
    h = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
    h = ad.gelu(ad.linear(h, p[pre + "mlp.fc.w"], p[pre + "mlp.fc.b"]))
    return x + ad.linear(h, p[pre + "mlp.proj.w"], p[pre + "mlp.proj.b"])


def lm_forward(p: ad.ParamStore, prefix: torch.Tensor | None, body: torch.Tensor,
               cfg: LmConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the decoder over ``[prefix; body]``.

    Both inputs are already-embedded rows, (B, n, d) or (n, d). Returns the
    fine-tuned hidden states and next-token logits for every position.
    """
    squeeze = body.dim() == 2
    if squeeze:
        body = body.unsqueeze(0)
        prefix = prefix.unsqueeze(0) if prefix is not None else None
    if body.shape[-1] != cfg.d_model:
        raise ad.ShapeError(f"lm_forward: body width {body.shape[-1]} vs d_model {cfg.d_model}")
    if prefix is not None and prefix.shape[1] > 0:
        if prefix.shape[-1] != cfg.d_model:
            raise ad.ShapeError(f"lm_forward: prefix width {prefix.shape[-1]} vs d_model {cfg.d_model}")
        x = ad.concat([prefix, body], axis=1)
    else:
        x = body
    if x.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {x.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    for layer in range(cfg.n_layers):
        x = _block(p, x, layer, cfg.n_heads)
    h = ad.layer_norm(x, p["lm.ln_f.g"], p["lm.ln_f.b"])
    if "ft.w" in p:
        h = h + ad.linear(h, p["ft.w"], p["ft.b"])
    logits = ad.linear(h, p["lm.head.w"])
    if squeeze:
        return h[0], logits[0]
    return h, logits


def next_token_nll(p: ad.ParamStore, ids: torch.Tensor, lengths: torch.Tensor,
                   cfg: LmConfig) -> tuple[torch.Tensor, int]:
    """Summed next-token negative log-likelihood over real positions, and their count."""
    _, logits = lm_forward(p, None, embed_review(p, ids, cfg), cfg)
    targets = ids[:, 1:]
    mask = torch.arange(ids.shape[1] - 1).unsqueeze(0) < (lengths - 1).unsqueeze(1)
    nll = ad.cross_entropy(logits[:, :-1], targets, reduction="none")
    return (nll * mask).sum(), int(mask.sum())


def _batches(n: int, batch_size: int, g: np.random.Generator | None):
    order = g.permutation(n) if g is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield torch.as_tensor(order[start:start + batch_size])


def _fit_next_token(p: ad.ParamStore, names: list[str], ids, lengths, cfg: LmConfig, *,
                    epochs: int, lr: float, batch_size: int, seed: int, purpose: int) -> list[float]:
    opt = torch.optim.Adam([p[n] for n in names], lr=lr)
    losses = []
    for epoch in range(epochs):
        g = rng_mod.stream(seed, purpose, epoch)
        total, count = 0.0, 0
        for idx in _batches(len(ids), batch_size, g):
            width = int(lengths[idx].max())
            nll, n = next_token_nll(p, ids[idx, :width], lengths[idx], cfg)
            opt.zero_grad(set_to_none=True)
            (nll / n).backward()
            opt.step()
            total += float(nll.detach())
            count += n
        losses.append(total / count)
        log.info("next-token epoch %d loss %.4f", epoch + 1, losses[-1])
    return losses


def pretrain_base(corpus: Dataset, cfg: LmConfig, vocab: Vocabulary, seed: int = 0, *,
                  epochs: int = 4, lr: float = 3e-3, batch_size: int = 32,
                  max_len: int | None = None, dtype: torch.dtype = torch.float32) -> LanguageModel:
    """Train the base decoder on next-token prediction, then freeze it."""
    if len(corpus) == 0:
        raise ValueError("pretraining corpus is empty")
    p = init_lm_params(cfg, seed, dtype=dtype)
    ids, lengths = encode_reviews(corpus, vocab, max_len or cfg.max_seq_len)
    losses = _fit_next_token(p, p.names("lm."), ids, lengths, cfg, epochs=epochs, lr=lr,
                             batch_size=batch_size, seed=seed, purpose=rng_mod.PRETRAIN)
    p.set_trainable("lm.", False)
    return LanguageModel(cfg, vocab, p, {"pretrain_loss": losses})


def finetune(m: LanguageModel, train: Dataset, *, epochs: int = 2, lr: float = 1e-3,
             batch_size: int = 32, seed: int = 0, max_len: int | None = None) -> LanguageModel:
    """Fit only the fine-tuning layer by next-token perplexity on ``train``; freeze it afterwards."""
    p = m.params
    add_finetune_layer(p, m.cfg.d_model)
    p.set_trainable("lm.", False)
    p.set_trainable("ft.", True)
    ids, lengths = encode_reviews(train, m.vocab, max_len or m.cfg.max_seq_len)
    losses = _fit_next_token(p, p.names("ft."), ids, lengths, m.cfg, epochs=epochs, lr=lr,
                             batch_size=batch_size, seed=seed, purpose=rng_mod.FINETUNE)
    p.set_trainable("ft.", False)
    m.history["finetune_loss"] = losses
    return m


def perplexity(m: LanguageModel, d: Dataset, max_len: int | None = None, batch_size: int = 256) -> float:
    if len(d) == 0:
        raise ValueError("perplexity of an empty dataset")
    ids, lengths = encode_reviews(d, m.vocab, max_len or m.cfg.max_seq_len)
    total, count = 0.0, 0
    with torch.no_grad():
        for idx in _batches(len(ids), batch_size, None):
            width = int(lengths[idx].max())
            nll, n = next_token_nll(m.params, ids[idx, :width], lengths[idx], m.cfg)
            total += float(nll.detach())
            count += n
    return math.exp(total / count)

"""Alternating joint training of aspect extraction and rating prediction.

Each batch first takes a gradient step on the extraction loss (tables, aspect
head), decodes the top-K aspects from that same forward pass, and then takes a
step on the rating loss (recommendation network, aspect table, tables). Steps
use Adam by default or plain SGD with ``optimizer = sgd``. The language model
and its fine-tuning layer stay frozen throughout.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from . import autodiff as ad
from . import rng as rng_mod
from .corpus import (AspectVocabulary, Dataset, Vocabulary, build_aspect_vocab, build_vocab,
                     split_dataset)
from .extraction import (AspectPrediction, EmbeddingTables, PromptMode, aspect_logits, decode_topk,
                         extraction_loss, init_tables, topk_ids)
from .lm import LanguageModel, LmConfig, encode_reviews, finetune, pretrain_base
from .metrics import ExtractionMetrics, RecMetrics, extraction_metrics, rec_metrics
from .recommender import (AttentionMode, RecShape, denormalize_rating, init_rec, normalize_rating,
                          pad_aspects, predict, rec_loss)

log = logging.getLogger(__name__)

ABLATIONS = (
    "no_joint", "no_finetune", "no_prompt", "discrete_prompt",
    "no_alternating", "no_attention", "user_only_prompt", "item_only_prompt",
)
_PROMPT_FLAGS = ("no_prompt", "discrete_prompt", "user_only_prompt", "item_only_prompt")


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, phase: str, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite {phase} loss ({value}) at epoch {epoch}, batch {batch}")
        self.phase, self.epoch, self.batch = phase, epoch, batch


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    lr: float = 0.003
    n_epoch: int = 30
    batch_size: int = 32
    k: int = 3
    patience: int = 5
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    min_freq: int = 1
    max_review_len: int = 32
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 64
    d_u: int = 32
    d_i: int = 32
    d_a: int = 16
    rec_hidden: int = 128
    pretrain_epochs: int = 4
    pretrain_lr: float = 3e-3
    finetune_epochs: int = 2
    finetune_lr: float = 1e-3
    lm_batch_size: int = 32
    pooling: str = "mean"
    attention_axis: str = "components"
    alternation: str = "batch"
    teacher_forcing: bool = False
    train_finetune_layer: bool = False
    grad_clip: float = 0.0
    optimizer: str = "adam"
    no_joint: bool = False
    no_finetune: bool = False
    no_prompt: bool = False
    discrete_prompt: bool = False
    no_alternating: bool = False
    no_attention: bool = False
    user_only_prompt: bool = False
    item_only_prompt: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if sum(bool(getattr(self, f)) for f in _PROMPT_FLAGS) > 1:
            raise ConfigError(f"at most one of {', '.join(_PROMPT_FLAGS)} may be set")
        if self.pooling not in ("last", "mean"):
            raise ConfigError(f"pooling must be 'last' or 'mean', got {self.pooling!r}")
        if self.attention_axis not in ("components", "aspects"):
            raise ConfigError(f"attention_axis must be 'components' or 'aspects', got {self.attention_axis!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.alternation not in ("batch", "epoch"):
            raise ConfigError(f"alternation must be 'batch' or 'epoch', got {self.alternation!r}")
        for name in ("n_epoch", "batch_size", "k", "d_model", "d_u", "d_i", "d_a", "rec_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")

    @property
    def prompt_mode(self) -> PromptMode:
        if self.no_prompt:
            return PromptMode.NONE
        if self.discrete_prompt:
            return PromptMode.DISCRETE
        if self.user_only_prompt:
            return PromptMode.USER_ONLY
        if self.item_only_prompt:
            return PromptMode.ITEM_ONLY
        return PromptMode.SOFT

    @property
    def attention_mode(self) -> AttentionMode:
        return AttentionMode.NONE if self.no_attention else AttentionMode(self.attention_axis)

    @property
    def prefix_rows(self) -> int:
        mode = self.prompt_mode
        width = {PromptMode.SOFT: self.d_u + self.d_i, PromptMode.USER_ONLY: self.d_u,
                 PromptMode.ITEM_ONLY: self.d_i, PromptMode.NONE: 0}.get(mode)
        if mode is PromptMode.DISCRETE:
            return 2
        return -(-width // self.d_model)

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_val, self.split_test)

    def lm_config(self, vocab_size: int) -> LmConfig:
        return LmConfig(vocab_size, self.d_model, self.n_layers, self.n_heads, self.max_seq_len)

    def with_ablation(self, *names: str) -> "TrainConfig":
        for n in names:
            if n not in ABLATIONS:
                raise ConfigError(f"unknown ablation {n!r}; choose from {', '.join(ABLATIONS)}")
        return replace(self, **{n: True for n in names})

    def active_ablations(self) -> list[str]:
        return [n for n in ABLATIONS if getattr(self, n)]


def _coerce(field_type, raw: str, key: str):
    t = field_type if isinstance(field_type, str) else field_type.__name__
    try:
        if t == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        return raw.strip().strip('"').strip("'")
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {t}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines (``#`` comments, blank lines ignored); unknown keys rejected."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(types[key], raw, key)
    return replace(base or TrainConfig(), **values)


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


# Model bundle -----------------------------------------------------------------


@dataclass
class Encoded:
    ids: torch.Tensor
    lengths: torch.Tensor
    users: torch.Tensor
    items: torch.Tensor
    truth: torch.Tensor          # (N, K_max) aspect ids, -1 = empty/unknown
    truth_terms: list
    y: torch.Tensor              # normalized ratings
    raw: np.ndarray              # raw 1-5 ratings

    def __len__(self) -> int:
        return len(self.raw)


@dataclass
class EvalResult:
    extraction: ExtractionMetrics
    rec: RecMetrics
    ext_loss: float
    rec_loss: float
    predicted_terms: list = field(repr=False, default_factory=list)
    y_hat: np.ndarray = field(repr=False, default=None)

    @property
    def total_loss(self) -> float:
        return self.ext_loss + self.rec_loss

    def row(self) -> dict:
        return {**asdict(self.extraction), **asdict(self.rec)}


@dataclass
class PromptRecModel:
    cfg: TrainConfig
    lm_cfg: LmConfig
    vocab: Vocabulary
    aspects: AspectVocabulary
    tables: EmbeddingTables
    params: ad.ParamStore

    @property
    def rec_tables(self) -> EmbeddingTables:
        return self.tables.with_prefix("rec_tables") if self.cfg.no_joint else self.tables

    @property
    def rec_shape(self) -> RecShape:
        c = self.cfg
        return RecShape(len(self.aspects), c.d_a, c.d_u, c.d_i, c.k, c.rec_hidden)

    def phase1_names(self) -> list[str]:
        p = self.params
        names = [self.tables.user_param, self.tables.item_param] + p.names("ext.") + p.names("idtok.")
        if self.cfg.train_finetune_layer:
            names += p.names("ft.")
        return names

    def phase2_names(self) -> list[str]:
        t = self.rec_tables
        return self.params.names("rec.") + [t.user_param, t.item_param]

    # encoding -----------------------------------------------------------------

    def encode(self, d: Dataset) -> Encoded:
        ids, lengths = encode_reviews(d, self.vocab, self.cfg.max_review_len)
        users, items = self.tables.rows([r.user_id for r in d], [r.item_id for r in d])
        known = [[self.aspects.id(a) for a in r.aspects if a in self.aspects] for r in d]
        width = max(1, max(len(k) for k in known))
        truth = torch.full((len(d), width), -1, dtype=torch.long)
        for row, ids_ in enumerate(known):
            truth[row, : len(ids_)] = torch.tensor(ids_, dtype=torch.long)
        raw = np.array([r.rating for r in d], dtype=np.float64)
        y = torch.as_tensor(normalize_rating(raw), dtype=self.params.dtype)
        return Encoded(ids, lengths, users, items, truth, [list(r.aspects) for r in d], y, raw)

    def teacher_ids(self, truth: torch.Tensor) -> torch.Tensor:
        none = self.rec_shape.none_id
        rows = [pad_aspects([a for a in row.tolist() if a >= 0], self.cfg.k, none) for row in truth]
        return torch.tensor(rows, dtype=torch.long)

    # forward pieces -------------------------------------------------------------

    def logits(self, e: Encoded, idx: torch.Tensor) -> torch.Tensor:
        width = int(e.lengths[idx].max())
        return aspect_logits(self.params, self.lm_cfg, self.tables, e.ids[idx, :width], e.lengths[idx],
                             e.users[idx], e.items[idx], self.cfg.prompt_mode, self.cfg.pooling)

    def rate(self, e: Encoded, idx: torch.Tensor, aspect_ids: torch.Tensor) -> torch.Tensor:
        t = self.rec_tables
        w_u = self.params[t.user_param][e.users[idx]]
        w_i = self.params[t.item_param][e.items[idx]]
        return predict(self.params, aspect_ids, w_u, w_i, self.cfg.attention_mode)

    # inference --------------------------------------------------------------------

    def evaluate(self, d: Dataset | Encoded, batch_size: int = 256) -> EvalResult:
        e = d if isinstance(d, Encoded) else self.encode(d)
        n = len(e)
        ext_total, rec_total = 0.0, 0.0
        pred_ids, y_hat = [], []
        with torch.no_grad():
            for start in range(0, n, batch_size):
                idx = torch.arange(start, min(n, start + batch_size))
                logits = self.logits(e, idx)
                ext_total += float(extraction_loss(logits, e.truth[idx])) if int(e.truth[idx].max()) >= 0 else 0.0
                top = topk_ids(logits, self.cfg.k)
                yh = self.rate(e, idx, top)
                rec_total += float(rec_loss(e.y[idx], yh))
                pred_ids.append(top)
                y_hat.append(yh)
        pred_ids = torch.cat(pred_ids).tolist()
        y_hat = torch.cat(y_hat).double().numpy()
        terms = [[self.aspects.terms[j] for j in row] for row in pred_ids]
        return EvalResult(
            extraction=extraction_metrics(terms, e.truth_terms),
            rec=rec_metrics(e.raw, y_hat),
            ext_loss=ext_total / n,
            rec_loss=rec_total / n,
            predicted_terms=terms,
            y_hat=y_hat,
        )

    def _single(self, user_id: str, item_id: str, review: str) -> tuple[Encoded, torch.Tensor]:
        from .corpus import ReviewRecord
        rec = ReviewRecord(user_id, item_id, 3.0, review, ("_",))
        e = self.encode(Dataset((rec,)))
        return e, torch.arange(1)

    def extract(self, user_id: str, item_id: str, review: str) -> AspectPrediction:
        e, idx = self._single(user_id, item_id, review)
        with torch.no_grad():
            logits = self.logits(e, idx)[0]
        return decode_topk(logits, self.cfg.k, self.aspects)

    def recommend(self, user_id: str, item_id: str, review: str) -> tuple[float, float, AspectPrediction]:
        """Normalized and 1-5 rating for one record, with the aspects it was based on."""
        e, idx = self._single(user_id, item_id, review)
        with torch.no_grad():
            logits = self.logits(e, idx)
            pred = decode_topk(logits[0], self.cfg.k, self.aspects)
            y = float(self.rate(e, idx, topk_ids(logits, self.cfg.k))[0])
        return y, denormalize_rating(y), pred


# Initialization ---------------------------------------------------------------


def init_params(cfg: TrainConfig, lm: LanguageModel, aspects: AspectVocabulary,
                users, items, dtype: torch.dtype | None = None) -> PromptRecModel:
    """Tables ~ N(0, 1), recommendation network and aspect head ~ U(-0.1, 0.1),
    on top of a copy of the (frozen) language model parameters."""
    p = lm.params.to(dtype or lm.params.dtype)
    if cfg.no_finetune:
        p.remove("ft.")
    elif cfg.train_finetune_layer:
        p.set_trainable("ft.", True)
    if cfg.prefix_rows + cfg.max_review_len > lm.cfg.max_seq_len:
        raise ConfigError(f"prompt ({cfg.prefix_rows} rows) plus max_review_len={cfg.max_review_len} "
                          f"exceeds max_seq_len={lm.cfg.max_seq_len}")
    tables = EmbeddingTables(tuple(users), tuple(items))
    init_tables(p, tables, cfg.d_u, cfg.d_i, rng_mod.stream(cfg.seed, rng_mod.INIT, 2))
    g = rng_mod.stream(cfg.seed, rng_mod.INIT, 3)
    shape = RecShape(len(aspects), cfg.d_a, cfg.d_u, cfg.d_i, cfg.k, cfg.rec_hidden)
    init_rec(p, shape, g)
    g = rng_mod.stream(cfg.seed, rng_mod.INIT, 4)
    p.add("ext.head.w", g.uniform(-0.1, 0.1, (len(aspects), lm.cfg.d_model)))
    p.add("ext.head.b", g.uniform(-0.1, 0.1, len(aspects)))
    if cfg.discrete_prompt:
        g = rng_mod.stream(cfg.seed, rng_mod.INIT, 5)
        p.add("idtok.user", g.normal(0, 0.02, (len(users), lm.cfg.d_model)))
        p.add("idtok.item", g.normal(0, 0.02, (len(items), lm.cfg.d_model)))
    if cfg.no_joint:
        init_tables(p, tables.with_prefix("rec_tables"), cfg.d_u, cfg.d_i,
                    rng_mod.stream(cfg.seed, rng_mod.INIT, 6))
    return PromptRecModel(cfg, lm.cfg, lm.vocab, aspects, tables, p)


# Training ------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    ext_loss: float
    rec_loss: float
    val_ext_loss: float
    val_rec_loss: float
    precision_at_3: float
    recall_at_3: float
    f1: float
    rmse: float
    mae: float
    auc: float
    seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self) -> int:
        return len(self.epochs)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.epochs]


HISTORY_COLUMNS = tuple(f.name for f in fields(EpochRecord))


def _check_finite(loss: torch.Tensor, phase: str, epoch: int, batch: int) -> None:
    v = float(loss.detach())
    if not math.isfinite(v):
        raise DivergenceError(phase, epoch, batch, v)


class Stepper:
    """Gradient updates for one parameter group, by plain SGD or through a
    shared Adam optimizer. Sharing one Adam state across both phases keeps the
    moment estimates of the embedding tables common to both losses."""

    def __init__(self, model: PromptRecModel, names: list[str], opt: torch.optim.Optimizer | None = None):
        self.params, self.names, self.cfg, self.opt = model.params, names, model.cfg, opt

    def __call__(self, loss: torch.Tensor) -> None:
        g = ad.backward(loss, self.params, self.names)
        if self.opt is None:
            ad.sgd_step(self.params, g, self.cfg.lr, self.cfg.grad_clip or None)
            return
        if self.cfg.grad_clip:
            total = math.sqrt(sum(float((t ** 2).sum()) for t in g.values()))
            if total > self.cfg.grad_clip:
                g = {n: t * (self.cfg.grad_clip / total) for n, t in g.items()}
        for n, t in g.items():
            self.params[n].grad = t
        self.opt.step()
        for n in g:
            self.params[n].grad = None


def make_steppers(model: PromptRecModel) -> dict[str, Stepper]:
    ph1, ph2 = model.phase1_names(), model.phase2_names()
    union = list(dict.fromkeys(ph1 + ph2))
    opt = None
    if model.cfg.optimizer == "adam":
        opt = torch.optim.Adam([model.params[n] for n in union], lr=model.cfg.lr)
    return {"extraction": Stepper(model, ph1, opt), "recommendation": Stepper(model, ph2, opt),
            "joint": Stepper(model, union, opt)}


def _aspects_for_rec(model: PromptRecModel, e: Encoded, idx: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    if model.cfg.teacher_forcing:
        return model.teacher_ids(e.truth[idx])
    return topk_ids(logits.detach(), model.cfg.k)


def alternating_epoch(model: PromptRecModel, e: Encoded, epoch: int,
                      steppers: dict[str, Stepper] | None = None) -> tuple[float, float]:
    """One pass over ``e``; returns summed extraction and rating losses."""
    cfg = model.cfg
    order = torch.as_tensor(rng_mod.stream(cfg.seed, rng_mod.SHUFFLE, epoch).permutation(len(e)))
    batches = list(torch.split(order, cfg.batch_size))
    steppers = steppers or make_steppers(model)
    ext_total, rec_total = 0.0, 0.0

    if cfg.alternation == "epoch" and not cfg.no_alternating:
        for b, idx in enumerate(batches):
            l1 = extraction_loss(model.logits(e, idx), e.truth[idx])
            _check_finite(l1, "extraction", epoch, b)
            steppers["extraction"](l1)
            ext_total += float(l1.detach())
        for b, idx in enumerate(batches):
            with torch.no_grad():
                aspects = _aspects_for_rec(model, e, idx, model.logits(e, idx))
            l2 = rec_loss(e.y[idx], model.rate(e, idx, aspects))
            _check_finite(l2, "recommendation", epoch, b)
            steppers["recommendation"](l2)
            rec_total += float(l2.detach())
        return ext_total, rec_total

    for b, idx in enumerate(batches):
        logits = model.logits(e, idx)
        l1 = extraction_loss(logits, e.truth[idx])
        _check_finite(l1, "extraction", epoch, b)
        aspects = _aspects_for_rec(model, e, idx, logits)
        if cfg.no_alternating:
            l2 = rec_loss(e.y[idx], model.rate(e, idx, aspects))
            _check_finite(l2, "recommendation", epoch, b)
            steppers["joint"](l1 + l2)
        else:
            steppers["extraction"](l1)
            l2 = rec_loss(e.y[idx], model.rate(e, idx, aspects))
            _check_finite(l2, "recommendation", epoch, b)
            steppers["recommendation"](l2)
        ext_total += float(l1.detach())
        rec_total += float(l2.detach())
    return ext_total, rec_total


def train(model: PromptRecModel, train_split: Dataset, val_split: Dataset,
          on_epoch=None) -> TrainHistory:
    """Alternate until the validation loss stops improving for ``patience`` epochs
    (0 disables early stopping) or ``n_epoch`` is reached; the best-validation
    parameters are restored before returning."""
    cfg = model.cfg
    e_train, e_val = model.encode(train_split), model.encode(val_split)
    history = TrainHistory()
    best_loss, best_state, stale = math.inf, None, 0
    steppers = make_steppers(model)
    for epoch in range(1, cfg.n_epoch + 1):
        t0 = time.perf_counter()
        ext, rec = alternating_epoch(model, e_train, epoch, steppers)
        ev = model.evaluate(e_val)
        rec_entry = EpochRecord(
            epoch, ext / len(e_train), rec / len(e_train), ev.ext_loss, ev.rec_loss,
            ev.extraction.precision_at_3, ev.extraction.recall_at_3, ev.extraction.f1,
            ev.rec.rmse, ev.rec.mae, ev.rec.auc, time.perf_counter() - t0,
        )
        history.epochs.append(rec_entry)
        log.info("epoch %d ext %.4f rec %.4f | val F1 %.4f RMSE %.4f", epoch, rec_entry.ext_loss,
                 rec_entry.rec_loss, rec_entry.f1, rec_entry.rmse)
        if on_epoch is not None:
            on_epoch(rec_entry)
        if ev.total_loss < best_loss:
            best_loss, stale = ev.total_loss, 0
            history.best_epoch = epoch
            best_state = model.params.numpy()
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    if best_state is not None:
        model.params.load(best_state)
    return history


# Pipeline ------------------------------------------------------------------------


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def make_splits(d: Dataset, cfg: TrainConfig) -> Splits:
    return Splits(*split_dataset(d, cfg.ratios, cfg.seed))


def prepare_language_model(train_split: Dataset, cfg: TrainConfig, with_finetune: bool = True) -> LanguageModel:
    """Pretrain the base decoder on the training reviews and, unless disabled,
    fit the fine-tuning layer on the same split."""
    vocab = build_vocab(train_split, cfg.min_freq)
    lm = pretrain_base(train_split, cfg.lm_config(len(vocab)), vocab, cfg.seed, epochs=cfg.pretrain_epochs,
                       lr=cfg.pretrain_lr, batch_size=cfg.lm_batch_size, max_len=cfg.max_review_len)
    if with_finetune:
        finetune(lm, train_split, epochs=cfg.finetune_epochs, lr=cfg.finetune_lr,
                 batch_size=cfg.lm_batch_size, seed=cfg.seed, max_len=cfg.max_review_len)
    return lm


@dataclass
class FitResult:
    model: PromptRecModel
    history: TrainHistory
    splits: Splits
    lm: LanguageModel

    def test_eval(self) -> EvalResult:
        return self.model.evaluate(self.splits.test)


def fit(d: Dataset, cfg: TrainConfig, lm: LanguageModel | None = None, on_epoch=None) -> FitResult:
    """Split, prepare the language model (or reuse ``lm``), initialize, train."""
    splits = make_splits(d, cfg)
    if lm is None:
        lm = prepare_language_model(splits.train, cfg, with_finetune=not cfg.no_finetune)
    aspects = build_aspect_vocab(splits.train)
    model = init_params(cfg, lm, aspects, d.users(), d.items())
    history = train(model, splits.train, splits.val, on_epoch=on_epoch)
    return FitResult(model, history, splits, lm)


def clone_lm(lm: LanguageModel) -> LanguageModel:
    return LanguageModel(lm.cfg, lm.vocab, lm.params.copy(), copy.deepcopy(lm.history))

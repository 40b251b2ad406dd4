import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from promptrec import autodiff as ad
from promptrec.corpus import build_aspect_vocab
from promptrec.extraction import EmbeddingTables, extraction_loss, init_tables
from promptrec.recommender import rec_loss
from promptrec.training import (ABLATIONS, ConfigError, DivergenceError, TrainConfig, alternating_epoch, fit,
                                format_config, init_params, make_splits, make_steppers, parse_config)

from conftest import TINY_CFG, TINY_CFG_TEXT


# config -----------------------------------------------------------------------


def test_parse_and_format_roundtrip():
    cfg = parse_config(TINY_CFG_TEXT)
    assert cfg == TINY_CFG
    assert parse_config(format_config(cfg)) == cfg
    assert parse_config("# nothing\n\nlr = 0.5  # trailing\nteacher_forcing = yes\n") == \
        TrainConfig(lr=0.5, teacher_forcing=True)


@pytest.mark.parametrize("text, match", [
    ("learning_rate = 0.1", "unknown key"),
    ("lr 0.1", "line 1"),
    ("n_epoch = many", "n_epoch"),
    ("no_prompt = maybe", "no_prompt"),
    ("no_prompt = 1\nuser_only_prompt = 1", "at most one"),
    ("pooling = max", "pooling"),
    ("optimizer = rmsprop", "optimizer"),
    ("lr = 0", "lr"),
    ("batch_size = 0", "batch_size"),
])
def test_invalid_config(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_ablation_names():
    cfg = TrainConfig().with_ablation("no_joint", "no_attention")
    assert cfg.active_ablations() == ["no_joint", "no_attention"]
    with pytest.raises(ConfigError):
        TrainConfig().with_ablation("no_everything")
    assert len(ABLATIONS) == 8


def test_prompt_too_long_for_model(tiny_data, tiny_lm):
    cfg = replace(TINY_CFG, max_review_len=32)
    with pytest.raises(ConfigError, match="max_seq_len"):
        init_params(cfg, tiny_lm, build_aspect_vocab(tiny_data), tiny_data.users(), tiny_data.items())


# initialization -----------------------------------------------------------------


def test_init_distributions(tiny_model):
    p = tiny_model.params
    for name in ("tables.user", "tables.item"):
        t = p[name].detach()
        assert abs(float(t.mean())) < 0.3 and 0.7 < float(t.std()) < 1.3
    for name in ("ext.head.w", "rec.out.w", "rec.attn.w"):
        assert float(p[name].detach().abs().max()) <= 0.1
    assert not any(p.is_trainable(n) for n in p.names("lm.") + p.names("ft."))


def test_init_is_seeded(tiny_data, tiny_lm):
    av = build_aspect_vocab(tiny_data)
    a = init_params(TINY_CFG, tiny_lm, av, tiny_data.users(), tiny_data.items())
    b = init_params(TINY_CFG, tiny_lm, av, tiny_data.users(), tiny_data.items())
    c = init_params(replace(TINY_CFG, seed=2), tiny_lm, av, tiny_data.users(), tiny_data.items())
    assert a.params.checksum() == b.params.checksum() != c.params.checksum()


@pytest.mark.parametrize("flag, present, absent", [
    ("no_finetune", [], ["ft.w"]),
    ("discrete_prompt", ["idtok.user", "idtok.item"], []),
    ("no_joint", ["rec_tables.user", "rec_tables.item"], []),
])
def test_ablation_parameter_layout(tiny_data, tiny_lm, flag, present, absent):
    cfg = TINY_CFG.with_ablation(flag)
    m = init_params(cfg, tiny_lm, build_aspect_vocab(tiny_data), tiny_data.users(), tiny_data.items())
    names = set(m.params.names())
    assert set(present) <= names and not set(absent) & names


def test_no_joint_uses_disjoint_tables(tiny_data, tiny_lm):
    m = init_params(TINY_CFG.with_ablation("no_joint"), tiny_lm, build_aspect_vocab(tiny_data),
                    tiny_data.users(), tiny_data.items())
    assert not set(m.phase1_names()) & set(m.phase2_names())


# phase isolation --------------------------------------------------------------------


def test_phase_groups(tiny_model):
    ph1, ph2 = set(tiny_model.phase1_names()), set(tiny_model.phase2_names())
    assert ph1 & ph2 == {"tables.user", "tables.item"}
    assert {"ext.head.w", "ext.head.b"} <= ph1 - ph2
    assert all(n.startswith("rec.") for n in ph2 - ph1)


def batch_losses(m, e, idx):
    logits = m.logits(e, idx)
    aspects = m.teacher_ids(e.truth[idx])
    return extraction_loss(logits, e.truth[idx]), rec_loss(e.y[idx], m.rate(e, idx, aspects))


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_each_phase_moves_only_its_group(tiny_model, tiny_data, optimizer):
    m = tiny_model
    m.cfg = replace(m.cfg, optimizer=optimizer)
    e = m.encode(make_splits(tiny_data, m.cfg).train)
    idx = torch.arange(16)
    steppers = make_steppers(m)
    for phase, group in (("extraction", m.phase1_names()), ("recommendation", m.phase2_names())):
        before = m.params.numpy()
        l1, l2 = batch_losses(m, e, idx)
        steppers[phase](l1 if phase == "extraction" else l2)
        after = m.params.numpy()
        moved = {n for n in before if not np.array_equal(before[n], after[n])}
        assert moved and moved <= set(group)
        if phase == "recommendation":
            assert "ext.head.w" not in moved
        else:
            assert not any(n.startswith("rec.") for n in moved)


# training loop ----------------------------------------------------------------------


def histories_equal(a, b):
    def key(h):
        return [tuple("nan" if isinstance(v, float) and math.isnan(v) else v
                      for v in (r.epoch, r.ext_loss, r.rec_loss, r.val_ext_loss, r.val_rec_loss,
                                r.precision_at_3, r.recall_at_3, r.f1, r.rmse, r.mae, r.auc))
                for r in h.epochs]
    return key(a) == key(b) and a.best_epoch == b.best_epoch


def test_fit_is_deterministic(tiny_data, tiny_lm):
    a = fit(tiny_data, TINY_CFG, lm=tiny_lm)
    b = fit(tiny_data, TINY_CFG, lm=tiny_lm)
    assert histories_equal(a.history, b.history)
    assert a.model.params.checksum() == b.model.params.checksum()
    assert len(a.history) == TINY_CFG.n_epoch


def test_ablation_changes_history(tiny_data, tiny_lm):
    a = fit(tiny_data, TINY_CFG, lm=tiny_lm)
    b = fit(tiny_data, TINY_CFG.with_ablation("no_prompt"), lm=tiny_lm)
    assert not histories_equal(a.history, b.history)


@pytest.mark.parametrize("variant", ["teacher_forcing", "no_alternating", "epoch_alternation", "sgd"])
def test_training_variants_run(tiny_data, tiny_lm, variant):
    changes = {"teacher_forcing": {"teacher_forcing": True}, "no_alternating": {"no_alternating": True},
               "epoch_alternation": {"alternation": "epoch"}, "sgd": {"optimizer": "sgd", "lr": 0.01}}[variant]
    r = fit(tiny_data, replace(TINY_CFG, n_epoch=2, **changes), lm=tiny_lm)
    assert len(r.history) == 2
    assert all(math.isfinite(x) for x in r.history.column("ext_loss") + r.history.column("rec_loss"))


def test_early_stopping_restores_best(tiny_data, tiny_lm):
    cfg = replace(TINY_CFG, n_epoch=6, patience=1, lr=0.5)
    r = fit(tiny_data, cfg, lm=tiny_lm)
    h = r.history
    totals = [x.val_ext_loss + x.val_rec_loss for x in h.epochs]
    assert h.best_epoch == 1 + int(np.argmin(totals))
    assert len(h) <= h.best_epoch + cfg.patience
    ev = r.model.evaluate(r.splits.val)
    assert ev.total_loss == pytest.approx(min(totals), rel=1e-5)


def test_nan_parameter_raises_divergence(tiny_model, tiny_data):
    m = tiny_model
    with torch.no_grad():
        m.params["ext.head.b"][0] = float("nan")
    e = m.encode(make_splits(tiny_data, m.cfg).train)
    with pytest.raises(DivergenceError) as info:
        alternating_epoch(m, e, 1)
    assert info.value.phase == "extraction" and info.value.batch == 0


def test_single_record_inference(tiny_model, tiny_data):
    r = tiny_data.records[0]
    pred = tiny_model.extract(r.user_id, r.item_id, r.review)
    assert len(pred.terms) == 3 and list(pred.probs) == sorted(pred.probs, reverse=True)
    y, stars, _ = tiny_model.recommend(r.user_id, r.item_id, r.review)
    assert 0 < y < 1 and 1 < stars < 5


def test_large_table_is_standard_normal():
    p = ad.ParamStore(torch.float64)
    users = tuple(f"u{i}" for i in range(1000))
    init_tables(p, EmbeddingTables(users, ("i0",)), 10, 1, np.random.default_rng(5))
    t = p["tables.user"].detach()
    assert t.numel() == 10_000
    assert abs(float(t.mean())) < 0.05 and abs(float(t.std()) - 1) < 0.05


def test_zero_patience_runs_every_epoch(tiny_data, tiny_lm):
    r = fit(tiny_data, replace(TINY_CFG, n_epoch=4, patience=0, lr=0.5), lm=tiny_lm)
    assert [x.epoch for x in r.history.epochs] == [1, 2, 3, 4]


def test_no_attention_ignores_attention_projection(tiny_data, tiny_lm):
    m = init_params(TINY_CFG.with_ablation("no_attention"), tiny_lm, build_aspect_vocab(tiny_data),
                    tiny_data.users(), tiny_data.items())
    e = m.encode(tiny_data)
    idx = torch.arange(8)
    ids = m.teacher_ids(e.truth[idx])
    before = m.rate(e, idx, ids).detach()
    with torch.no_grad():
        m.params["rec.attn.w"].mul_(-3.0)
        m.params["rec.attn.b"].add_(1.0)
    assert torch.equal(m.rate(e, idx, ids).detach(), before)


def test_discrete_prompt_id_tokens_get_gradient(tiny_data, tiny_lm):
    m = init_params(TINY_CFG.with_ablation("discrete_prompt"), tiny_lm, build_aspect_vocab(tiny_data),
                    tiny_data.users(), tiny_data.items())
    assert {"idtok.user", "idtok.item"} <= set(m.phase1_names())
    e = m.encode(tiny_data)
    idx = torch.arange(8)
    g = ad.backward(extraction_loss(m.logits(e, idx), e.truth[idx]), m.params, m.phase1_names())
    for name, rows in (("idtok.user", e.users[idx]), ("idtok.item", e.items[idx])):
        assert float(g[name][rows].abs().sum()) > 0


def test_no_alternating_changes_trajectory(tiny_data, tiny_lm):
    a = fit(tiny_data, replace(TINY_CFG, n_epoch=1), lm=tiny_lm)
    b = fit(tiny_data, replace(TINY_CFG, n_epoch=1, no_alternating=True), lm=tiny_lm)
    assert a.model.params.checksum() != b.model.params.checksum()

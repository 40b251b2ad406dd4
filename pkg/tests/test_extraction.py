import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from promptrec import autodiff as ad
from promptrec.corpus import AspectVocabulary, Dataset, ReviewRecord
from promptrec.extraction import (EmbeddingTables, PromptMode, UnknownEntityError, build_soft_prompt,
                                  decode_topk, extraction_loss, topk_ids, truth_matrix)


def oracle_loss(logits, truth):
    total = 0.0
    for row, ids in zip(logits, truth):
        lse = math.log(sum(math.exp(v) for v in row))
        total += sum(lse - row[a] for a in ids)
    return total


def test_uniform_loss_example():
    loss = extraction_loss(torch.zeros(4, dtype=torch.float64), [0, 2])
    assert float(loss) == pytest.approx(2 * math.log(4), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), v=st.integers(3, 9), b=st.integers(1, 5))
def test_loss_matches_oracle(seed, v, b):
    g = np.random.default_rng(seed)
    logits = g.normal(size=(b, v)) * 3
    truth = [list(g.choice(v, size=int(g.integers(1, v + 1)), replace=False)) for _ in range(b)]
    got = float(extraction_loss(torch.as_tensor(logits), truth))
    assert got == pytest.approx(oracle_loss(logits, truth), rel=1e-9, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-50, 50))
def test_loss_shift_invariance(seed, c):
    g = np.random.default_rng(seed)
    logits = torch.as_tensor(g.normal(size=(3, 6)))
    truth = [[0, 1], [5], [2, 3, 4]]
    assert float(extraction_loss(logits + c, truth)) == pytest.approx(float(extraction_loss(logits, truth)),
                                                                     rel=1e-9, abs=1e-9)


def test_padded_matrix_equals_ragged_lists():
    logits = torch.randn(2, 5, dtype=torch.float64)
    ragged = [[1, 3], [4]]
    m = truth_matrix(ragged, 5)
    assert m.tolist() == [[1, 3], [4, -1]]
    assert torch.equal(extraction_loss(logits, m), extraction_loss(logits, ragged))


def test_truth_validation():
    with pytest.raises(ValueError):
        truth_matrix([[0], []], 4)
    with pytest.raises(ValueError):
        truth_matrix([[7]], 4)
    with pytest.raises(ValueError):
        extraction_loss(torch.zeros(1, 3), torch.tensor([[5]]))


def test_zero_head_gives_uniform_probabilities():
    pred = decode_topk(torch.zeros(5), k=3)
    assert pred.probs == pytest.approx((0.2, 0.2, 0.2))
    assert pred.ids == (0, 1, 2)  # ties go to the lower id


def test_decode_topk_descending_with_terms():
    av = AspectVocabulary(("pool", "bar", "wifi", "bed"))
    pred = decode_topk(torch.tensor([0.1, 2.0, -1.0, 1.5]), 3, av)
    assert pred.terms == ("bar", "bed", "pool")
    assert list(pred.probs) == sorted(pred.probs, reverse=True)
    with pytest.raises(ValueError):
        decode_topk(torch.zeros(2), 3)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.1, 10), b=st.floats(-10, 10))
def test_topk_monotone_invariance(seed, a, b):
    x = torch.as_tensor(np.random.default_rng(seed).normal(size=(4, 9)))
    for f in (lambda t: a * t + b, torch.exp, lambda t: torch.sigmoid(t) * a):
        assert torch.equal(topk_ids(f(x), 3), topk_ids(x, 3))


def test_soft_prompt_folds_and_pads():
    w_u = torch.arange(3.0).reshape(1, 3)
    w_i = torch.arange(3.0, 5.0).reshape(1, 2)
    rows = build_soft_prompt(w_u, w_i, d_model=4)
    assert rows.shape == (1, 2, 4)
    assert rows.reshape(-1).tolist() == [0, 1, 2, 3, 4, 0, 0, 0]
    assert build_soft_prompt(w_u[0], None, 3).shape == (1, 3)


def test_tables_lookup_and_unknown():
    t = EmbeddingTables(("u1", "u2"), ("i1",))
    assert t.user_row("u2") == 1
    with pytest.raises(UnknownEntityError, match="u9"):
        t.user_row("u9")
    with pytest.raises(UnknownEntityError):
        t.rows(["u1"], ["i7"])
    assert t.with_prefix("rec_tables").user_param == "rec_tables.user"


def two_records(m):
    return Dataset((ReviewRecord(m.tables.users[0], m.tables.items[0], 3.0, "w1 w2 w3", ("x",)),
                    ReviewRecord(m.tables.users[1], m.tables.items[1], 4.0, "w4 w5", ("y",))))


MODE_FLAGS = {
    PromptMode.SOFT: {},
    PromptMode.USER_ONLY: {"user_only_prompt": True},
    PromptMode.ITEM_ONLY: {"item_only_prompt": True},
    PromptMode.NONE: {"no_prompt": True},
}


@pytest.mark.parametrize("mode, reacts", [
    (PromptMode.SOFT, True), (PromptMode.USER_ONLY, True), (PromptMode.ITEM_ONLY, False), (PromptMode.NONE, False),
])
def test_prompt_mode_controls_user_dependence(tiny_model, mode, reacts):
    m = tiny_model
    m.cfg = replace(m.cfg, **MODE_FLAGS[mode])
    e = m.encode(two_records(m))
    e2 = m.encode(two_records(m))
    e2.users[0] = (e.users[0] + 1) % len(m.tables.users)
    idx = torch.arange(2)
    a, b = m.logits(e, idx).detach(), m.logits(e2, idx).detach()
    assert a.shape == (2, len(m.aspects))
    assert (not torch.allclose(a[0], b[0])) == reacts
    assert torch.equal(a[1], b[1])


def test_extraction_gradient_reaches_only_tables_and_head(tiny_model):
    m = tiny_model
    e = m.encode(two_records(m))
    loss = extraction_loss(m.logits(e, torch.arange(2)), torch.tensor([[0], [1]]))
    g = ad.backward(loss, m.params, m.params.names())
    nonzero = {n for n, t in g.items() if float(t.abs().sum()) > 0}
    assert nonzero == {"tables.user", "tables.item", "ext.head.w", "ext.head.b"}
    assert not any(m.params.is_trainable(n) for n in m.params.names("lm.") + m.params.names("ft."))

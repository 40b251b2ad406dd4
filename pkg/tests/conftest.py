import pytest
import torch

from promptrec.corpus import SyntheticSpec, build_aspect_vocab, generate_synthetic
from promptrec.training import TrainConfig, init_params, make_splits, prepare_language_model

TINY_SPEC = SyntheticSpec(n_users=8, n_items=6, n_records=160, vocab_size=30,
                          aspect_pool_size=10, review_length=6, distractors=2, seed=3)

TINY_CFG = TrainConfig(
    seed=1, n_epoch=3, batch_size=16, d_model=16, n_layers=1, n_heads=2, max_seq_len=32,
    max_review_len=16, d_u=8, d_i=8, d_a=4, rec_hidden=8,
    pretrain_epochs=1, finetune_epochs=1, lm_batch_size=32,
)

TINY_CFG_TEXT = """\
seed = 1
n_epoch = 3
batch_size = 16
d_model = 16
n_layers = 1
n_heads = 2
max_seq_len = 32
max_review_len = 16
d_u = 8
d_i = 8
d_a = 4
rec_hidden = 8
pretrain_epochs = 1
finetune_epochs = 1
"""


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY_CFG


@pytest.fixture(scope="session")
def tiny_lm(tiny_data):
    return prepare_language_model(make_splits(tiny_data, TINY_CFG).train, TINY_CFG)


@pytest.fixture
def tiny_model(tiny_data, tiny_lm):
    """A freshly initialized model on the tiny corpus (float64 for exact checks)."""
    train = make_splits(tiny_data, TINY_CFG).train
    return init_params(TINY_CFG, tiny_lm, build_aspect_vocab(train), tiny_data.users(), tiny_data.items(),
                       dtype=torch.float64)


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

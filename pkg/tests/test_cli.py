import csv

import pytest
from click.testing import CliRunner

from promptrec import cli
from promptrec.checkpoint import read_checkpoint
from promptrec.training import DivergenceError

from conftest import TINY_CFG_TEXT

GEN = ["gen-data", "--users", "8", "--items", "6", "--records", "160", "--vocab-size", "30",
       "--aspect-pool", "10", "--review-length", "6", "--seed", "3"]


def run(*args):
    return CliRunner().invoke(cli.main, [str(a) for a in args])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(*GEN, "--out", d / "data.jsonl").exit_code == 0
    (d / "tiny.cfg").write_text(TINY_CFG_TEXT)
    r = run("train", "--config", d / "tiny.cfg", "--data", d / "data.jsonl", "--out", d / "m.ckpt")
    assert r.exit_code == 0, r.output
    return d


def test_gen_data_is_deterministic(tmp_path):
    a = run(*GEN, "--out", tmp_path / "a.jsonl")
    b = run(*GEN, "--out", tmp_path / "b.jsonl")
    assert a.exit_code == b.exit_code == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 160
    assert "160" in a.output


def test_zero_records_is_usage_error(tmp_path):
    assert run(*GEN[:5], "--records", "0", "--out", tmp_path / "x.jsonl").exit_code == 2


def test_stats_and_bad_data(workdir, tmp_path):
    assert run("stats", workdir / "data.jsonl").exit_code == 0
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"user_id": "u"}\n')
    r = run("stats", bad)
    assert r.exit_code == 3 and "error" in r.output


def test_train_writes_history(workdir):
    with open(f"{workdir / 'm.ckpt'}.history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and rows[0]["epoch"] == "1"
    manifest, _ = read_checkpoint(workdir / "m.ckpt")
    assert manifest["extra"]["best_epoch"] in (1, 2, 3)


def test_eval_is_repeatable_and_matches_training(workdir):
    a = run("eval", "--checkpoint", workdir / "m.ckpt", "--data", workdir / "data.jsonl")
    b = run("eval", "--checkpoint", workdir / "m.ckpt", "--data", workdir / "data.jsonl")
    assert a.exit_code == 0 and a.output == b.output
    assert a.output.splitlines()[0] == ",".join(cli.EVAL_COLUMNS)
    manifest, _ = read_checkpoint(workdir / "m.ckpt")
    assert a.output == cli.eval_csv_text("test", manifest["extra"]["test_metrics"])


def test_extract_and_recommend(workdir):
    args = ["--checkpoint", workdir / "m.ckpt", "--user", "u0", "--item", "i0", "--review", "room price staff"]
    r = run("extract", *args)
    assert r.exit_code == 0
    probs = [float(line.split("\t")[1]) for line in r.output.splitlines()]
    assert len(probs) == 3 and probs == sorted(probs, reverse=True)
    r = run("recommend", *args)
    assert r.exit_code == 0
    values = dict(line.split("\t") for line in r.output.splitlines())
    assert 0 < float(values["normalized"]) < 1 and 1 < float(values["rating"]) < 5


def test_unknown_user_is_data_error(workdir):
    r = run("extract", "--checkpoint", workdir / "m.ckpt", "--user", "nobody", "--item", "i0", "--review", "x")
    assert r.exit_code == 3 and "nobody" in r.output


def test_bad_config_is_usage_error(workdir, tmp_path):
    (tmp_path / "bad.cfg").write_text("colour = blue\n")
    r = run("train", "--config", tmp_path / "bad.cfg", "--data", workdir / "data.jsonl", "--out", tmp_path / "m")
    assert r.exit_code == 2


def test_divergence_exit_code(workdir, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise DivergenceError("recommendation", 1, 0, float("nan"))
    monkeypatch.setattr(cli, "fit", boom)
    r = run("train", "--config", workdir / "tiny.cfg", "--data", workdir / "data.jsonl", "--out", tmp_path / "m")
    assert r.exit_code == 4 and "recommendation" in r.output


def test_ablation_flag_changes_history(workdir, tmp_path):
    r = run("train", "--config", workdir / "tiny.cfg", "--data", workdir / "data.jsonl",
            "--out", tmp_path / "np.ckpt", "--ablation", "no_prompt")
    assert r.exit_code == 0
    base = open(f"{workdir / 'm.ckpt'}.history.csv").read()
    assert open(f"{tmp_path / 'np.ckpt'}.history.csv").read() != base


def test_ablate_command(workdir, tmp_path):
    r = run("ablate", "--config", workdir / "tiny.cfg", "--data", workdir / "data.jsonl", "--seeds", "1,2",
            "--variants", "full,no_prompt", "--out", tmp_path / "r.csv", "--table", tmp_path / "t.txt")
    assert r.exit_code == 0, r.output
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert {row["variant"] for row in rows} == {"full", "no_prompt"}
    assert "(Improvement)" in (tmp_path / "t.txt").read_text()


def test_bench_contract(workdir, tmp_path):
    r = run("bench-scalability", "--config", workdir / "tiny.cfg", "--data", workdir / "data.jsonl",
            "--sizes", "40,80,160", "--epochs", "1", "--out", tmp_path / "b.csv")
    assert r.exit_code == 0, r.output
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert [int(x["records"]) for x in rows] == [40, 80, 160]
    assert "R^2" in r.output
    assert run("bench-scalability", "--sizes", "100,50").exit_code == 2


def test_linear_fit():
    slope, intercept, r2 = cli.linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert slope == pytest.approx(2) and intercept == pytest.approx(1) and r2 == pytest.approx(1)

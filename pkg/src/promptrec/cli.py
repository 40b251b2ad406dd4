"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import rng as rng_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import DatasetError, SyntheticSpec, dataset_stats, generate_synthetic, load_dataset, save_dataset
from .extraction import UnknownEntityError
from .metrics import aggregate_runs, format_table, metrics_dict, write_report_csv
from .training import (ABLATIONS, HISTORY_COLUMNS, ConfigError, DivergenceError, TrainConfig, fit,
                       load_config, make_splits, prepare_language_model)

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4

EVAL_COLUMNS = ("split", "precision_at_3", "recall_at_3", "f1", "rmse", "mae", "auc")
BENCH_COLUMNS = ("records", "seconds")


def _guard(fn):
    """Map library errors onto the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            raise click.UsageError(str(exc)) from None
        except DivergenceError as exc:
            click.echo(f"error: training diverged: {exc}", err=True)
            sys.exit(EXIT_DIVERGENCE)
        except (DatasetError, CheckpointError, UnknownEntityError, FileNotFoundError, IsADirectoryError,
                PermissionError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DATA)
    return wrapper


def _config(path: str | None, seed: int | None, ablations: tuple[str, ...]) -> TrainConfig:
    cfg = load_config(path) if path else TrainConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg.with_ablation(*ablations) if ablations else cfg


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for rec in history.epochs:
            w.writerow([getattr(rec, c) for c in HISTORY_COLUMNS])


def eval_csv_text(split: str, row: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    w.writerow([split] + [f"{row[c]:.10f}" for c in EVAL_COLUMNS[1:]])
    return buf.getvalue()


ablation_option = click.option("--ablation", "ablations", multiple=True, type=click.Choice(ABLATIONS),
                               help="Ablation flag to switch on (repeatable).")


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (-v info, -vv debug).")
def main(verbose: int) -> None:
    """Joint aspect extraction and rating prediction with soft prompts."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(message)s")


@main.command("gen-data")
@click.option("--users", type=click.IntRange(min=1), default=SyntheticSpec.n_users, show_default=True)
@click.option("--items", type=click.IntRange(min=1), default=SyntheticSpec.n_items, show_default=True)
@click.option("--records", type=click.IntRange(min=1), default=SyntheticSpec.n_records, show_default=True)
@click.option("--vocab-size", type=click.IntRange(min=1), default=SyntheticSpec.vocab_size, show_default=True)
@click.option("--aspect-pool", type=click.IntRange(min=1), default=SyntheticSpec.aspect_pool_size,
              show_default=True)
@click.option("--aspects-per-review", type=click.IntRange(min=1), default=SyntheticSpec.aspects_per_review,
              show_default=True)
@click.option("--review-length", type=click.IntRange(min=1), default=SyntheticSpec.review_length,
              show_default=True)
@click.option("--noise", type=click.FloatRange(min=0), default=SyntheticSpec.rating_noise_std, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True)
@_guard
def gen_data(users, items, records, vocab_size, aspect_pool, aspects_per_review, review_length, noise, seed, out):
    """Write a synthetic corpus with planted aspects and print its statistics."""
    try:
        spec = SyntheticSpec(n_users=users, n_items=items, n_records=records, vocab_size=vocab_size,
                             aspect_pool_size=aspect_pool, aspects_per_review=aspects_per_review,
                             review_length=review_length, rating_noise_std=noise, seed=seed,
                             distractors=min(SyntheticSpec.distractors, aspect_pool - aspects_per_review))
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    d = generate_synthetic(spec)
    save_dataset(d, out)
    click.echo(str(dataset_stats(d)))


@main.command()
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@_guard
def stats(data):
    """Print user, item and record counts with sparsity."""
    click.echo(str(dataset_stats(load_dataset(data))))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Checkpoint path.")
@click.option("--history", type=click.Path(dir_okay=False), help="Per-epoch CSV (default: <out>.history.csv).")
@click.option("--seed", type=int, help="Override the config seed.")
@ablation_option
@_guard
def train(config_path, data, out, history, seed, ablations):
    """Pretrain and fine-tune the language model, then run alternating training."""
    cfg = _config(config_path, seed, ablations)
    d = load_dataset(data)
    result = fit(d, cfg, on_epoch=lambda r: click.echo(
        f"epoch {r.epoch:3d}  ext {r.ext_loss:.4f}  rec {r.rec_loss:.5f}  "
        f"val F1 {r.f1:.4f}  RMSE {r.rmse:.4f}", err=True))
    test = result.test_eval()
    save_checkpoint(result.model, out, extra={
        "data_sha256": _file_digest(data),
        "best_epoch": result.history.best_epoch,
        "test_metrics": test.row(),
    })
    write_history_csv(history or f"{out}.history.csv", result.history)
    row = test.row()
    click.echo(f"best epoch {result.history.best_epoch}; test " +
               "  ".join(f"{k} {v:.4f}" for k, v in row.items()))


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), help="CSV path (default: stdout).")
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]), default="test", show_default=True)
@_guard
def eval_cmd(checkpoint, data, out, split):
    """Extraction and rating metrics of a checkpoint on one split of the data."""
    model, _ = load_checkpoint(checkpoint)
    d = load_dataset(data)
    part = d if split == "all" else getattr(make_splits(d, model.cfg), split)
    row = model.evaluate(part).row()
    text = eval_csv_text(split, row)
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


def _single_record_options(fn):
    for opt in reversed((
        click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True),
        click.option("--user", required=True),
        click.option("--item", required=True),
        click.option("--review", required=True),
    )):
        fn = opt(fn)
    return fn


@main.command()
@_single_record_options
@_guard
def extract(checkpoint, user, item, review):
    """Top-K aspect terms with probabilities for one review."""
    model, _ = load_checkpoint(checkpoint)
    pred = model.extract(user, item, review)
    for term, prob in zip(pred.terms, pred.probs):
        click.echo(f"{term}\t{prob:.6f}")


@main.command()
@_single_record_options
@_guard
def recommend(checkpoint, user, item, review):
    """Predicted rating for one (user, item, review)."""
    model, _ = load_checkpoint(checkpoint)
    y, rating, pred = model.recommend(user, item, review)
    click.echo(f"normalized\t{y:.6f}")
    click.echo(f"rating\t{rating:.4f}")
    click.echo(f"aspects\t{', '.join(pred.terms)}")


def run_ablation(d, base: TrainConfig, seeds, variants, on_run=None) -> dict:
    """Train every variant for every seed; returns {variant: [metric dict per seed]}.

    Variants that keep the fine-tuning layer share one language model per seed."""
    runs = {v: [] for v in variants}
    for seed in seeds:
        cfg = replace(base, seed=seed)
        lm = None
        for v in variants:
            vcfg = cfg if v == "full" else cfg.with_ablation(v)
            if vcfg.no_finetune:
                res = fit(d, vcfg)
            else:
                if lm is None:
                    lm = prepare_language_model(make_splits(d, cfg).train, cfg)
                res = fit(d, vcfg, lm=lm)
            ev = res.test_eval()
            metrics = metrics_dict(ev.extraction, ev.rec)
            runs[v].append(metrics)
            if on_run is not None:
                on_run(seed, v, metrics, res)
    return runs


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--seeds", default="1,2,3,4,5", show_default=True, help="Comma-separated seeds.")
@click.option("--variants", default="full,no_joint,no_prompt", show_default=True,
              help="Comma-separated: 'full' and/or ablation names.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Report CSV path.")
@click.option("--table", type=click.Path(dir_okay=False), help="Plain-text table path (default: stdout).")
@_guard
def ablate(config_path, data, seeds, variants, out, table):
    """Seed-averaged comparison of the full model against ablations."""
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError:
        raise click.UsageError(f"--seeds must be comma-separated integers, got {seeds!r}") from None
    names = [v.strip() for v in variants.split(",") if v.strip()]
    unknown = [v for v in names if v != "full" and v not in ABLATIONS]
    if unknown:
        raise click.UsageError(f"unknown variants: {', '.join(unknown)}")
    if len(seed_list) < 2:
        raise click.UsageError("need at least 2 seeds to report a standard deviation")
    cfg = _config(config_path, None, ())
    d = load_dataset(data)
    runs = run_ablation(d, cfg, seed_list, names, on_run=lambda s, v, m, _: click.echo(
        f"seed {s} {v}: " + "  ".join(f"{k} {x:.4f}" for k, x in m.items()), err=True))
    aggs = {v: aggregate_runs(r) for v, r in runs.items()}
    write_report_csv(out, Path(data).stem, aggs)
    text = format_table(aggs, list(runs[names[0]][0]), reference="full" if "full" in aggs else None)
    if table:
        Path(table).write_text(text + "\n")
    else:
        click.echo(text)


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def bench_scalability(d, sizes, cfg: TrainConfig, epochs: int = 10) -> list[tuple[int, float]]:
    """Wall-clock seconds of ``epochs`` training epochs on random subsets of ``d``.

    The language model is prepared once, outside the timed region."""
    if list(sizes) != sorted(set(sizes)):
        raise ValueError("sizes must be strictly increasing")
    if sizes[-1] > len(d):
        raise ValueError(f"largest size {sizes[-1]} exceeds the {len(d)} available records")
    cfg = replace(cfg, n_epoch=epochs, patience=0)
    order = rng_mod.stream(cfg.seed, rng_mod.SHUFFLE, 0, len(d)).permutation(len(d))
    lm = prepare_language_model(make_splits(d.subset(order[:sizes[0]]), cfg).train, cfg,
                                with_finetune=not cfg.no_finetune)
    rows = []
    for n in sizes:
        sub = d.subset(sorted(order[:n].tolist()))
        t0 = time.perf_counter()
        fit(sub, cfg, lm=lm)
        rows.append((n, time.perf_counter() - t0))
    return rows


@main.command("bench-scalability")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", type=click.Path(exists=True, dir_okay=False),
              help="Corpus to subsample (default: synthetic, sized to the largest request).")
@click.option("--sizes", default="1000,2000,4000,8000,16000", show_default=True)
@click.option("--epochs", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="CSV of (records, seconds).")
@_guard
def bench_scalability_cmd(config_path, data, sizes, epochs, seed, out):
    """Training time against record count, with a least-squares line."""
    try:
        size_list = [int(s) for s in sizes.split(",") if s.strip()]
    except ValueError:
        raise click.UsageError(f"--sizes must be comma-separated integers, got {sizes!r}") from None
    if len(size_list) < 2 or size_list != sorted(set(size_list)) or size_list[0] < 10:
        raise click.UsageError("--sizes needs at least two strictly increasing values >= 10")
    cfg = _config(config_path, seed, ())
    d = load_dataset(data) if data else generate_synthetic(SyntheticSpec(n_records=size_list[-1], seed=seed))
    try:
        rows = bench_scalability(d, size_list, cfg, epochs)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    slope, intercept, r2 = linear_fit(*zip(*rows))
    if out:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(BENCH_COLUMNS)
            w.writerows((n, f"{s:.4f}") for n, s in rows)
    for n, s in rows:
        click.echo(f"{n:8d} records  {s:9.3f} s")
    click.echo(f"slope {slope:.6g} s/record  intercept {intercept:.4g} s  R^2 {r2:.4f}")


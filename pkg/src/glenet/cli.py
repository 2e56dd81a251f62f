"""Command-line surface for the full pipeline.

``glenet synth`` generates a corpus, ``glenet train`` fits the label
uncertainty model, ``glenet uncertainty`` runs the k-fold produce-on-
held-out loop, ``glenet eval-nll`` scores checkpoints, ``glenet probdet``
trains the loss-mode comparison regressor, ``glenet vote`` merges
detection dumps, and ``glenet report`` collects a run's tables and charts.

Every command is a pure function of (config, input files, seed): rerunning
one with identical inputs rewrites byte-identical outputs.  Timestamps
appear only in the sidecar log enabled by the ``GLENET_LOG`` environment
variable.  Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric fault.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import sys
from typing import Optional

import click
import numpy as np

import glenet
from .config import RunConfig, config_from_text, dump_config, load_config
from .dataio import (
    load_dataset,
    load_detections,
    save_boxes,
    save_dataset,
    atomic_write_text,
)
from .errors import ConfigError, DataError, NumericFault
from .model import (
    DEFAULT_ANCHOR,
    GLENetModel,
    TrainConfig,
    encoded_target,
    eval_nll,
    kfold_uncertainty,
    preprocess,
    train,
)
from .postproc import VotingConfig, variance_voting_scored
from .probdet import ToyConfig, train_toy_regressor
from .report import build_report, write_csv
from .rng import stream
from .synth import generate_scene_objects

_LOG = logging.getLogger("glenet")


def _setup_logging(out_dir: Optional[str]) -> None:
    level_name = os.environ.get("GLENET_LOG", "").strip().upper()
    if not level_name or out_dir is None:
        return
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        raise ConfigError(f"GLENET_LOG={level_name!r} is not a logging level")
    os.makedirs(out_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(out_dir, "glenet.log"), encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    _LOG.addHandler(handler)
    _LOG.setLevel(level)


def _load(config_path: Optional[str], seed: Optional[int]) -> RunConfig:
    cfg = load_config(config_path) if config_path else RunConfig()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


_config_option = click.option("--config", "config_path", type=click.Path(), default=None,
                              help="YAML run configuration (defaults apply when omitted).")
_seed_option = click.option("--seed", type=int, default=None,
                            help="Override the configured global seed.")
_out_option = click.option("--out", "out_dir", type=click.Path(), required=True,
                           help="Directory that receives this command's outputs.")


@click.group(name="glenet")
@click.version_option(version=glenet.__version__, prog_name="glenet")
def cli() -> None:
    """Label-uncertainty estimation pipeline for 3D box annotations."""


@cli.group(name="config")
def config_group() -> None:
    """Inspect and validate run configurations."""


@config_group.command(name="dump")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the document here instead of stdout.")
def config_dump(out_path: Optional[str]) -> None:
    """Print the full default configuration, every field explicit."""
    text = dump_config(RunConfig())
    if out_path is None:
        click.echo(text, nl=False)
    else:
        atomic_write_text(out_path, text)
        click.echo(f"wrote {out_path}")


@config_group.command(name="check")
@click.option("--config", "config_path", type=click.Path(), required=True)
def config_check(config_path: str) -> None:
    """Validate a configuration file (strict keys and value domains)."""
    load_config(config_path)
    click.echo(f"{config_path}: ok")


@cli.command(name="synth")
@_config_option
@_seed_option
@_out_option
def cmd_synth(config_path: Optional[str], seed: Optional[int], out_dir: str) -> None:
    """Generate a synthetic corpus into OUT/dataset.jsonl."""
    cfg = _load(config_path, seed)
    _setup_logging(out_dir)
    objects = generate_scene_objects(cfg.synth, stream(cfg.seed, 10))
    path = os.path.join(out_dir, "dataset.jsonl")
    save_dataset(path, objects)
    _LOG.info("synth: %d objects -> %s", len(objects), path)
    click.echo(f"wrote {path} ({len(objects)} objects)")


def _train_config(cfg: RunConfig, latent_dim: Optional[int], samples: Optional[int],
                  folds: Optional[int]) -> TrainConfig:
    overrides = {}
    if latent_dim is not None:
        overrides["latent_dim"] = latent_dim
    if samples is not None:
        overrides["samples"] = samples
    if folds is not None:
        overrides["folds"] = folds
    try:
        return dataclasses.replace(cfg.train, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@cli.command(name="train")
@_config_option
@_seed_option
@click.option("--dataset", "dataset_path", type=click.Path(), required=True)
@click.option("--latent-dim", type=int, default=None)
@_out_option
def cmd_train(config_path: Optional[str], seed: Optional[int], dataset_path: str,
              latent_dim: Optional[int], out_dir: str) -> None:
    """Train the uncertainty model; emit checkpoints and a loss table."""
    cfg = _load(config_path, seed)
    _setup_logging(out_dir)
    tc = _train_config(cfg, latent_dim, None, None)
    samples, _ = load_dataset(dataset_path)
    model = GLENetModel(anchor=DEFAULT_ANCHOR, latent_dim=tc.latent_dim,
                        rng=stream(cfg.seed, 600))
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    history = train(model, samples, tc, rng=stream(cfg.seed, 700), checkpoint_dir=ckpt_dir)
    final = os.path.join(out_dir, "model.ckpt")
    model.save(final, extra_meta={"epoch": tc.epochs})
    loss_csv = os.path.join(out_dir, "train_loss.csv")
    write_csv(loss_csv, ["epoch", "l_rec", "l_kl", "lr"],
              [[h["epoch"], h["l_rec"], h["l_kl"], h["lr"]] for h in history])
    _LOG.info("train: %d epochs on %d objects -> %s", tc.epochs, len(samples), final)
    click.echo(f"wrote {final}")
    click.echo(f"wrote {loss_csv}")


@cli.command(name="uncertainty")
@_config_option
@_seed_option
@click.option("--dataset", "dataset_path", type=click.Path(), required=True)
@click.option("--latent-dim", type=int, default=None)
@click.option("--samples", type=int, default=None)
@click.option("--folds", type=int, default=None)
@_out_option
def cmd_uncertainty(config_path: Optional[str], seed: Optional[int], dataset_path: str,
                    latent_dim: Optional[int], samples: Optional[int],
                    folds: Optional[int], out_dir: str) -> None:
    """K-fold uncertainty: annotate every record via a model that never saw it."""
    cfg = _load(config_path, seed)
    _setup_logging(out_dir)
    tc = _train_config(cfg, latent_dim, samples, folds)
    objects, _ = load_dataset(dataset_path)
    uncertainties, _ = kfold_uncertainty(objects, tc, anchor=DEFAULT_ANCHOR)
    path = os.path.join(out_dir, "dataset_with_uncertainty.jsonl")
    save_dataset(path, objects, uncertainties)
    _LOG.info("uncertainty: %d objects, %d folds -> %s", len(objects), tc.folds, path)
    click.echo(f"wrote {path} ({len(objects)} records)")


@cli.command(name="eval-nll")
@_config_option
@_seed_option
@click.option("--dataset", "dataset_path", type=click.Path(), required=True)
@click.option("--checkpoint", "checkpoints", type=click.Path(), required=True,
              multiple=True, help="Checkpoint file; repeat to score several.")
@click.option("--samples", type=int, default=None)
@_out_option
def cmd_eval_nll(config_path: Optional[str], seed: Optional[int], dataset_path: str,
                 checkpoints: tuple[str, ...], samples: Optional[int], out_dir: str) -> None:
    """Mean negative log-likelihood of each checkpoint on a labeled dataset."""
    cfg = _load(config_path, seed)
    _setup_logging(out_dir)
    tc = _train_config(cfg, None, samples, None)
    objects, _ = load_dataset(dataset_path)
    rows = []
    for ckpt in checkpoints:
        model = GLENetModel.load(ckpt)
        clouds, targets = [], []
        for i, s in enumerate(objects):
            cloud, centroid = preprocess(s.points, stream(cfg.seed, 800, i))
            offsets, _, _ = encoded_target(s.box, model.anchor, centroid)
            clouds.append(cloud)
            targets.append(offsets)
        value, flagged = eval_nll(model, clouds, targets, tc.samples, stream(cfg.seed, 801))
        _, meta = _checkpoint_meta(ckpt)
        rows.append([int(meta.get("epoch", -1)), os.path.basename(ckpt),
                     tc.samples, len(objects), value, flagged])
        click.echo(f"{os.path.basename(ckpt)}: nll={value:.6f} flagged={flagged}")
    rows.sort(key=lambda r: (r[0], r[1]))
    path = os.path.join(out_dir, "nll.csv")
    write_csv(path, ["epoch", "checkpoint", "samples", "n_objects", "nll", "flagged"], rows)
    _LOG.info("eval-nll: %d checkpoint(s) -> %s", len(checkpoints), path)
    click.echo(f"wrote {path}")


def _checkpoint_meta(path: str):
    from .nn import load_checkpoint

    return load_checkpoint(path)


@cli.command(name="probdet")
@_config_option
@_seed_option
@click.option("--dataset", "dataset_path", type=click.Path(), required=True,
              help="Dataset annotated with uncertainties (required in glenet mode).")
@click.option("--mode", type=click.Choice(["dirac", "glenet", "huber"]), required=True)
@_out_option
def cmd_probdet(config_path: Optional[str], seed: Optional[int], dataset_path: str,
                mode: str, out_dir: str) -> None:
    """Train the loss-mode comparison regressor; emit localization metrics."""
    cfg = _load(config_path, seed)
    _setup_logging(out_dir)
    objects, uncertainties = load_dataset(dataset_path)
    toy = ToyConfig(mode=mode, seed=cfg.seed, epochs=cfg.toy.epochs,
                    batch_size=cfg.toy.batch_size, peak_lr=cfg.toy.peak_lr,
                    dir_weight=cfg.toy.dir_weight, eval_folds=cfg.toy.eval_folds)
    if mode == "glenet" and uncertainties is None:
        raise ConfigError(
            f"{dataset_path} carries no uncertainties; run `glenet uncertainty` first")
    _, metrics = train_toy_regressor(objects, toy, uncertainties=uncertainties)
    metrics_csv = os.path.join(out_dir, "probdet_metrics.csv")
    collapse = "" if metrics.collapse_fraction is None else metrics.collapse_fraction
    write_csv(metrics_csv,
              ["mode", "seed", "n_eval", "mean_iou", "mean_iou_ambiguous",
               "collapse_fraction"],
              [[mode, cfg.seed, metrics.n_eval, metrics.mean_iou,
                metrics.mean_iou_ambiguous, collapse]])
    history_csv = os.path.join(out_dir, "probdet_history.csv")
    write_csv(history_csv, ["epoch", "loss", "lr"],
              [[h["epoch"], h["loss"], h["lr"]] for h in metrics.history])
    _LOG.info("probdet: mode=%s mean_iou=%.4f -> %s", mode, metrics.mean_iou, metrics_csv)
    click.echo(f"mode={mode} mean_iou={metrics.mean_iou:.6f}")
    click.echo(f"wrote {metrics_csv}")
    click.echo(f"wrote {history_csv}")


@cli.command(name="vote")
@_config_option
@_seed_option
@click.option("--detections", "detections_path", type=click.Path(), required=True)
@click.option("--sigma-t", type=float, default=None)
@click.option("--mu", type=float, default=None)
@_out_option
def cmd_vote(config_path: Optional[str], seed: Optional[int], detections_path: str,
             sigma_t: Optional[float], mu: Optional[float], out_dir: str) -> None:
    """Merge a detection dump by variance voting."""
    cfg = _load(config_path, seed)
    _setup_logging(out_dir)
    overrides = {}
    if sigma_t is not None:
        overrides["sigma_t"] = sigma_t
    if mu is not None:
        overrides["mu"] = mu
    try:
        voting = dataclasses.replace(cfg.voting, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    dets = load_detections(detections_path)
    merged = variance_voting_scored(dets, voting)
    path = os.path.join(out_dir, "merged_boxes.jsonl")
    save_boxes(path, merged)
    _LOG.info("vote: %d detections -> %d boxes -> %s", len(dets), len(merged), path)
    click.echo(f"wrote {path} ({len(dets)} detections -> {len(merged)} boxes)")


@cli.command(name="report")
@click.option("--run", "run_dir", type=click.Path(), required=True,
              help="Directory holding the tables earlier commands wrote.")
@_out_option
def cmd_report(run_dir: str, out_dir: str) -> None:
    """Collect a run's tables into one report directory with charts."""
    _setup_logging(out_dir)
    emitted = build_report(run_dir, out_dir)
    _LOG.info("report: %s -> %s (%d files)", run_dir, out_dir, len(emitted))
    for name in emitted:
        click.echo(f"wrote {os.path.join(out_dir, name)}")


def main(argv: Optional[list[str]] = None) -> int:
    """Entry point with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 2
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 3
    except (NumericFault, FloatingPointError) as exc:
        click.echo(f"numeric fault: {exc}", err=True)
        return 4
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.Abort:
        return 130


if __name__ == "__main__":
    sys.exit(main())

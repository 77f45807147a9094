"""Command-line entry point tying the library into reproducible experiments.

Every command echoes the fully resolved config (plus its hash) into the
output directory, so any artifact can be traced back to the exact settings
that produced it. All commands are deterministic given (config, seed).
"""
from __future__ import annotations

import dataclasses
import json
import os

import click
import numpy as np

from . import data as data_lib
from . import evalkit, figures, profiler
from .config import ConfigError, ExperimentConfig
from .pretrain import simulate_pretraining
from .train import (build_detector, make_samples, predict_dataset, read_loss_csv,
                    read_predictions_csv, train_detector, write_predictions_csv)
from .weights import WeightStore, save_weights, transfer_depth


def _load_config(path):
    if path is None:
        return ExperimentConfig()
    try:
        return ExperimentConfig.from_json(path)
    except ConfigError as e:
        raise click.ClickException(str(e))


def _echo_config(config: ExperimentConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        f.write(config.echo_json() + "\n")
    return config.digest()


@click.group()
def main():
    """Pseudo-3D FPN lesion-detection experiments."""


@main.command("synth-gen")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Experiment config JSON (defaults used when omitted).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def synth_gen(config_path, out_dir):
    """Generate the synthetic volumetric dataset plus its GT CSV."""
    config = _load_config(config_path)
    digest = _echo_config(config, out_dir)
    dataset = data_lib.generate_synthetic(config.data)
    data_lib.save_dataset(dataset, out_dir)
    data_lib.export_gt_csv(dataset, os.path.join(out_dir, "gt.csv"))
    stats = data_lib.separability_stats(dataset)
    manifest = {"config_hash": digest, "seed": config.data.seed,
                "num_volumes": len(dataset),
                "num_boxes": sum(len(b) for sv in dataset
                                 for b in sv.boxes_by_slice.values()),
                "separability": stats}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    click.echo(f"wrote {len(dataset)} volumes to {out_dir} (config {digest})")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--init", "init_path", type=click.Path(exists=True), default=None,
              help="Weight store for initialization (depth transfer applied).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def train(config_path, data_dir, init_path, out_dir):
    """Train a detector on a generated dataset."""
    config = _load_config(config_path)
    digest = _echo_config(config, out_dir)
    dataset = data_lib.load_dataset(data_dir)
    samples = make_samples(dataset, config.backbone.input_slices)
    model = build_detector(config.backbone, seed=config.train.seed)
    if init_path is not None:
        store = WeightStore.load(init_path)
        report = transfer_depth(store, model, strict=True)
        click.echo(f"initialized {len(report['matched'])} parameters from {init_path}")
    meta = {"pooling_policy": config.backbone.pooling_policy,
            "training_slices": config.backbone.input_slices,
            "config_hash": digest}
    best = {"loss": np.inf}

    def snapshot(epoch, mean_loss):
        if mean_loss < best["loss"]:
            best["loss"] = mean_loss
            best["entries"] = {n: p.data.copy() for n, p in model.named_parameters()}
            best["epoch"] = epoch

    if config.train.epochs > 0:
        train_detector(model, samples, config.train,
                       loss_csv_path=os.path.join(out_dir, "loss.csv"),
                       epoch_callback=snapshot)
    else:
        with open(os.path.join(out_dir, "loss.csv"), "w") as f:
            f.write("step,loss_cls,loss_reg,loss_total\n")
    save_weights(model, os.path.join(out_dir, "final.mp3dw"), metadata=meta)
    if "entries" in best:
        WeightStore({n: a.astype("<f4") for n, a in best["entries"].items()},
                    dict(meta, best_epoch=best["epoch"])).save(
            os.path.join(out_dir, "best.mp3dw"))
    else:
        save_weights(model, os.path.join(out_dir, "best.mp3dw"), metadata=meta)
    click.echo(f"trained {config.train.epochs} epochs on {len(samples)} samples "
               f"(config {digest})")


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--weights", "weights_path", type=click.Path(exists=True), default=None)
@click.option("--predictions", "predictions_path", type=click.Path(exists=True), default=None,
              help="Skip inference and score this prediction CSV instead.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def eval_cmd(config_path, data_dir, weights_path, predictions_path, out_dir):
    """Evaluate a trained model (or a prediction CSV) against a dataset."""
    if (weights_path is None) == (predictions_path is None):
        raise click.ClickException("provide exactly one of --weights / --predictions")
    config = _load_config(config_path)
    digest = _echo_config(config, out_dir)
    dataset = data_lib.load_dataset(data_dir)
    samples = make_samples(dataset, config.backbone.input_slices)
    gts = {sid: [tuple(b) for b in s.gt_boxes] for sid, s in samples}
    if predictions_path is not None:
        preds = read_predictions_csv(predictions_path)
    else:
        model = build_detector(config.backbone, seed=config.train.seed)
        store = WeightStore.load(weights_path)
        transfer_depth(store, model, strict=True)
        preds, gts = predict_dataset(model, samples,
                                     score_thresh=config.eval.score_thresh)
    write_predictions_csv(preds, os.path.join(out_dir, "predictions.csv"))
    match = evalkit.match_detections(preds, gts, iou_thresh=config.eval.iou_thresh)
    report = evalkit.evaluate(preds, gts, iou_thresh=config.eval.iou_thresh,
                              fp_rates=config.eval.fp_rates)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        f.write(report.to_json() + "\n")
    with open(os.path.join(out_dir, "summary.csv"), "w") as f:
        f.write(report.summary_csv())
    figures.save_eval_figure(match, os.path.join(out_dir, "curves.png"),
                             fp_rates=config.eval.fp_rates)
    click.echo(report.summary_csv().strip())
    click.echo(f"report written to {out_dir} (config {digest})")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--slices", "slices_opt", default=None,
              help="Comma-separated slice counts overriding the config.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def profile(config_path, slices_opt, out_dir):
    """Closed-form parameter/FLOP table per variant and slice count."""
    config = _load_config(config_path)
    digest = _echo_config(config, out_dir)
    slice_counts = tuple(int(s) for s in slices_opt.split(",")) if slices_opt \
        else config.profile.slice_counts
    size = config.profile.image_size
    table = profiler.report_table(config.profile.variants, slice_counts,
                                  image_hw=(size, size),
                                  flops_per_mac=config.profile.flops_per_mac)
    with open(os.path.join(out_dir, "costs.csv"), "w") as f:
        f.write(table)
    rows = []
    for line in table.strip().splitlines()[1:]:
        variant, s, params, flops, gflops = line.split(",")
        rows.append((variant, int(s), int(params), int(flops), float(gflops)))
    figures.save_profile_figure(rows, os.path.join(out_dir, "costs.png"))
    click.echo(table.strip())
    click.echo(f"cost table written to {out_dir} (config {digest})")


@main.command("pretrain-sim")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def pretrain_sim(config_path, out_dir):
    """Simulate 2D-image pre-training; emits a 3-slice weight store."""
    config = _load_config(config_path)
    digest = _echo_config(config, out_dir)
    settings = dataclasses.replace(config.backbone, input_slices=3)
    store = simulate_pretraining(settings, config.pretrain, config.train,
                                 loss_csv_path=os.path.join(out_dir, "loss.csv"))
    store.metadata["config_hash"] = digest
    store.save(os.path.join(out_dir, "pretrained.mp3dw"))
    click.echo(f"pretrained store written to {out_dir} (config {digest})")


@main.command()
@click.option("--runs", required=True,
              help="Comma-separated training run directories (from cmd train).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def compare(runs, out_dir):
    """Merge the loss curves of several runs into one CSV plus a figure."""
    run_dirs = [r for r in runs.split(",") if r]
    if len(run_dirs) < 2:
        raise click.ClickException("--runs needs at least two directories")
    histories = {}
    for d in run_dirs:
        path = os.path.join(d, "loss.csv")
        if not os.path.exists(path):
            raise click.ClickException(f"no loss.csv in run directory {d}")
        histories[os.path.basename(os.path.normpath(d))] = read_loss_csv(path)
    lengths = {label: len(rows) for label, rows in histories.items()}
    if len(set(lengths.values())) != 1:
        raise click.ClickException(f"runs have mismatched step counts: {lengths}")
    os.makedirs(out_dir, exist_ok=True)
    labels = sorted(histories)
    with open(os.path.join(out_dir, "curves.csv"), "w") as f:
        f.write("step," + ",".join(f"loss_total_{l}" for l in labels) + "\n")
        for i in range(next(iter(lengths.values()))):
            step = histories[labels[0]][i][0]
            f.write(str(step) + ","
                    + ",".join(f"{histories[l][i][3]:.6f}" for l in labels) + "\n")
    figures.save_loss_figure(histories, os.path.join(out_dir, "curves.png"))
    click.echo(f"merged {len(labels)} runs into {out_dir}")


if __name__ == "__main__":
    main()

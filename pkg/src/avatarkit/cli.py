"""Batch command line: synth-data, track, train, infer, reenact, eval."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import pipeline, training
from .container import atomic_write_json
from .dataset import DatasetLayout, synth_dataset
from .errors import AvatarError


def _load_config(path, frame_size=None) -> training.TrainConfig:
    if path:
        config = training.TrainConfig.from_json(Path(path).read_text())
    else:
        config = training.TrainConfig()
    if frame_size is not None:
        config.net.frame_size = frame_size
        config.net.window_size = frame_size // 2
    return config


@click.group()
def main():
    """Portrait avatar pipeline: tracking, training, inference, reenactment."""


@main.command("synth-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--frames", default=50, show_default=True)
@click.option("--size", default=128, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_synth_data(out, frames, size, seed):
    """Generate a perfectly-labeled synthetic toy dataset."""
    layout = synth_dataset(out, n_frames=frames, frame_size=size, seed=seed)
    click.echo(f"wrote {frames} frames to {layout.root}")


@main.command("track")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--render-size", default=128, show_default=True)
@click.option("--iterations", default=3, show_default=True)
@click.option("--force", is_flag=True, help="rebuild the cache even if present")
def cmd_track(dataset, render_size, iterations, force):
    """Track the clip and cache conditioning renderings."""
    layout = DatasetLayout(dataset)
    summary = pipeline.track_dataset(
        layout, render_size=render_size, iterations=iterations, force=force
    )
    click.echo(json.dumps(summary, indent=2))


@main.command("train")
@click.option("--dataset", "datasets", required=True, multiple=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="checkpoint directory")
@click.option("--pretrain", "do_pretrain", is_flag=True, help="multi-video pre-training")
@click.option("--finetune", "finetune_from", type=click.Path(exists=True),
              help="checkpoint to fine-tune from")
@click.option("--iterations", type=int, default=None, help="override config iterations")
@click.option("--seed", type=int, default=None)
def cmd_train(datasets, config_path, out, do_pretrain, finetune_from, iterations, seed):
    """Train: from scratch, multi-video pre-training, or fine-tuning."""
    config = _load_config(config_path)
    if iterations is not None:
        config.iterations = iterations
    if seed is not None:
        config.seed = seed
    layouts = [DatasetLayout(d) for d in datasets]
    videos = [pipeline.load_video_data(l, identity_index=i) for i, l in enumerate(layouts)]

    log_path = Path(out).with_suffix(".metrics.jsonl")
    if do_pretrain:
        trainer = training.pretrain(videos, config, log_path=log_path)
    elif finetune_from:
        if len(videos) != 1:
            raise click.UsageError("--finetune takes exactly one --dataset")
        trainer = training.finetune(finetune_from, videos[0], config, log_path=log_path)
    else:
        if len(videos) != 1:
            raise click.UsageError("from-scratch training takes exactly one --dataset")
        trainer = training.train_single(videos[0], config, log_path=log_path)
    trainer.save(out)
    click.echo(f"checkpoint written to {out} after {trainer.iteration} iterations")


@main.command("infer")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--z-tmp", default="middle", show_default=True,
              help="'middle' or a float timestamp in [0,1]")
def cmd_infer(checkpoint, dataset, out, z_tmp):
    """Self-driven inference over a tracked dataset's parameters."""
    layout = DatasetLayout(dataset)
    session = pipeline.open_inference(checkpoint, layout, z_tmp_policy=z_tmp)
    stream = pipeline.load_param_stream(layout)
    pipeline.infer_stream(session, stream, out_dir=out)
    click.echo(f"wrote {len(stream)} frames to {out}")


@main.command("reenact")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True),
              help="avatar dataset (model, crop box, identity)")
@click.option("--driver", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def cmd_reenact(checkpoint, dataset, driver, out):
    """Drive the avatar with expression/pose tracked from another clip."""
    avatar_layout = DatasetLayout(dataset)
    driver_layout = DatasetLayout(driver)
    pipeline.track_dataset(driver_layout)
    session = pipeline.open_inference(checkpoint, avatar_layout)
    avatar_stream = pipeline.load_param_stream(avatar_layout)
    driver_stream = pipeline.load_param_stream(driver_layout)
    stream = pipeline.reenact_stream(avatar_stream, driver_stream)
    pipeline.infer_stream(session, stream, out_dir=out)
    click.echo(f"wrote {len(stream)} reenacted frames to {out}")


@main.command("eval")
@click.option("--outputs", required=True, type=click.Path(exists=True))
@click.option("--reference", required=True, type=click.Path(exists=True))
@click.option("--split", default="all", type=click.Choice(["all", "train", "test"]),
              show_default=True)
@click.option("--report", type=click.Path(), help="write the JSON report here")
def cmd_eval(outputs, reference, split, report):
    """PSNR/SSIM between an output directory and a reference directory."""
    result = pipeline.evaluate_directories(outputs, reference, split=split)
    click.echo(
        f"{result['count']} frames: mean PSNR {result['mean_psnr']:.2f} dB, "
        f"mean SSIM {result['mean_ssim']:.4f}"
    )
    if report:
        atomic_write_json(report, result)


def run():
    try:
        main(standalone_mode=False)
    except AvatarError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()

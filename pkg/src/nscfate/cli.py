"""Command-line entry point: generate / ingest / train / evaluate / visualize.

Every command takes --config (YAML run document), optional --out / --seed
overrides, and --workers. Exit codes: 0 success, 2 config error, 3 data
error, 4 numeric error, 5 I/O error.
"""

import csv
import functools
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import torch

from . import activations as act
from .config import PIPELINE_VERSION, RunConfig, load_run_config
from .data import DatasetManifest, load_image, load_manifest, preprocess_image, split_dataset
from .errors import CompatibilityError, NotFoundError, PipelineError
from .model import build_model, load_checkpoint, save_checkpoint
from .report import evaluate as run_evaluate, render_figures, save_report
from .seeding import LABEL_SPLIT, derive_seed
from .synth import generate_dataset
from .training import TrainConfig, train


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def history_checksum(history_csv) -> str:
    """History checksum that ignores the wall-seconds column."""
    h = hashlib.sha256()
    with open(history_csv, "r", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            h.update(",".join(row[:-1]).encode("utf-8"))
            h.update(b"\n")
    return h.hexdigest()[:16]


def write_record(out_dir: Path, command: str, config: RunConfig, artifacts: dict) -> Path:
    def rel(p):
        try:
            return str(Path(p).resolve().relative_to(out_dir.resolve()))
        except ValueError:
            return str(p)

    artifacts = {rel(p): checksum for p, checksum in artifacts.items()}
    record = {
        "run_id": config.label,
        "command": command,
        "config_checksum": config.checksum(),
        "pipeline_version": PIPELINE_VERSION,
        "artifacts": artifacts,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path = out_dir / f"record_{command}.json"
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def prepare_manifest(config: RunConfig, out_dir: Path, workers: int) -> DatasetManifest:
    """Locate or generate the dataset, then apply the deterministic split."""
    if config.source == "synthetic":
        dataset_dir = out_dir / "dataset"
        spec = config.synthetic_spec()
        if not dataset_dir.is_dir():
            manifest = generate_dataset(spec, dataset_dir, workers=workers)
        else:
            manifest = load_manifest(dataset_dir, config.taxonomy)
    else:
        manifest = load_manifest(config.dataset_directory, config.taxonomy)
    return split_dataset(manifest, config.split_fractions, derive_seed(config.seed, LABEL_SPLIT))


def pipeline_command(fn):
    """Shared options plus structured error reporting with exit codes."""

    @click.option("--config", "config_path", required=True, type=click.Path(), help="Run config YAML.")
    @click.option("--out", "out_override", default=None, help="Override run.output_dir.")
    @click.option("--seed", "seed_override", default=None, type=int, help="Override run.seed.")
    @click.option("--workers", default=1, type=int, show_default=True, help="Parallel workers.")
    @functools.wraps(fn)
    def wrapper(config_path, out_override, seed_override, workers, **kwargs):
        try:
            config = load_run_config(config_path, seed_override=seed_override, out_override=out_override)
            out_dir = Path(config.output_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            if workers <= 1:
                torch.set_num_threads(1)  # bit-reproducible CPU math
            fn(config=config, out_dir=out_dir, workers=workers, **kwargs)
        except PipelineError as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


@click.group()
def main():
    """Neural-stem-cell fate classification pipeline."""


@main.command()
@pipeline_command
def generate(config, out_dir, workers):
    """Render the synthetic dataset described by the config."""
    spec = config.synthetic_spec()
    dataset_dir = out_dir / "dataset"
    manifest = generate_dataset(spec, dataset_dir, workers=workers)
    manifest = split_dataset(manifest, config.split_fractions, derive_seed(config.seed, LABEL_SPLIT))
    manifest_path = out_dir / "manifest.csv"
    manifest.save_csv(manifest_path)
    artifacts = {str(manifest_path): file_sha256(manifest_path)}
    for sample in manifest.samples:
        artifacts[sample.source_path] = file_sha256(sample.source_path)
    artifacts[str(dataset_dir / "generation_log.csv")] = file_sha256(dataset_dir / "generation_log.csv")
    write_record(out_dir, "generate", config, artifacts)
    click.echo(f"generated {len(manifest.samples)} images into {dataset_dir}")


@main.command()
@pipeline_command
def ingest(config, out_dir, workers):
    """Index an on-disk dataset directory and assign splits."""
    manifest = prepare_manifest(config, out_dir, workers)
    manifest_path = out_dir / "manifest.csv"
    manifest.save_csv(manifest_path)
    write_record(out_dir, "ingest", config, {str(manifest_path): file_sha256(manifest_path)})
    counts = {split: len(manifest.split_samples(split)) for split in ("train", "val", "test")}
    click.echo(f"ingested {len(manifest.samples)} samples: {counts}")


@main.command(name="train")
@click.option("--resume", is_flag=True, help="Continue from an existing checkpoint and history.")
@pipeline_command
def train_cmd(config, out_dir, workers, resume):
    """Train the classifier and checkpoint the best-validation state."""
    manifest = prepare_manifest(config, out_dir, workers)
    checkpoint_path = out_dir / "checkpoint.nsck"
    history_path = out_dir / "history.csv"

    start_epoch = 1
    train_config = config.train
    prior_rows = []
    if resume and checkpoint_path.is_file():
        state = load_checkpoint(checkpoint_path, expected_taxonomy=config.taxonomy)
        completed = 0
        if history_path.is_file():
            with history_path.open("r", encoding="utf-8") as fh:
                prior_rows = list(csv.reader(fh))[1:]
            completed = max((int(row[0]) for row in prior_rows), default=0)
        start_epoch = completed + 1
        remaining = max(config.train.epochs - completed, 0)
        if remaining == 0:
            click.echo("nothing to resume: configured epochs already completed")
            return
        train_config = TrainConfig(
            **{**config.train.__dict__, "epochs": remaining}
        )
    else:
        state = build_model(config.model, config.taxonomy, config.seed)

    best_state, history = train(state, manifest, train_config, config.preprocess,
                                workers=workers, start_epoch=start_epoch)
    save_checkpoint(best_state, checkpoint_path)
    history.save_csv(history_path)
    if prior_rows:
        # keep the full epoch record across resumed runs
        with history_path.open("r", encoding="utf-8") as fh:
            header, *new_rows = list(csv.reader(fh))
        with history_path.open("w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(prior_rows)
            writer.writerows(new_rows)
    manifest_path = out_dir / "manifest.csv"
    manifest.save_csv(manifest_path)
    artifacts = {
        str(checkpoint_path): file_sha256(checkpoint_path),
        str(history_path): history_checksum(history_path),
        str(manifest_path): file_sha256(manifest_path),
    }
    write_record(out_dir, "train", config, artifacts)
    best = history.records[history.best_epoch - start_epoch] if history.records else None
    if best is not None:
        click.echo(
            f"trained {len(history.records)} epoch(s); best epoch {history.best_epoch} "
            f"(val_loss {best.val_loss:.4f}, val_acc {best.val_accuracy:.4f})"
        )


@main.command(name="evaluate")
@click.option("--checkpoint", "checkpoint_path", default=None, type=click.Path(),
              help="Checkpoint to evaluate (default <out>/checkpoint.nsck).")
@pipeline_command
def evaluate_cmd(config, out_dir, workers, checkpoint_path):
    """Evaluate a checkpoint and emit the report, figures, and CSV sources."""
    manifest = prepare_manifest(config, out_dir, workers)
    ckpt = Path(checkpoint_path) if checkpoint_path else out_dir / "checkpoint.nsck"
    state = load_checkpoint(ckpt, expected_taxonomy=config.taxonomy)
    if state.config.input_shape != config.model.input_shape:
        raise CompatibilityError(
            f"checkpoint input shape {state.config.input_shape} != config {config.model.input_shape}"
        )
    report = run_evaluate(state, manifest, config.eval_split, config.preprocess,
                          batch_size=config.eval_batch_size, workers=workers)
    report_path = out_dir / f"report_{config.eval_split}.json"
    doc = save_report(report, report_path, config_checksum=config.checksum())
    figure_paths = render_figures(report, out_dir / "figures")
    artifacts = {str(report_path): doc["report_checksum"]}
    for p in figure_paths:
        artifacts[p] = file_sha256(p)
    write_record(out_dir, "evaluate", config, artifacts)
    click.echo(
        f"{config.eval_split}: n={report.sample_count} accuracy={report.accuracy:.4f} "
        f"macro_auc={report.macro_auc:.4f}"
    )


@main.command(name="visualize")
@click.option("--checkpoint", "checkpoint_path", default=None, type=click.Path())
@click.option("--sample", "sample_ids", multiple=True, help="Sample id(s) to overlay.")
@click.option("--layer", "layer_ids", multiple=True, help="Layer id(s) to capture.")
@click.option("--reduction", default="channel_mean", show_default=True)
@click.option("--per-class-summary", is_flag=True, help="Emit one mean-activation image per class.")
@click.option("--samples-per-class", default=5, show_default=True, type=int)
@pipeline_command
def visualize_cmd(config, out_dir, workers, checkpoint_path, sample_ids, layer_ids,
                  reduction, per_class_summary, samples_per_class):
    """Render activation overlays for samples, or per-class summaries."""
    manifest = prepare_manifest(config, out_dir, workers)
    ckpt = Path(checkpoint_path) if checkpoint_path else out_dir / "checkpoint.nsck"
    state = load_checkpoint(ckpt, expected_taxonomy=config.taxonomy)
    overlay_dir = out_dir / "overlays"
    artifacts = {}

    if per_class_summary:
        layers = list(layer_ids) or [sorted(state.net.layer_registry())[0]]
        for layer_id in layers:
            _, energies = act.class_activation_summary(
                state, manifest, config.eval_split, layer_id, samples_per_class,
                config.preprocess, seed=config.seed, output_directory=overlay_dir,
            )
            click.echo(f"{layer_id} mean activation energy: {energies}")
    else:
        if not sample_ids or not layer_ids:
            raise NotFoundError("provide --sample and --layer, or use --per-class-summary")
        for sample_id in sample_ids:
            sample = manifest.find(sample_id)
            if sample is None:
                raise NotFoundError(f"sample id {sample_id!r} not in manifest")
            raw = load_image(sample.source_path)
            x = preprocess_image(raw, config.preprocess)
            traces = act.capture_activations(state, x, list(layer_ids), input_id=sample_id)
            for trace in traces:
                stem = f"{sample_id.replace('/', '_')}__{trace.layer_id}__{reduction}"
                png, csv_path = act.render_overlay(trace, x, reduction, overlay_dir / f"{stem}.png")
                artifacts[png] = file_sha256(png)
                artifacts[csv_path] = file_sha256(csv_path)
                click.echo(f"wrote {png}")
    write_record(out_dir, "visualize", config, artifacts)


if __name__ == "__main__":
    main()

"""Command-line pipeline driver.

Subcommands cover the whole workflow: phantom-gen, crop, train-cyclegan,
translate, train-unet, evaluate, report. Every command draws its settings
from a scale preset, an optional TOML config, and flags (in that
precedence), and all randomness flows from the single configured seed.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
failure (non-finite values).
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import config as cfgmod
from . import cropping, cyclegan, evaluation, phantom, segmentation, viz
from .dataio import DomainLabel, Split, load_manifest
from .errors import (
    ConfigError,
    DataError,
    DatasetSizeError,
    EmptyMaskError,
    NoBodyError,
    NoRibsError,
    ParameterError,
    PhantomSpecError,
    ShapelockError,
    TrainingDivergedError,
)

_CONFIG_ERRORS = (ConfigError, DatasetSizeError, PhantomSpecError, ParameterError)
_DATA_ERRORS = (DataError, NoBodyError, NoRibsError, EmptyMaskError)


def handle_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except _CONFIG_ERRORS as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except _DATA_ERRORS as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(3)
        except TrainingDivergedError as exc:
            click.echo(f"training failure: {exc}", err=True)
            sys.exit(4)
        except ShapelockError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)

    return wrapper


def common_options(f):
    f = click.option("--config", "config_path", type=click.Path(), default=None,
                     help="TOML config file; flags override its values.")(f)
    f = click.option("--seed", type=int, default=None, help="Global seed.")(f)
    f = click.option("--out", "out_dir", type=click.Path(), default=None,
                     help="Output directory root.")(f)
    f = click.option("--scale", type=click.Choice(cfgmod.SCALES), default=None,
                     help="Parameter preset: desk (CPU-sized) or full.")(f)
    return f


@click.group()
def main():
    """Shape-preserving pathological tissue synthesis pipeline."""


@main.command("phantom-gen")
@common_options
@handle_errors
def cmd_phantom_gen(config_path, seed, out_dir, scale):
    """Generate a synthetic phantom dataset (both domains, patient split)."""
    cfg = cfgmod.load_config(config_path, scale, seed, out_dir)
    spec = cfg.phantom.build_spec(cfg.phantom_spec_overrides)
    dataset_dir = cfg.out_dir / "phantom"
    manifest = phantom.generate_dataset(
        spec,
        dataset_dir,
        n_patients=cfg.phantom.n_patients,
        slices_per_patient=cfg.phantom.slices_per_patient,
        split=cfg.phantom.split,
        seed=cfg.seed,
        nonlung_fraction=cfg.phantom.nonlung_fraction,
    )
    counts = {s.value: len(manifest.select(split=s)) for s in Split}
    click.echo(f"wrote {len(manifest.slices)} slices to {dataset_dir} (splits: {counts})")


@main.command("crop")
@click.option("--in-manifest", "in_manifest", type=click.Path(), required=True,
              help="Manifest of the dataset to crop.")
@common_options
@handle_errors
def cmd_crop(in_manifest, config_path, seed, out_dir, scale):
    """Crop every slice to its rib-cage box; failures are listed, not fatal."""
    cfg = cfgmod.load_config(config_path, scale, seed, out_dir)
    src = load_manifest(in_manifest)
    dst_dir = cfg.out_dir / "cropped"
    manifest, boxes, failures = cropping.crop_dataset(
        src, dst_dir, cfg.crop.to_crop_config(), cfg.crop.out_size
    )
    (dst_dir / "boxes.json").write_text(json.dumps(boxes, indent=2, sort_keys=True) + "\n")
    (dst_dir / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
    msg = f"cropped {len(manifest.slices)} slices to {dst_dir}"
    if failures:
        msg += f" ({len(failures)} failures, see failures.json)"
    click.echo(msg)


@main.command("train-cyclegan")
@click.option("--in-manifest", "in_manifest", type=click.Path(), required=True,
              help="Manifest of the cropped dataset.")
@click.option("--resume", is_flag=True, help="Continue from the last checkpoint.")
@common_options
@handle_errors
def cmd_train_cyclegan(in_manifest, resume, config_path, seed, out_dir, scale):
    """Train the translation model; checkpoints land in OUT/cyclegan."""
    cfg = cfgmod.load_config(config_path, scale, seed, out_dir)
    manifest = load_manifest(in_manifest)
    bundle = cyclegan.build_models(cfg.gan_model, cfg.gan_train.seed)
    checkpoint_dir = cfg.out_dir / "cyclegan"
    bundle, reports = cyclegan.train(
        manifest.subset(split=Split.TRAIN),
        manifest.subset(split=Split.TEST),
        bundle,
        cfg.gan_train,
        checkpoint_dir=checkpoint_dir,
        resume=resume,
    )
    if reports:
        last = reports[-1]
        click.echo(
            f"trained {len(reports)} epochs; final shape_preservation="
            f"{last.shape_preservation:.4f} inside_change={last.inside_change:.4f}; "
            f"checkpoints in {checkpoint_dir}"
        )
    else:
        click.echo("0 epochs requested; nothing trained")


@main.command("translate")
@click.option("--checkpoint", type=click.Path(), required=True,
              help="Translation-model checkpoint (best.pt).")
@click.option("--in-manifest", "in_manifest", type=click.Path(), required=True)
@click.option("--split", "split_name", type=click.Choice([s.value for s in Split]), default="test")
@click.option("--limit", type=int, default=16, help="Maximum number of panels.")
@common_options
@handle_errors
def cmd_translate(checkpoint, in_manifest, split_name, limit, config_path, seed, out_dir, scale):
    """Render input | generated | difference panels for healthy slices."""
    cfg = cfgmod.load_config(config_path, scale, seed, out_dir)
    bundle, stats, _ = cyclegan.load_generator_checkpoint(checkpoint)
    manifest = load_manifest(in_manifest)
    records = manifest.select(split=Split(split_name), domain=DomainLabel.HEALTHY)
    if not records:
        raise DataError(f"no healthy slices in split {split_name!r}")
    panel_dir = cfg.out_dir / "translations"
    panel_dir.mkdir(parents=True, exist_ok=True)
    for rec in records[:limit]:
        z = stats.normalize(manifest.load_image(rec).values)
        generated = cyclegan.translate_array(z, bundle.g)
        viz.save_translation_panel(
            panel_dir / f"{rec.patient_id}_{rec.slice_id}.png", z, generated, stats
        )
    click.echo(f"wrote {min(limit, len(records))} panels to {panel_dir}")


@main.command("train-unet")
@click.option("--in-manifest", "in_manifest", type=click.Path(), required=True,
              help="Manifest of the cropped dataset (healthy slices are used).")
@click.option("--gan-checkpoint", type=click.Path(), default=None,
              help="Translation checkpoint for augmentation; omit to disable.")
@click.option("--resume", is_flag=True, help="Continue from the last checkpoint.")
@common_options
@handle_errors
def cmd_train_unet(in_manifest, gan_checkpoint, resume, config_path, seed, out_dir, scale):
    """Train the segmenter, optionally with generative augmentation."""
    cfg = cfgmod.load_config(config_path, scale, seed, out_dir)
    manifest = load_manifest(in_manifest)
    g = None
    stats = None
    if gan_checkpoint is not None:
        gan_bundle, stats, _ = cyclegan.load_generator_checkpoint(gan_checkpoint)
        g = gan_bundle.g
    model = segmentation.build_unet(cfg.unet, cfg.seg_train.seed)
    checkpoint_dir = cfg.out_dir / "unet"
    model, history = segmentation.train_segmenter(
        manifest.subset(split=Split.TRAIN),
        manifest.subset(split=Split.VAL),
        g,
        model,
        cfg.seg_train,
        stats=stats,
        checkpoint_dir=checkpoint_dir,
        resume=resume,
    )
    if history:
        best = max(h.val_dice for h in history)
        click.echo(
            f"trained {len(history)} epochs; best val dice {best:.4f}; "
            f"checkpoints in {checkpoint_dir}"
        )
    else:
        click.echo("0 epochs requested; nothing trained")


@main.command("evaluate")
@click.option("--checkpoint", "checkpoints", type=click.Path(), multiple=True, required=True,
              help="Segmenter checkpoint(s); repeat to compare models.")
@click.option("--name", "names", multiple=True,
              help="Display name per checkpoint (defaults derived from paths).")
@click.option("--in-manifest", "in_manifest", type=click.Path(), required=True)
@click.option("--split", "split_name", type=click.Choice([s.value for s in Split]), default="test")
@click.option("--domain", "domain_name", default="pathological",
              type=click.Choice([d.value for d in DomainLabel] + ["all"]))
@common_options
@handle_errors
def cmd_evaluate(checkpoints, names, in_manifest, split_name, domain_name,
                 config_path, seed, out_dir, scale):
    """Per-patient Dice of one or more segmenters on a labeled dataset."""
    cfg = cfgmod.load_config(config_path, scale, seed, out_dir)
    if names and len(names) != len(checkpoints):
        raise ConfigError("--name must be given once per --checkpoint")
    manifest = load_manifest(in_manifest)
    domain = None if domain_name == "all" else DomainLabel(domain_name)
    subset = manifest.subset(split=Split(split_name), domain=domain)
    if not subset.slices:
        raise DataError(f"no slices in split={split_name} domain={domain_name}")

    models = []
    for i, ckpt in enumerate(checkpoints):
        model, stats, _ = segmentation.load_segmenter_checkpoint(ckpt)
        if names:
            name = names[i]
        else:
            stem = Path(ckpt).stem
            name = Path(ckpt).parent.name if stem in ("best", "last") else stem
        models.append((name, model, stats))

    table = evaluation.compare_models(
        models, subset, dataset_name=cfg.evaluation.dataset_name,
        threshold=cfg.evaluation.threshold,
    )
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    eval_json = cfg.out_dir / "evaluation.json"
    eval_json.write_text(
        json.dumps([vars(r) for r in table.rows], indent=2, sort_keys=True) + "\n"
    )
    table.to_csv(cfg.out_dir / "report.csv")
    for (ds, model_name), mean in sorted(table.summary().items()):
        click.echo(f"{ds} / {model_name}: mean dice {mean:.4f}")
    click.echo(f"wrote {eval_json} and {cfg.out_dir / 'report.csv'}")


@main.command("report")
@click.option("--evaluation", "eval_files", type=click.Path(), multiple=True, required=True,
              help="evaluation.json file(s) produced by the evaluate command.")
@common_options
@handle_errors
def cmd_report(eval_files, config_path, seed, out_dir, scale):
    """Combine evaluation results into report.csv and report.md tables."""
    cfg = cfgmod.load_config(config_path, scale, seed, out_dir)
    rows = []
    for path in eval_files:
        p = Path(path)
        if not p.exists():
            raise DataError(f"evaluation file not found: {p}")
        try:
            data = json.loads(p.read_text())
            rows.extend(evaluation.ReportRow(**d) for d in data)
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"malformed evaluation file {p}: {exc}") from exc
    table = evaluation.ReportTable(rows=rows)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(cfg.out_dir / "report.csv")
    table.to_markdown(cfg.out_dir / "report.md")
    click.echo(f"wrote {cfg.out_dir / 'report.csv'} and {cfg.out_dir / 'report.md'}")


if __name__ == "__main__":
    main()

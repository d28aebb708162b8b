
### SEGMENTATION EXPERIMENTS: SYNTHETIC DATA, TRAINING, EVALUATION AND REPORTS
#
# Usage:
#   python main.py synth --out data/synth --n 250 --size 64 --seed 7
#   python main.py train --data data/synth --arch sdu --out runs/sdu --epochs 20
#   python main.py eval --checkpoint runs/sdu/best.sduc --data data/synth --overlay-dir runs/sdu/overlays
#   python main.py params
#   python main.py rf --arch sdu --verify
#   python main.py crossval --data data/synth --arch-a sdu --arch-b unet --k 5 --out runs/cv
#   python main.py replay runs/sdu/manifest.json
#
# Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.

import os
import sys

from dotenv import load_dotenv

load_dotenv()

# BLAS thread caps only take effect before numpy is imported
_threads = os.getenv('SDU_SEG_THREADS')
if _threads:
    for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
        os.environ.setdefault(_var, _threads)

from typing import Any, Dict, Optional, Tuple

import click
import pandas as pd

from src.data.dataset import SampleSet, load_dataset
from src.data.folds import holdout_split, make_folds
from src.data.synth import SyntheticGenerator
from src.models.config import ModelConfig
from src.models.parameters import PUBLISHED_PARAMETERS, compare_with_reference, count_parameters
from src.models.segnet import SegmentationNet, build_model
from src.nn.blocks import DoubleConvBlock, SduBlock, SduBlockConfig
from src.nn.init import kaiming_init
from src.nn.layers import ConvNormAct
from src.nn.receptive_field import measure_receptive_field, receptive_field
from src.training.checkpoint import load_checkpoint
from src.training.config import TrainConfig
from src.training.crossval import cross_validate
from src.training.evaluation import compare_checkpoints, evaluate
from src.training.overlay import write_overlays
from src.training.trainer import train
from src.utils.config import config_to_mapping, partition_config, read_config_file
from src.utils.errors import ConfigValidationError, DataError, NumericError, SegmentationError
from src.utils.logger import get_log_dir
from src.utils.manifest import MANIFEST_FILE, RunManifest

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

DEFAULT_WIDTHS = '64,128,256,512'


class SegmentationCLI(click.Group):
    """Maps library errors to the documented exit codes."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            code = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.ClickException as e:
            e.show()
            code = EXIT_USAGE
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = EXIT_USAGE
        except NumericError as e:
            click.echo(f"Error: {e}", err=True)
            code = EXIT_NUMERIC
        except DataError as e:
            click.echo(f"Error: {e}", err=True)
            code = EXIT_DATA
        except SegmentationError as e:
            click.echo(f"Error: {e}", err=True)
            code = EXIT_USAGE
        code = code if isinstance(code, int) else 0
        if standalone_mode:
            sys.exit(code)
        return code


def parse_widths(value: Optional[str]) -> Optional[Tuple[int, ...]]:
    if value is None:
        return None
    try:
        return tuple(int(part) for part in value.split(',') if part.strip())
    except ValueError:
        raise ConfigValidationError(f"--widths expects comma-separated integers, got '{value}'")


def resolve_configs(config_path: Optional[str], model_overrides: Dict[str, Any],
                    train_overrides: Dict[str, Any]) -> Tuple[ModelConfig, TrainConfig]:
    """File values first, then CLI flags that were given."""
    mapping = dict(read_config_file(config_path)) if config_path else {}
    if 'arch' in mapping:
        mapping['block_kind'] = mapping.pop('arch')
    model_raw, train_raw = partition_config(mapping, ModelConfig, TrainConfig)
    model_raw.update({key: value for key, value in model_overrides.items() if value is not None})
    train_raw.update({key: value for key, value in train_overrides.items() if value is not None})
    return ModelConfig(**model_raw), TrainConfig(**train_raw)


def load_samples(root: str, size: Optional[int], workers: Optional[int] = None) -> SampleSet:
    samples = load_dataset(root, workers)
    if size:
        samples = samples.resized(size, size)
    return samples


def start_manifest(ctx: click.Context, path: str, inputs=(), **kwargs) -> RunManifest:
    manifest = RunManifest.start(ctx.command.name, ctx.params, inputs=[p for p in inputs if p], **kwargs)
    manifest.write(path)
    return manifest


def resolve_manifest_path(ctx: click.Context, out: Optional[str], fallback: Optional[str] = None) -> str:
    """Output dir first, then the primary artifact dir, then a per-command file in the log dir."""
    directory = out or fallback
    if directory:
        return os.path.join(directory, MANIFEST_FILE)
    return os.path.join(get_log_dir(), 'manifests', f'{ctx.command.name}.{MANIFEST_FILE}')


def print_table(frame: pd.DataFrame, float_format: str = '{:.4f}'):
    widths = {col: max(len(str(col)), *(len(_cell(v, float_format)) for v in frame[col])) + 2 for col in frame.columns}
    click.echo(''.join(str(col).ljust(widths[col]) for col in frame.columns))
    click.echo('-' * sum(widths.values()))
    for _, row in frame.iterrows():
        click.echo(''.join(_cell(row[col], float_format).ljust(widths[col]) for col in frame.columns))


def _cell(value: Any, float_format: str) -> str:
    if isinstance(value, float):
        return float_format.format(value)
    return str(value)


@click.group(cls=SegmentationCLI)
def cli():
    """SDU-Net and U-Net segmentation experiments."""


@cli.command()
@click.option('--out', required=True, type=click.Path(file_okay=False), help='Dataset root to create.')
@click.option('--n', 'n_samples', default=250, show_default=True, type=int)
@click.option('--size', default=64, show_default=True, type=int, help='Image height (and width unless --width).')
@click.option('--width', default=None, type=int)
@click.option('--seed', default=0, show_default=True, type=click.IntRange(min=0))
@click.option('--speckle/--no-speckle', default=True, show_default=True)
@click.option('--classes', 'n_classes', default=1, show_default=True, type=int, help='1, or 2 for two organs.')
@click.option('--channels', default=1, show_default=True, type=int, help='1 gray (PGM) or 3 color (PPM).')
@click.option('--jobs', default=None, type=int, help='Writer threads.')
@click.pass_context
def synth(ctx, out, n_samples, size, width, seed, speckle, n_classes, channels, jobs):
    """Generate a synthetic ultrasound-like dataset."""
    generator = SyntheticGenerator(out, size, width, seed, speckle, n_classes, channels, jobs)
    start_manifest(ctx, os.path.join(out, MANIFEST_FILE), seed=seed,
                   outputs={'images': os.path.join(out, 'images'), 'masks': os.path.join(out, 'masks'),
                            'ellipses': os.path.join(out, 'ellipses.csv')})
    ellipses = generator.generate(n_samples)
    click.echo(f"Wrote {n_samples} image/mask pairs ({generator.height}x{generator.width}, "
               f"{len(ellipses)} ellipses) to {out}")


@cli.command('train')
@click.option('--data', required=True, type=click.Path(), help='Dataset root with images/ and masks/.')
@click.option('--arch', type=click.Choice(['sdu', 'unet']), default=None, help='Defaults to the config file, then sdu.')
@click.option('--config', 'config_path', type=click.Path(), default=None, help='Flat key=value config file.')
@click.option('--out', required=True, type=click.Path(file_okay=False))
@click.option('--epochs', default=None, type=int)
@click.option('--batch-size', default=None, type=int)
@click.option('--lr', 'learning_rate', default=None, type=float)
@click.option('--seed', default=None, type=click.IntRange(min=0))
@click.option('--widths', default=None, help='Four comma-separated channel widths.')
@click.option('--rounding', type=click.Choice(['strict', 'floor']), default=None)
@click.option('--norm/--no-norm', default=None)
@click.option('--size', default=None, type=int, help='Resize samples to size x size.')
@click.option('--val-data', default=None, type=click.Path(), help='Separate validation dataset root.')
@click.option('--val-share', default=0.2, show_default=True, type=float)
@click.option('--resume', 'resume_from', default=None, type=click.Path(), help='Checkpoint to continue from.')
@click.option('--checkpoint-every', default=None, type=int)
@click.option('--jobs', default=None, type=int, help='Decoder threads.')
@click.pass_context
def train_cmd(ctx, data, arch, config_path, out, epochs, batch_size, learning_rate, seed, widths, rounding,
              norm, size, val_data, val_share, resume_from, checkpoint_every, jobs):
    """Train one model and keep its best-validation checkpoint."""
    samples = load_samples(data, size, jobs)
    model_cfg, train_cfg = resolve_configs(
        config_path,
        {'block_kind': arch, 'widths': parse_widths(widths), 'channel_rounding': rounding, 'use_norm': norm,
         'in_channels': samples.channels, 'out_channels': samples.n_classes},
        {'batch_size': batch_size, 'learning_rate': learning_rate, 'seed': seed,
         'checkpoint_every': checkpoint_every},
    )

    if val_data:
        train_set, val_set = samples, load_samples(val_data, size, jobs)
    else:
        train_ids, val_ids = holdout_split(samples, val_share, train_cfg.seed)
        train_set, val_set = samples.subset(train_ids), samples.subset(val_ids)

    start_manifest(ctx, os.path.join(out, MANIFEST_FILE), inputs=[data, val_data, config_path, resume_from],
                   seed=train_cfg.seed,
                   config={'model': config_to_mapping(model_cfg), 'train': config_to_mapping(train_cfg)},
                   outputs={'best': os.path.join(out, 'best.sduc'), 'last': os.path.join(out, 'last.sduc'),
                            'history': os.path.join(out, 'history.csv')})

    model = build_model(model_cfg, train_cfg.seed)
    result = train(model, train_set, val_set, train_cfg, out, epochs, resume_from)

    history = result.history
    train_rows = history[history['split'] == 'train'].groupby('epoch')['dice'].mean()
    click.echo("\n=== Training Summary ===")
    click.echo(f"Architecture:      {model_cfg.arch} (widths {','.join(map(str, model_cfg.widths))})")
    click.echo(f"Samples:           {len(train_set)} train / {len(val_set)} validation")
    click.echo(f"Epochs:            {result.epochs}")
    if len(train_rows):
        click.echo(f"Train dice:        {train_rows.iloc[0]:.4f} (first) -> {train_rows.iloc[-1]:.4f} (last)")
    click.echo(f"Best val dice:     {result.best_dice:.4f} at epoch {result.best_epoch}")
    click.echo(f"Best checkpoint:   {result.best_path}")
    click.echo(f"History:           {result.history_path}")


@cli.command('eval')
@click.option('--checkpoint', required=True, type=click.Path())
@click.option('--data', required=True, type=click.Path())
@click.option('--out', default=None, type=click.Path(file_okay=False), help='Directory for scores.csv.')
@click.option('--overlay-dir', default=None, type=click.Path(file_okay=False))
@click.option('--threshold', default=None, type=float, help='Defaults to the training threshold.')
@click.option('--size', default=None, type=int)
@click.pass_context
def eval_cmd(ctx, checkpoint, data, out, overlay_dir, threshold, size):
    """Score a checkpoint on a dataset (Dice per image and class)."""
    ckpt = load_checkpoint(checkpoint)
    samples = load_samples(data, size)
    if (samples.channels, samples.n_classes) != (ckpt.model_config.in_channels, ckpt.model_config.out_channels):
        raise ConfigValidationError(
            f"Dataset has {samples.channels} channel(s) / {samples.n_classes} class(es); the checkpoint expects "
            f"{ckpt.model_config.in_channels} / {ckpt.model_config.out_channels}"
        )
    if threshold is None:
        threshold = ckpt.train_config.threshold if ckpt.train_config else 0.5
    start_manifest(ctx, resolve_manifest_path(ctx, out, overlay_dir), inputs=[checkpoint, data],
                   outputs={'scores': os.path.join(out, 'scores.csv') if out else '', 'overlays': overlay_dir or ''})

    model = ckpt.build_model().freeze()
    evaluation = evaluate(model, samples, threshold)
    if out:
        evaluation.scores.to_csv(os.path.join(out, 'scores.csv'), index=False)
    if overlay_dir:
        paths = write_overlays(model, samples, overlay_dir, threshold)
        click.echo(f"Wrote {len(paths)} overlays to {overlay_dir}")

    click.echo(f"\n=== Evaluation: {ckpt.model_config.arch} on {len(samples)} images ===")
    for line in evaluation.describe():
        click.echo(line)


@cli.command()
@click.option('--arch', type=click.Choice(['sdu', 'unet']), default='sdu', show_default=True,
              help='Architecture for the per-layer table.')
@click.option('--widths', default=DEFAULT_WIDTHS, show_default=True)
@click.option('--in-ch', default=1, show_default=True, type=int)
@click.option('--out-ch', default=1, show_default=True, type=int)
@click.option('--norm/--no-norm', default=True, show_default=True)
@click.option('--rounding', type=click.Choice(['strict', 'floor']), default='floor', show_default=True)
@click.option('--per-layer', is_flag=True, help='Print every parameter tensor.')
@click.option('--out', default=None, type=click.Path(file_okay=False), help='Directory for params.csv.')
@click.pass_context
def params(ctx, arch, widths, in_ch, out_ch, norm, rounding, per_layer, out):
    """Trainable-parameter counts of SDU-Net and U-Net, next to the published totals."""
    common = dict(in_channels=in_ch, out_channels=out_ch, widths=parse_widths(widths), use_norm=norm,
                  channel_rounding=rounding)
    # Counting needs shapes only; skip the weight draw
    models = {kind: SegmentationNet(ModelConfig(block_kind=kind, **common)) for kind in ('sdu', 'unet')}
    start_manifest(ctx, resolve_manifest_path(ctx, out),
                   outputs={'params': os.path.join(out, 'params.csv') if out else '',
                            'totals': os.path.join(out, 'totals.csv') if out else ''})

    sdu_report = count_parameters(models['sdu'], compare_with=models['unet'], label='sdu', compare_label='unet')
    unet_report = count_parameters(models['unet'], label='unet')
    reports = {'sdu': sdu_report, 'unet': unet_report}

    if per_layer:
        click.echo(reports[arch].format_table())
        click.echo()

    click.echo("=== Parameter Totals ===")
    click.echo("Model".ljust(10) + "Total".rjust(14) + "Without norm".rjust(16) + "Published".rjust(22)
               + "Delta".rjust(14))
    click.echo("-" * 76)
    totals = []
    for label, key in (('sdu', 'SDU-Net'), ('unet', 'U-Net')):
        report = reports[label]
        reference = compare_with_reference(report, key)
        click.echo(f"{label:<10}{report.total:>14,}{report.total_without_norm:>16,}"
                   f"{key + ' ' + format(reference['reference'], ','):>22}{reference['delta']:>+14,}")
        totals.append({'model': label, 'total': report.total, 'without_norm': report.total_without_norm,
                       'published': reference['reference'], 'delta': reference['delta']})
    for key in ('AttU-Net', 'R2U-Net'):
        click.echo(f"{'':<10}{'':>14}{'':>16}{key + ' ' + format(PUBLISHED_PARAMETERS[key], ','):>22}")
    published = PUBLISHED_PARAMETERS['SDU-Net'] / PUBLISHED_PARAMETERS['U-Net']
    click.echo(f"Ratio sdu/unet: {sdu_report.ratio_vs['ratio']:.4f} (published {published:.4f})")

    if out:
        frames = [reports[label].to_frame().assign(model=label) for label in ('sdu', 'unet')]
        pd.concat(frames, ignore_index=True)[['model', 'name', 'shape', 'count']].to_csv(
            os.path.join(out, 'params.csv'), index=False)
        pd.DataFrame(totals).to_csv(os.path.join(out, 'totals.csv'), index=False)


def _impulse_block(arch: str, cfg: ModelConfig):
    """Narrow single-block stand-in for the impulse check, with its input size."""
    if arch == 'single':
        return ConvNormAct(1, 4, 1, use_norm=False)
    if arch == 'unet':
        return DoubleConvBlock(1, 4, use_norm=False)
    block_cfg = SduBlockConfig(n_in=1, n_out=16, split_fractions=cfg.split_fractions,
                               dilation_rates=cfg.dilation_rates, use_norm=False, stem=cfg.sdu_stem,
                               rounding='floor')
    return SduBlock(block_cfg)


@cli.command()
@click.option('--arch', type=click.Choice(['sdu', 'unet', 'single']), default='sdu', show_default=True)
@click.option('--widths', default=DEFAULT_WIDTHS, show_default=True)
@click.option('--stem', type=click.Choice(['branch', 'separate']), default='branch', show_default=True)
@click.option('--verify', is_flag=True, help='Check the analytic extents with an impulse response.')
@click.option('--out', default=None, type=click.Path(file_okay=False), help='Directory for rf.csv.')
@click.pass_context
def rf(ctx, arch, widths, stem, verify, out):
    """Receptive field of every encoder/decoder operation and branch."""
    cfg_kwargs = {'sdu_stem': stem}
    if stem == 'separate':
        cfg_kwargs['dilation_rates'] = SduBlockConfig.separate_stem(1, 16).dilation_rates
    cfg = ModelConfig(block_kind='double_conv' if arch == 'unet' else 'sdu', widths=parse_widths(widths),
                      channel_rounding='floor', use_norm=False, **cfg_kwargs)
    start_manifest(ctx, resolve_manifest_path(ctx, out), outputs={'rf': os.path.join(out, 'rf.csv') if out else ''})

    if arch == 'single':
        field = receptive_field(ConvNormAct(1, 1, 1, use_norm=False))
        rows = [{'operation': 'conv', 'level': 1, 'branches': '{' + ','.join(map(str, field.branches)) + '}',
                 'absolute': field.largest}]
    else:
        rows = []
        for op in SegmentationNet(cfg).operation_fields():
            rows.append({
                'operation': op.name,
                'level': op.level,
                'branches': '{' + ','.join(map(str, op.local.branches)) + '}',
                'absolute': op.absolute if op.absolute is not None else '-',
            })
    frame = pd.DataFrame(rows, columns=['operation', 'level', 'branches', 'absolute'])
    click.echo(f"=== Receptive fields ({arch}) ===")
    print_table(frame)

    if verify:
        block = _impulse_block(arch, cfg)
        kaiming_init(block, 0)
        analytic = receptive_field(block).branches
        size = max(16, 2 * max(analytic) + 2)
        measured = measure_receptive_field(block, 1, size)
        if tuple(measured) != tuple(analytic):
            raise SegmentationError(f"Impulse check failed: analytic {analytic} vs measured {measured}")
        click.echo(f"Impulse check passed: measured {{{','.join(map(str, measured))}}} on a {size}x{size} input")

    if out:
        frame.to_csv(os.path.join(out, 'rf.csv'), index=False)


@cli.command()
@click.option('--data', required=True, type=click.Path())
@click.option('--arch-a', type=click.Choice(['sdu', 'unet']), default='sdu', show_default=True)
@click.option('--arch-b', type=click.Choice(['sdu', 'unet']), default=None)
@click.option('--config', 'config_path', type=click.Path(), default=None)
@click.option('--k', default=5, show_default=True, type=int)
@click.option('--seed', default=None, type=click.IntRange(min=0))
@click.option('--epochs', default=None, type=int)
@click.option('--batch-size', default=None, type=int)
@click.option('--lr', 'learning_rate', default=None, type=float)
@click.option('--widths', default=None)
@click.option('--rounding', type=click.Choice(['strict', 'floor']), default=None)
@click.option('--size', default=None, type=int)
@click.option('--out', required=True, type=click.Path(file_okay=False))
@click.option('--jobs', default=1, show_default=True, type=int, help='Folds trained in parallel.')
@click.pass_context
def crossval(ctx, data, arch_a, arch_b, config_path, k, seed, epochs, batch_size, learning_rate, widths,
             rounding, size, out, jobs):
    """k-fold cross-validation, optionally comparing two architectures with a paired t-test."""
    samples = load_samples(data, size)
    shared = {'widths': parse_widths(widths), 'channel_rounding': rounding,
              'in_channels': samples.channels, 'out_channels': samples.n_classes}
    train_overrides = {'batch_size': batch_size, 'learning_rate': learning_rate, 'seed': seed}
    first, train_cfg = resolve_configs(config_path, {**shared, 'block_kind': arch_a}, train_overrides)
    second = None
    if arch_b:
        second, _ = resolve_configs(config_path, {**shared, 'block_kind': arch_b}, train_overrides)
    # Fails fast on k < 2 or too few samples, before any manifest is written
    make_folds(samples, k, train_cfg.seed)

    config = {'first': config_to_mapping(first), 'train': config_to_mapping(train_cfg)}
    if second is not None:
        config['second'] = config_to_mapping(second)
    start_manifest(ctx, os.path.join(out, MANIFEST_FILE), inputs=[data, config_path], seed=train_cfg.seed,
                   config=config, outputs={'report': os.path.join(out, 'crossval.csv'),
                                           'folds': os.path.join(out, 'folds.csv')})

    report = cross_validate(samples, first, train_cfg, k, second, out, jobs, epochs)
    click.echo(f"\n=== {k}-fold cross-validation ===")
    print_table(report.scores)
    click.echo()
    for line in report.describe():
        click.echo(line)


@cli.command()
@click.option('--data', required=True, type=click.Path())
@click.option('--k', default=5, show_default=True, type=int)
@click.option('--seed', default=0, show_default=True, type=click.IntRange(min=0))
@click.option('--out', required=True, type=click.Path(dir_okay=False), help='CSV path (id,fold).')
@click.pass_context
def folds(ctx, data, k, seed, out):
    """Write the deterministic fold assignment of a dataset."""
    samples = load_dataset(data)
    plan = make_folds(samples, k, seed)
    directory = os.path.dirname(os.path.abspath(out))
    os.makedirs(directory, exist_ok=True)
    start_manifest(ctx, f'{out}.{MANIFEST_FILE}', inputs=[data], seed=seed, outputs={'folds': out})
    plan.to_csv(out)
    click.echo(f"Wrote {k} folds of sizes {plan.sizes()} for {len(samples)} samples to {out}")


@cli.command()
@click.option('--checkpoint-a', required=True, type=click.Path())
@click.option('--checkpoint-b', required=True, type=click.Path())
@click.option('--data', required=True, type=click.Path(), help='Independent test set.')
@click.option('--threshold', default=0.5, show_default=True, type=float)
@click.option('--size', default=None, type=int)
@click.option('--out', default=None, type=click.Path(file_okay=False), help='Directory for compare.csv.')
@click.pass_context
def compare(ctx, checkpoint_a, checkpoint_b, data, threshold, size, out):
    """Independent-test comparison of two checkpoints with a per-image paired t-test."""
    first = load_checkpoint(checkpoint_a)
    second = load_checkpoint(checkpoint_b)
    samples = load_samples(data, size)
    start_manifest(ctx, resolve_manifest_path(ctx, out), inputs=[checkpoint_a, checkpoint_b, data],
                   outputs={'compare': os.path.join(out, 'compare.csv') if out else ''})

    labels = (first.model_config.arch, second.model_config.arch)
    if labels[0] == labels[1]:
        labels = (f'{labels[0]}_a', f'{labels[1]}_b')
    comparison = compare_checkpoints(first, second, samples, threshold, labels)
    click.echo(f"\n=== Independent test on {len(samples)} images ===")
    for line in comparison.describe():
        click.echo(line)
    if out:
        frame = pd.DataFrame({labels[0]: comparison.first.per_image, labels[1]: comparison.second.per_image})
        frame.rename_axis('id').reset_index().to_csv(os.path.join(out, 'compare.csv'), index=False)


@cli.command()
@click.argument('manifest_path', type=click.Path())
@click.option('--force', is_flag=True, help='Replay even if recorded inputs changed.')
@click.pass_context
def replay(ctx, manifest_path, force):
    """Re-run a command from its RunManifest."""
    manifest = RunManifest.load(manifest_path)
    command = cli.get_command(ctx, manifest.command)
    if command is None or manifest.command == 'replay':
        raise DataError(f"Manifest {manifest_path} names no replayable command ('{manifest.command}')")
    changed = manifest.changed_inputs()
    if changed and not force:
        raise DataError(f"Inputs changed since the recorded run: {', '.join(changed)}")
    click.echo(f"Replaying '{manifest.command}' from {manifest_path}")
    ctx.invoke(command, **manifest.arguments)


if __name__ == "__main__":
    cli()

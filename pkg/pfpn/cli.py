# -*- coding: utf-8 -*-

"""
cli.py: The `pfpn` Command

Subcommands: fuse, evaluate, profile, train-demo, convert, selfcheck and sweep.

Exit codes: 0 success, 1 usage error (including a malformed extent), 2 data or
validation error, 3 anything else (including a failing selfcheck).
"""

import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import click
import numpy as np

from pfpn.config import Config
from pfpn.exceptions import ArchSpecError, ContractError, DataError, DatasetValidationError, DegenerateInputError
from pfpn.fusion import FusionConfig, InstancePrediction, PanopticFusion
from pfpn.losses import Losses
from pfpn.metrics import Metrics
from pfpn.oracles import Oracles
from pfpn.panoptic_io import PanopticIO
from pfpn.profiler import ArchBuilder, Profiler
from pfpn.train_demo import DemoTrainer, TrainConfig
from pfpn.utils import Utils

__all__ = ["CliConfig", "cli", "main"]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3
DATA_ERRORS = (DataError, ContractError, DegenerateInputError, ArchSpecError)
BUILTIN_PREFIX = "builtin:"


@dataclass
class CliConfig:
    seed: int
    threads: int
    fmt: str
    config: Config


def _extent(ctx, param, value):
    if value is None:
        return None
    try:
        return Utils.parse_extent(value)
    except ValueError as err:
        raise click.BadParameter(str(err), ctx=ctx, param=param) from err


def _emit(text: str) -> None:
    click.echo(text.rstrip("\n"))


def _rows_to_csv(rows: Sequence[dict]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(package_name="panoptic-fpn-kit", prog_name="pfpn")
@click.option("--config", "config_file", type=click.Path(dir_okay=False), default=None,
              help="dotenv style settings file.")
@click.option("--seed", type=int, default=None, help="Seed for every random stream [config SEED].")
@click.option("--threads", type=click.IntRange(min=1), default=None, envvar="PFPN_THREADS",
              help="Worker threads for per-image work [PFPN_THREADS or 1].")
@click.option("--format", "fmt", type=click.Choice(Config.FORMATS), default=None,
              help="Output format [config OUTPUT_FORMAT].")
@click.option("-v", "--verbose", count=True, help="Log debug messages.")
@click.pass_context
def cli(ctx, config_file, seed, threads, fmt, verbose):
    """Panoptic FPN toolkit: fusion, evaluation, profiling and a toy training demo."""
    Utils.configure_logging(verbose)
    try:
        config = Config(config_file)
    except ValueError as err:
        raise click.UsageError(f"invalid setting: {err}") from err
    ctx.obj = CliConfig(
        seed=config.SEED if seed is None else seed,
        threads=config.PFPN_THREADS if threads is None else threads,
        fmt=config.OUTPUT_FORMAT if fmt is None else fmt,
        config=config,
    )


@cli.command()
@click.option("--instances", type=click.Path(dir_okay=False), required=True, help="Instance JSON lines.")
@click.option("--semantic", type=click.Path(dir_okay=False), required=True,
              help="Tensor file of (C, H, W) class probabilities.")
@click.option("--categories", type=click.Path(dir_okay=False), required=True, help="Category JSON.")
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Output PNG; the annotation JSON is written next to it.")
@click.option("--score-thresh", type=float, default=None, help="Default: FusionConfig.score_threshold.")
@click.option("--keep-frac", type=float, default=None, help="Default: FusionConfig.keep_fraction.")
@click.option("--stuff-area", type=int, default=None, help="Default: FusionConfig.stuff_area_min.")
@click.option("--other-id", type=int, default=0, show_default=True, help="Label of the `other` channel.")
@click.option("--channels", default=None,
              help="Comma separated category id per semantic channel; default: stuff ids ascending, "
                   "then `other` if there is one more channel.")
@click.option("--image-id", default="0", show_default=True)
@click.pass_obj
def fuse(obj: CliConfig, instances, semantic, categories, out, score_thresh, keep_frac, stuff_area, other_id,
         channels, image_id):
    """Merge instance predictions and semantic probabilities into a panoptic map."""
    table = {category.id: category.is_thing for category in PanopticIO.read_categories(categories)}
    probs = PanopticIO.read_tensor(semantic)
    if probs.ndim == 4 and probs.shape[0] == 1:
        probs = probs[0]
    if probs.ndim != 3:
        raise ContractError(f"'{semantic}' holds shape {probs.shape}, expected (C, H, W)")
    if other_id in table:
        raise ContractError(f"--other-id {other_id} collides with a category id")

    if channels is None:
        channel_categories = sorted(c for c, is_thing in table.items() if not is_thing)
        if probs.shape[0] == len(channel_categories) + 1:
            channel_categories.append(other_id)
    else:
        channel_categories = [int(value) for value in channels.split(",")]
    if len(channel_categories) != probs.shape[0]:
        raise ContractError(f"{probs.shape[0]} semantic channels but {len(channel_categories)} channel categories")

    overrides = {"score_threshold": score_thresh, "keep_fraction": keep_frac, "stuff_area_min": stuff_area}
    config = FusionConfig(other_class_id=other_id, **{k: v for k, v in overrides.items() if v is not None})
    predictions = PanopticIO.read_instances(instances, extent=probs.shape[1:])
    panoptic = PanopticFusion.panoptic_fuse(predictions, probs, config, table, channel_categories)

    out = Path(out)
    PanopticIO.write_panoptic(out.with_suffix(".json"), out, panoptic, image_id)
    things = sum(info.is_thing for info in panoptic.segments.values())
    summary = {
        "segments": len(panoptic.segments),
        "things": things,
        "stuff": len(panoptic.segments) - things,
        "void_pixels": int((panoptic.id_map == 0).sum()),
        "png": str(out),
    }
    _emit(json.dumps(summary, indent=2) if obj.fmt == "json" else
          _rows_to_csv([summary]) if obj.fmt == "csv" else
          " ".join(f"{key}={value}" for key, value in summary.items()))


@cli.command()
@click.option("--pred", "pred_json", type=click.Path(dir_okay=False), required=True, help="Prediction JSON.")
@click.option("--pred-dir", type=click.Path(file_okay=False), default=None,
              help="Prediction PNG directory [JSON path without suffix].")
@click.option("--gt", "gt_json", type=click.Path(dir_okay=False), required=True, help="Ground-truth JSON.")
@click.option("--gt-dir", type=click.Path(file_okay=False), default=None,
              help="Ground-truth PNG directory [JSON path without suffix].")
@click.pass_obj
def evaluate(obj: CliConfig, pred_json, pred_dir, gt_json, gt_dir):
    """PQ / SQ / RQ and mIoU of a prediction dataset against ground truth."""
    pred = PanopticIO.load_dataset(pred_json, pred_dir or Path(pred_json).with_suffix(""))
    gt = PanopticIO.load_dataset(gt_json, gt_dir or Path(gt_json).with_suffix(""))
    pred_ids, gt_ids = pred.image_ids(), gt.image_ids()
    if set(pred_ids) != set(gt_ids):
        missing = sorted(map(str, set(gt_ids) - set(pred_ids)))
        extra = sorted(map(str, set(pred_ids) - set(gt_ids)))
        raise DatasetValidationError(f"image ids differ: missing predictions {missing}, unexpected {extra}")

    logger.info(f"evaluating {len(gt_ids)} images")
    pairs = ((pred.annotation(annotation["image_id"]), annotation) for annotation in gt.annotations)

    def decode(pair):
        pred_annotation, gt_annotation = pair
        return pred.decode(pred_annotation)[0], gt.decode(gt_annotation)[0]

    report = Metrics.evaluate(pairs, gt.category_table, obj.threads, decode=decode)
    if obj.fmt == "json":
        _emit(json.dumps(report, indent=2))
    elif obj.fmt == "csv":
        _emit(_rows_to_csv(report["per_category"]) if report["per_category"] else "")
    else:
        _emit(Metrics.format_table(report))


@cli.command()
@click.option("--arch", default="builtin:r101-fpn", show_default=True,
              help=f"Spec file or one of {', '.join(BUILTIN_PREFIX + name for name in ArchBuilder.BUILTINS)}.")
@click.option("--image", default="1152x1728", show_default=True, callback=_extent, help="Input extent HxW.")
@click.option("--batch", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--compare", is_flag=True, help="Compare dilated, symmetric-decoder and FPN variants.")
@click.option("--per-layer", is_flag=True, help="List every layer.")
@click.pass_obj
def profile(obj: CliConfig, arch, image, batch, compare, per_layer):
    """Count multiply-adds and activations."""
    if compare:
        rows = Profiler.compare_variants(image=image, batch=batch)
        _emit(Profiler.render_rows(rows, obj.fmt))
        return
    if arch.startswith(BUILTIN_PREFIX):
        spec = ArchBuilder.build_arch(arch[len(BUILTIN_PREFIX):])
    else:
        spec = ArchBuilder.from_file(arch)
    report = Profiler.profile(spec, image, batch)
    _emit(report.render(obj.fmt, per_layer))


@cli.command("train-demo")
@click.option("--steps", type=click.IntRange(min=1), default=None, help="[config TRAIN_STEPS]")
@click.option("--lr", "learning_rate", type=float, default=None, help="[config LEARNING_RATE]")
@click.option("--lambda-i", type=float, default=None, help="[config LAMBDA_I]")
@click.option("--lambda-s", type=float, default=None, help="[config LAMBDA_S]")
@click.option("--extent", type=int, default=None, help="Scene side length [config SCENE_EXTENT]")
@click.option("--classes", "num_classes", type=int, default=None, help="[config SCENE_CLASSES]")
@click.option("--width", type=int, default=None, help="[config DEMO_WIDTH]")
@click.option("--scenes", "num_scenes", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--freeze-probe", is_flag=True, help="Keep the instance probe at its zero initialization.")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Output directory [new versioned directory under OUTPUT_DIR].")
@click.pass_obj
def train_demo(obj: CliConfig, steps, learning_rate, lambda_i, lambda_s, extent, num_classes, width, num_scenes,
               freeze_probe, out):
    """Overfit the semantic branch on toy scenes; writes losses.csv and a checkpoint."""
    config = TrainConfig.from_config(
        obj.config, steps=steps, learning_rate=learning_rate, lambda_i=lambda_i, lambda_s=lambda_s, seed=obj.seed,
        extent=extent, num_classes=num_classes, width=width, num_scenes=num_scenes,
        train_probe=False if freeze_probe else None,
    )
    trainer = DemoTrainer(config, threads=obj.threads)
    output_dir = trainer.run(output_dir=out, output_root=obj.config.OUTPUT_DIR)
    summary = {
        "steps": config.steps,
        "final_loss": trainer.history["loss"][-1],
        "final_miou": trainer.history["miou"][-1],
        "output_dir": str(output_dir),
    }
    _emit(json.dumps(summary, indent=2) if obj.fmt == "json" else
          _rows_to_csv([summary]) if obj.fmt == "csv" else
          " ".join(f"{key}={value}" for key, value in summary.items()))


@cli.command()
@click.argument("source", type=click.Path(dir_okay=False))
@click.argument("target", type=click.Path(dir_okay=False))
@click.option("--category", type=int, default=None, help="Category of masks converted to instances.")
@click.option("--score", type=float, default=1.0, show_default=True, help="Score of masks converted to instances.")
@click.pass_obj
def convert(obj: CliConfig, source, target, category, score):
    """
    Convert between id PNGs, instance JSON lines and tensor files (by suffix):
    .png <-> .ptsr (id map), .jsonl <-> .ptsr (stack of instance masks).
    """
    source, target = Path(source), Path(target)
    kinds = (source.suffix.lower(), target.suffix.lower())
    if kinds == (".png", ".ptsr"):
        PanopticIO.write_tensor(target, PanopticIO.read_id_png(source).astype(np.float32))
    elif kinds == (".ptsr", ".png"):
        values = PanopticIO.read_tensor(source)
        if values.ndim != 2 or np.any(values < 0) or np.any(values != np.round(values)):
            raise ContractError(f"'{source}' is not a 2-D map of non-negative integer ids")
        PanopticIO.write_id_png(target, values.astype(np.int64))
    elif kinds == (".jsonl", ".ptsr"):
        instances = PanopticIO.read_instances(source)
        if not instances:
            raise ContractError(f"'{source}' has no instances; the mask extent is unknown")
        PanopticIO.write_tensor(target, np.stack([instance.mask for instance in instances]).astype(np.float32))
    elif kinds == (".ptsr", ".jsonl"):
        if category is None:
            raise click.UsageError("--category is required when writing instances")
        masks = PanopticIO.read_tensor(source)
        if masks.ndim != 3:
            raise ContractError(f"'{source}' holds shape {masks.shape}, expected (N, H, W) masks")
        PanopticIO.write_instances(target, [InstancePrediction(mask > 0.5, category, score) for mask in masks])
    else:
        raise click.UsageError(f"cannot convert {kinds[0] or 'no suffix'} to {kinds[1] or 'no suffix'}")
    logger.info(f"wrote {target}")


@cli.command()
@click.option("--cases", type=click.IntRange(min=1), default=100, show_default=True, help="Random cases per suite.")
@click.option("--suite", "suites", multiple=True, help="Run only these suites (repeatable).")
@click.pass_obj
def selfcheck(obj: CliConfig, cases, suites):
    """Compare the fast implementations against their slow references."""
    try:
        results = Oracles.selfcheck(obj.seed, cases, suites or None)
    except ValueError as err:
        raise click.UsageError(str(err)) from err
    rows = [result.to_dict() for result in results]
    if obj.fmt == "json":
        _emit(json.dumps(rows, indent=2))
    elif obj.fmt == "csv":
        _emit(_rows_to_csv(rows))
    else:
        for row in rows:
            status = "pass" if row["passed"] else "FAIL"
            _emit(f"{row['suite']:<18} {status}  cases={row['cases']} max_error={row['max_error']:.2e} "
                  f"{row['detail']}".rstrip())
    return EXIT_OK if all(result.passed for result in results) else EXIT_INTERNAL


@cli.command()
@click.option("--grid", default=None, help="Comma separated lambda values [config LAMBDA_GRID].")
@click.option("--steps", type=click.IntRange(min=1), default=None, help="Steps per run [config TRAIN_STEPS].")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV file [stdout].")
@click.pass_obj
def sweep(obj: CliConfig, grid, steps, out):
    """Train the toy task once per (lambda_i, lambda_s) pair."""
    if grid is None:
        values = obj.config.LAMBDA_GRID
    else:
        try:
            values = [float(value) for value in grid.split(",")]
        except ValueError as err:
            raise click.BadParameter(str(err), param_hint="--grid") from err
    config = TrainConfig.from_config(obj.config, steps=steps, seed=obj.seed)
    rows = DemoTrainer.sweep(config, Losses.grid(values), obj.threads)
    if out is None:
        buffer = io.StringIO()
        Losses.write_sweep_csv(buffer, rows)
        _emit(buffer.getvalue())
    else:
        Losses.write_sweep_csv(out, rows)
        logger.info(f"wrote {len(rows)} sweep rows to {out}")


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and map errors onto exit codes."""
    try:
        result = cli.main(args=argv, prog_name="pfpn", standalone_mode=False)
    except click.UsageError as err:
        err.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except click.ClickException as err:
        err.show()
        return EXIT_DATA
    except FileNotFoundError as err:
        logger.error(str(err))
        return EXIT_DATA
    except DATA_ERRORS as err:
        logger.error(f"{type(err).__name__}: {err}")
        return EXIT_DATA
    except Exception:
        logger.exception("internal error")
        return EXIT_INTERNAL
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

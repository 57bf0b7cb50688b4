import contextlib
import functools
import logging
import os
from pathlib import Path
import sys
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

import click

from vitkd.module.data.attn_export import attn_export
from vitkd.module.data.checkpoint import checkpoint_load
from vitkd.module.data.dataset import load_splits, normalize
from vitkd.module.experiment.ablation import parse_axis, preset_axes, run_ablation
from vitkd.module.experiment.grad_audit import AUDIT_TARGETS, run_grad_audit
from vitkd.module.tensor.tensor import no_grad
from vitkd.module.train.trainer import (EvalReport, build_model, distill_student,
                                        evaluate_checkpoint, train_teacher)
from vitkd.module.vit.vision_transformer import attention_average, diagonal_mass
from vitkd.util.errors import ConfigError, NumericError, VitkdError
from vitkd.util.export_utils import create_and_write, read_json
from vitkd.util.run_config import RunConfig, echo_run_config, load_run_config


@contextlib.contextmanager
def exit_codes() -> Iterator[None]:
    """
    Turn package errors into `error: ...` on stderr and their exit code
    (plain OS errors exit with 3)
    """
    try:
        yield
    except VitkdError as error:
        click.echo(F"error: {error}", err=True)
        sys.exit(error.exit_code)
    except OSError as error:
        click.echo(F"error: {error}", err=True)
        sys.exit(3)


def run_options(command: Callable[..., None]) -> Callable[..., None]:
    """
    Options shared by every command that resolves a run config
    """

    @click.option('--config', 'config_path',
                  type=click.Path(dir_okay=False),
                  default=None,
                  help='JSON run config (defaults are used for missing keys)')
    @click.option('--set', 'overrides',
                  multiple=True,
                  help='Override a config value: dotted.key=value (value parsed as JSON)')
    @click.option('--out', 'out_dir',
                  type=click.Path(file_okay=False),
                  default=None,
                  help='Output directory (overrides out_dir)')
    @click.option('--seed',
                  type=int,
                  default=None,
                  help='Shorthand for --set train.seed=N')
    @functools.wraps(command)
    def wrapper(config_path: Optional[str], overrides: Tuple[str, ...],
                out_dir: Optional[str], seed: Optional[int], **kwargs: Any) -> None:
        with exit_codes():
            cfg = load_run_config(config_path, overrides, seed, out_dir)
            command(cfg, **kwargs)

    return wrapper


def _update_eval(cfg: RunConfig, key: str, report: EvalReport) -> None:
    path = str(Path(cfg.out_dir) / "eval.json")
    results: Dict[str, Any] = read_json(path) if os.path.isfile(path) else {}
    results[key] = report.as_dict()
    create_and_write(results, path)


@click.group(invoke_without_command=True, no_args_is_help=True)
@click.option('-v', '--verbose', is_flag=True, default=False, help='Debug logging')
def vitkd(verbose: bool) -> None:
    """
    ViT knowledge distillation lab. Trains a teacher ViT, distills a student
    with shallow-layer mimicking and deep-layer masked generation, runs loss and
    layer ablations, dumps attention maps and audits every gradient rule.

    All training commands take a JSON config, `--set` overrides, and write
    the resolved config to the output directory.
    """
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


@vitkd.command(name='train-teacher', short_help='Train the teacher with cross-entropy')
@run_options
def cmd_train_teacher(cfg: RunConfig) -> None:
    """
    Train the teacher and write teacher.vkd1, teacher_metrics.jsonl and eval.json
    """
    echo_run_config(cfg)
    train, test = load_splits(cfg.data)
    run = train_teacher(train, test, cfg.teacher, cfg.train,
                        checkpoint_path=cfg.teacher_path(),
                        metrics_path=str(Path(cfg.out_dir) / "teacher_metrics.jsonl"))
    _update_eval(cfg, "teacher", run.report)
    click.echo(F"teacher top1 {run.report.top1:.4f} top5 {run.report.top5:.4f}")


@vitkd.command(name='distill', short_help='Distill the student from a trained teacher')
@run_options
def cmd_distill(cfg: RunConfig) -> None:
    """
    Distill the student against the frozen teacher checkpoint and write student.vkd1,
    student_metrics.jsonl (one loss breakdown per step) and eval.json
    """
    teacher = checkpoint_load(cfg.teacher_path())
    echo_run_config(cfg)
    train, test = load_splits(cfg.data)
    run = distill_student(train, test, teacher, cfg.student, cfg.distill, cfg.train,
                          teacher_cfg=cfg.teacher,
                          checkpoint_path=str(Path(cfg.out_dir) / "student.vkd1"),
                          metrics_path=str(Path(cfg.out_dir) / "student_metrics.jsonl"))
    first = run.records[0].losses
    _update_eval(cfg, "student", run.report)
    click.echo(F"step 1: l_ori {first.l_ori:.4f} l_mimic {first.l_mimic:.4f} "
               F"l_gen {first.l_gen:.4f} l_kd {first.l_kd:.4f}")
    click.echo(F"student top1 {run.report.top1:.4f} top5 {run.report.top5:.4f}")


@vitkd.command(name='ablate', short_help='Run a grid of distillation variants over seeds')
@run_options
@click.option('--grid', 'preset',
              default='losses',
              help='Grid preset: losses, layers, alpha, beta, deep-method, gen-block, '
                   'mimic-method, tap-source')
@click.option('--axis', 'axes',
              multiple=True,
              help='Custom grid axis dotted.key=[v1, v2] (replaces the preset)')
@click.option('--seeds',
              multiple=True,
              type=int,
              default=(0, 1, 2),
              help='Seeds every cell is repeated with')
def cmd_ablate(cfg: RunConfig, preset: str, axes: Tuple[str, ...], seeds: Tuple[int, ...]) -> None:
    """
    Distill one student per grid cell and seed; write ablation_runs.csv,
    ablation_means.csv and ablation.txt. Trains the teacher first when its
    checkpoint does not exist yet
    """
    grid: Dict[str, List[Any]] = {}
    for axis in axes:
        grid.update(parse_axis(axis))
    if not axes:
        grid = preset_axes(preset, cfg)
    echo_run_config(cfg)
    train, test = load_splits(cfg.data)
    if os.path.isfile(cfg.teacher_path()):
        teacher = checkpoint_load(cfg.teacher_path())
    else:
        logging.info("No teacher at %s, training one", cfg.teacher_path())
        teacher = train_teacher(train, test, cfg.teacher, cfg.train,
                                checkpoint_path=cfg.teacher_path()).checkpoint
    report = run_ablation(cfg, grid, list(seeds), teacher, train, test)
    report.write(cfg.out_dir)
    click.echo(report.to_text())


def _parse_layers(text: str, depth: int) -> List[int]:
    if text == "all":
        return list(range(depth))
    try:
        layers = [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise ConfigError(F"--layers must be 'all' or comma-separated indices, got {text!r}") \
            from None
    invalid = [layer for layer in layers if not 0 <= layer < depth]
    if invalid or not layers:
        raise ConfigError(F"invalid layer index {invalid or text} for depth {depth}")
    return layers


@vitkd.command(name='attn-dump', short_help='Export averaged attention maps per layer')
@run_options
@click.option('--checkpoint', 'checkpoint_path',
              type=click.Path(dir_okay=False),
              default=None,
              help='Model checkpoint (the teacher checkpoint by default)')
@click.option('--layers', default='all', help="'all' or comma-separated layer indices")
@click.option('--samples', default=64, type=int, help='Test samples to average over')
def cmd_attn_dump(cfg: RunConfig, checkpoint_path: Optional[str], layers: str,
                  samples: int) -> None:
    """
    Average attention over heads and samples for every requested layer, write
    attn/layer{i}.csv, attn/layer{i}.pgm and attn/diag_mass.json
    """
    ckpt = checkpoint_load(checkpoint_path or cfg.teacher_path())
    model, stats = build_model(ckpt, cfg.teacher)
    selected = _parse_layers(layers, model.config.depth)
    if samples < 1:
        raise ConfigError("--samples must be >= 1")
    _, test = load_splits(cfg.data)
    images = normalize(test.images[:samples], *stats)
    with no_grad():
        output = model(images, return_attention=True)

    attn_dir = Path(cfg.out_dir) / "attn"
    masses = []
    for layer in selected:
        average = attention_average(output.attentions, layer)
        attn_export(average, str(attn_dir / F"layer{layer}"))
        masses.append(diagonal_mass(average))
        click.echo(F"layer {layer}: diagonal mass {masses[-1]:.4f}")
    create_and_write({"layers": selected, "diag_mass": masses},
                     str(attn_dir / "diag_mass.json"), sort_keys=False)
    if len(masses) > 1 and masses[0] <= masses[-1]:
        logging.warning("Diagonal attention mass does not decrease from layer %d to layer %d",
                        selected[0], selected[-1])


@vitkd.command(name='grad-check', short_help='Audit analytic gradients with finite differences')
@click.option('--target', 'targets',
              multiple=True,
              type=click.Choice(list(AUDIT_TARGETS)),
              help='Audit only these targets (all by default)')
@click.option('--tol', default=1e-3, type=float, help='Max relative error to pass')
@click.option('--seed', default=0, type=int, help='Seed of the random instances')
def cmd_grad_check(targets: Tuple[str, ...], tol: float, seed: int) -> None:
    """
    Compare backward passes of every op, loss, generative block and the encoder
    layer against central differences; exit 4 when any target fails
    """
    with exit_codes():
        reports = run_grad_audit(targets or None, seed=seed, tol=tol)
        for report in reports:
            status = "ok" if report.passed else "FAIL"
            click.echo(F"{report.name:<22} max rel error {report.max_rel_error:.3e} "
                       F"worst {report.worst_input}{list(report.worst_index)} {status}")
        failed = [report.name for report in reports if not report.passed]
        if failed:
            raise NumericError(F"gradient audit failed for {failed}")


@vitkd.command(name='eval', short_help='Evaluate a checkpoint on the test split')
@run_options
@click.option('--checkpoint', 'checkpoint_path',
              type=click.Path(dir_okay=False),
              required=True,
              help='Checkpoint to evaluate (its config sidecar gives the model shape)')
def cmd_eval(cfg: RunConfig, checkpoint_path: str) -> None:
    """
    Top-1/top-5 of a checkpoint on the configured test split, recorded in eval.json
    """
    ckpt = checkpoint_load(checkpoint_path)
    _, test = load_splits(cfg.data)
    report = evaluate_checkpoint(ckpt, test, cfg.student)
    _update_eval(cfg, Path(checkpoint_path).stem, report)
    click.echo(F"{checkpoint_path}: top1 {report.top1:.4f} top5 {report.top5:.4f}")


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    vitkd()

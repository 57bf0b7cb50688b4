from dataclasses import dataclass, replace
import hashlib
import itertools
import json
import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from joblib import Parallel, delayed
import pandas as pd
from tqdm import tqdm

from vitkd.module.data.checkpoint import Checkpoint
from vitkd.module.data.dataset import Dataset
from vitkd.module.train.trainer import distill_student
from vitkd.util.errors import ConfigError
from vitkd.util.pipeline import progress_enabled, thread_count
from vitkd.util.run_config import RunConfig, apply_overrides, parse_override

# Grid axes: dotted config key -> values to try
Axes = Dict[str, List[Any]]


def _layer_sets(cfg: RunConfig) -> Axes:
    depth = cfg.student.depth
    candidates = [[0], [0, 1], [depth // 2], list(range(depth - 1))]
    unique: List[List[int]] = []
    for layers in candidates:
        if layers and max(layers) < depth - 1 and layers not in unique:
            unique.append(layers)
    return {"distill.shallow_layers": unique}


GRID_PRESETS: Dict[str, Callable[[RunConfig], Axes]] = {
    "losses": lambda cfg: {"distill.alpha": [0.0, 3e-5], "distill.beta": [0.0, 3e-6]},
    "layers": _layer_sets,
    "alpha": lambda cfg: {"distill.alpha": [2e-5, 3e-5, 4e-5, 5e-5, 6e-5]},
    "beta": lambda cfg: {"distill.beta": [1e-6, 2e-6, 3e-6, 4e-6, 5e-6]},
    "deep-method": lambda cfg: {"distill.deep_method": ["GENERATION", "LINEAR", "CORRELATION"]},
    "gen-block": lambda cfg: {"distill.gen_block": ["CONV", "SELF_ATTN", "CROSS_ATTN"]},
    "mimic-method": lambda cfg: {"distill.mimic_method": ["LINEAR", "CORRELATION"]},
    "tap-source": lambda cfg: {"distill.tap_source": ["FFN_OUT", "MHA_OUT"]},
}


def preset_axes(name: str, cfg: RunConfig) -> Axes:
    if name not in GRID_PRESETS:
        raise ConfigError(F"unknown grid preset {name!r}, known: {sorted(GRID_PRESETS)}")
    return GRID_PRESETS[name](cfg)


def parse_axis(axis: str) -> Axes:
    """
    :param axis: `dotted.key=[v1, v2, ...]` (JSON list)
    :return: single-axis grid
    """
    keys, values = parse_override(axis)
    if not isinstance(values, list) or not values:
        raise ConfigError(F"grid axis {axis!r} needs a non-empty JSON list of values")
    return {".".join(keys): values}


def expand_grid(axes: Axes) -> List[Dict[str, Any]]:
    """
    Cartesian product of the axes, in axis order
    :param axes: key -> values
    :return: one dict per cell
    """
    if not axes:
        return [{}]
    keys = list(axes)
    return [dict(zip(keys, combination)) for combination in itertools.product(*axes.values())]


def cell_label(cell: Dict[str, Any]) -> str:
    if not cell:
        return "default"
    return ", ".join(F"{key.rsplit('.', 1)[-1]}={json.dumps(value)}" for key, value in cell.items())


@dataclass
class AblationRun:
    cell_index: int
    cell: Dict[str, Any]
    seed: int
    slug: str
    config: RunConfig


def plan_ablation(base: RunConfig, axes: Axes, seeds: Sequence[int]) -> List[AblationRun]:
    """
    One run per cell per seed. A seed drives the student init and the
    data/mask streams of its run
    :param base: resolved config every cell starts from
    :param axes: grid
    :param seeds: seeds to repeat every cell with
    """
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    runs = []
    for cell_index, cell in enumerate(expand_grid(axes)):
        overrides = [F"{key}={json.dumps(value)}" for key, value in cell.items()]
        cell_hash = hashlib.md5(cell_label(cell).encode()).hexdigest()[:8]
        for seed in seeds:
            slug = F"cell_{cell_index:03d}_{cell_hash}_seed{seed}"
            cfg = apply_overrides(base, overrides + [F"train.seed={seed}", F"student.seed={seed}"])
            cfg = replace(cfg, out_dir=str(Path(base.out_dir) / "ablation" / slug))
            cfg.validate()
            runs.append(AblationRun(cell_index, cell, seed, slug, cfg))
    return runs


def _execute(run: AblationRun, teacher: Checkpoint, train: Dataset,
             test: Dataset) -> Dict[str, Any]:
    cfg = run.config
    result = distill_student(train, test, teacher, cfg.student, cfg.distill, cfg.train,
                             teacher_cfg=cfg.teacher)
    first = result.records[0].losses
    row: Dict[str, Any] = {"cell": cell_label(run.cell), "seed": run.seed, "slug": run.slug}
    row.update({key: json.dumps(value) if isinstance(value, list) else value
                for key, value in run.cell.items()})
    row.update({"top1": result.report.top1,
                "top5": result.report.top5,
                "l_mimic_first": first.l_mimic,
                "l_gen_first": first.l_gen,
                "total_last": result.records[-1].losses.total})
    return row


@dataclass
class AblationReport:
    """
    Per-run table, per-cell means, and the loss-ordering verdict when the grid
    contains the mimic-only, generation-only and combined cells
    """

    runs: pd.DataFrame
    means: pd.DataFrame
    ordering_ok: Optional[bool] = None

    def to_text(self) -> str:
        lines = ["Runs", self.runs.to_string(index=False), "", "Per-cell means",
                 self.means.to_string(index=False)]
        if len(self.means) > 1:
            spread = self.means["top1_mean"].max() - self.means["top1_mean"].min()
            lines.append(F"top1 spread across cells: {spread:.4f}")
        if self.ordering_ok is not None:
            verdict = "holds" if self.ordering_ok else "FAILS"
            lines.append(F"loss ordering (mimic+gen >= each single loss, >= baseline - 0.005): "
                         F"{verdict}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str) -> None:
        """
        :param out_dir: receives ablation_runs.csv, ablation_means.csv, ablation.txt
        """
        os.makedirs(out_dir, exist_ok=True)
        self.runs.to_csv(Path(out_dir) / "ablation_runs.csv", index=False)
        self.means.to_csv(Path(out_dir) / "ablation_means.csv", index=False)
        with open(Path(out_dir) / "ablation.txt", "w", encoding="utf-8") as fout:
            fout.write(self.to_text())


def summarize(runs: pd.DataFrame) -> pd.DataFrame:
    """
    :return: one row per cell (grid order) with mean/std accuracies and run count
    """
    return runs.groupby("cell", sort=False).agg(
        top1_mean=("top1", "mean"),
        top1_std=("top1", "std"),
        top5_mean=("top5", "mean"),
        runs=("seed", "count")).reset_index()


def loss_ordering(runs: pd.DataFrame, cells: List[Dict[str, Any]]) -> Optional[bool]:
    """
    Mean top-1 of the combined cell must reach each single-loss cell and the
    baseline minus half a point
    :return: verdict, None when the grid lacks the needed cells
    """
    roles: Dict[str, str] = {}
    for cell in cells:
        alpha, beta = cell.get("distill.alpha"), cell.get("distill.beta")
        if alpha is None or beta is None:
            return None
        role = {(True, True): "both", (True, False): "mimic", (False, True): "gen",
                (False, False): "baseline"}[(alpha > 0, beta > 0)]
        roles.setdefault(role, cell_label(cell))
    if not {"both", "mimic", "gen"} <= set(roles):
        return None
    means = runs.groupby("cell")["top1"].mean()
    both = means[roles["both"]]
    ok = both >= means[roles["mimic"]] and both >= means[roles["gen"]]
    if "baseline" in roles:
        ok = ok and both >= means[roles["baseline"]] - 0.005
    return bool(ok)


def run_ablation(base: RunConfig, axes: Axes, seeds: Sequence[int], teacher: Checkpoint,
                 train: Dataset, test: Dataset, workers: Optional[int] = None) -> AblationReport:
    """
    Distill one student per cell and seed against the same frozen teacher
    :param base: resolved config
    :param axes: grid
    :param seeds: seeds per cell
    :param teacher: trained teacher checkpoint
    :param train: training split
    :param test: held-out split
    :param workers: parallel processes, VITKD_THREADS when None
    """
    plan = plan_ablation(base, axes, seeds)
    workers = thread_count() if workers is None else max(1, workers)
    logging.info("Ablation: %d cells x %d seeds = %d runs, %d worker(s)",
                 len(plan) // len(seeds), len(seeds), len(plan), workers)
    if workers > 1:
        rows = Parallel(n_jobs=workers)(delayed(_execute)(run, teacher, train, test)
                                        for run in plan)
    else:
        rows = []
        progress = tqdm(plan, desc="Ablation", disable=not progress_enabled())
        for run in progress:
            progress.set_postfix_str(run.slug)
            rows.append(_execute(run, teacher, train, test))
    runs = pd.DataFrame(rows)
    ordering = loss_ordering(runs, expand_grid(axes))
    if ordering is False:
        logging.warning("Loss ordering check failed: mimic+gen does not reach every "
                        "single-loss variant (or the baseline) on mean top-1")
    return AblationReport(runs=runs, means=summarize(runs), ordering_ok=ordering)

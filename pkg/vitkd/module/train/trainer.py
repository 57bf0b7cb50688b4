from dataclasses import asdict, dataclass, field
import logging
import math
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, top_k_accuracy_score
from tqdm import tqdm

from vitkd.module.data.checkpoint import Checkpoint, checkpoint_save
from vitkd.module.data.dataset import Dataset, channel_stats, normalize
from vitkd.module.distill.distill_losses import (DistillConfig, LossBreakdown, cross_entropy)
from vitkd.module.distill.distiller import ViTKDDistiller
from vitkd.module.tensor.layers import Module
from vitkd.module.tensor.tensor import Tape, no_grad
from vitkd.module.train.optim import AdamW, cosine_lr
from vitkd.module.vit.vision_transformer import ModelOutput, ViTConfig, VisionTransformer
from vitkd.util.errors import ConfigError, ContractError, NumericError, TokenGridError
from vitkd.util.export_utils import jsonable, write_jsonl
from vitkd.util.pipeline import progress_enabled

# Checkpoint entries that are not model parameters
PIXEL_MEAN_KEY = "data.pixel_mean"
PIXEL_STD_KEY = "data.pixel_std"

# Independent random streams spawned from TrainConfig.seed
DATA_STREAM, DISTILL_INIT_STREAM, MASK_STREAM = range(3)

PixelStats = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization schedule of one training run
    """

    epochs: int = 10
    batch_size: int = 64
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    warmup_steps: Optional[int] = None  # None: 5% of all steps
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    label_smoothing: float = 0.1
    hflip: bool = True
    seed: int = 0
    eval_every: int = 1  # epochs between evaluations, the last epoch is always evaluated
    select_best: bool = False

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train: epochs and batch_size must be >= 1")
        if self.lr_min > self.lr_max or self.lr_min < 0:
            raise ConfigError(F"train: need 0 <= lr_min <= lr_max, got {self.lr_min}, "
                              F"{self.lr_max}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("train: warmup_steps must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0 or self.weight_decay < 0:
            raise ConfigError("train: label_smoothing must lie in [0, 1), weight_decay >= 0")
        if self.eval_every < 1:
            raise ConfigError("train: eval_every must be >= 1")

    def steps_per_epoch(self, samples: int) -> int:
        return math.ceil(samples / self.batch_size)

    def resolved_warmup(self, total_steps: int) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(0.05 * total_steps))

    def streams(self) -> List[np.random.Generator]:
        """
        :return: generators for data order/flips, distiller init and masks
        """
        return [np.random.default_rng(sequence)
                for sequence in np.random.SeedSequence(self.seed).spawn(3)]


@dataclass
class EvalReport:
    top1: float
    top5: float
    samples: int

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainRecord:
    """
    One optimizer step; eval accuracies are present on evaluated steps only
    """

    step: int
    epoch: int
    losses: LossBreakdown
    lr: float
    train_acc: float
    top1: Optional[float] = None
    top5: Optional[float] = None

    def to_line(self) -> Dict[str, Any]:
        """
        :return: flat record for the metrics file
        """
        line: Dict[str, Any] = {"step": self.step, "epoch": self.epoch}
        line.update(self.losses.as_dict())
        line.update({"lr": self.lr, "top1": self.top1, "top5": self.top5,
                     "train_acc": self.train_acc})
        return line


@dataclass
class TrainRun:
    """
    Result of a training run: trained model, per-step records, final report, checkpoint
    """

    model: VisionTransformer
    records: List[TrainRecord]
    report: EvalReport
    checkpoint: Checkpoint
    stats: PixelStats
    extras: Dict[str, Module] = field(default_factory=dict)


class BatchLoader:
    """
    Deterministic shuffled mini-batches with optional horizontal flips and
    per-channel normalization; the order depends on the generator only
    """

    def __init__(self, data: Dataset, batch_size: int, rng: np.random.Generator,
                 stats: PixelStats, hflip: bool = False):
        self._data = data
        self._batch_size = batch_size
        self._rng = rng
        self._stats = stats
        self._hflip = hflip

    def __len__(self) -> int:
        return math.ceil(len(self._data) / self._batch_size)

    def epoch(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        order = self._rng.permutation(len(self._data))
        for start in range(0, len(order), self._batch_size):
            indices = order[start:start + self._batch_size]
            images = self._data.images[indices]
            if self._hflip:
                flips = self._rng.random(len(indices)) < 0.5
                images[flips] = images[flips][..., ::-1]
            yield normalize(images, *self._stats), self._data.labels[indices]


def evaluate(model: VisionTransformer, data: Dataset, stats: PixelStats,
             batch_size: int = 256) -> EvalReport:
    """
    Top-1/top-5 accuracy over a held-out split, without gradients
    :param model: classifier
    :param data: split to score
    :param stats: pixel normalization of the training data
    :param batch_size: forward batch size
    """
    if len(data) == 0:
        raise ContractError("evaluation needs a non-empty split")
    classes = model.config.num_classes
    scores = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            images = normalize(data.images[start:start + batch_size], *stats)
            scores.append(model(images).logits.data)
    logits = np.concatenate(scores).astype(np.float64)
    top1 = accuracy_score(data.labels, logits.argmax(axis=1))
    top5 = 1.0 if classes <= 5 else top_k_accuracy_score(
        data.labels, logits, k=5, labels=np.arange(classes))
    return EvalReport(top1=float(top1), top5=float(top5), samples=len(data))


def model_checkpoint(model: VisionTransformer, stats: PixelStats,
                     config: Dict[str, Any]) -> Checkpoint:
    tensors = model.state_dict()
    tensors[PIXEL_MEAN_KEY], tensors[PIXEL_STD_KEY] = stats
    echo = {"model": asdict(model.config)}
    echo.update(config)
    return Checkpoint(tensors=tensors, config=echo)


def build_model(ckpt: Checkpoint,
                fallback: Optional[ViTConfig] = None) -> Tuple[VisionTransformer, PixelStats]:
    """
    Rebuild a model from a checkpoint
    :param ckpt: loaded checkpoint
    :param fallback: model config used when the checkpoint carries no config echo
    :return: model with the stored parameters and its pixel statistics
    """
    if "model" in ckpt.config:
        cfg = ViTConfig(**ckpt.config["model"])
    elif fallback is not None:
        cfg = fallback
    else:
        raise ConfigError("checkpoint has no model config and none was given")
    model = VisionTransformer(cfg)
    model.load_state_dict({name: value for name, value in ckpt.tensors.items()
                           if not name.startswith("data.")})
    if PIXEL_MEAN_KEY in ckpt.tensors:
        stats = (ckpt.tensors[PIXEL_MEAN_KEY], ckpt.tensors[PIXEL_STD_KEY])
    else:
        stats = (np.zeros(3, dtype=np.float32), np.ones(3, dtype=np.float32))
    return model, stats


def evaluate_checkpoint(ckpt: Checkpoint, data: Dataset,
                        fallback: Optional[ViTConfig] = None) -> EvalReport:
    model, stats = build_model(ckpt, fallback)
    return evaluate(model, data, stats)


# Computes the loss breakdown (with its objective) of one batch
Objective = Callable[[np.ndarray, np.ndarray, ModelOutput], LossBreakdown]


def _fit(model: VisionTransformer,
         extras: Dict[str, Module],
         objective: Objective,
         train: Dataset,
         test: Dataset,
         cfg: TrainConfig,
         data_rng: np.random.Generator,
         label: str) -> Tuple[List[TrainRecord], EvalReport, PixelStats]:
    cfg.validate()
    if len(train) == 0:
        raise ContractError("training needs a non-empty split")
    stats = channel_stats(train.images)
    loader = BatchLoader(train, cfg.batch_size, data_rng, stats, cfg.hflip)
    named = list(model.named_parameters())
    for prefix, module in extras.items():
        named.extend(module.named_parameters(F"{prefix}."))
    optimizer = AdamW(named, cfg.betas, cfg.eps, cfg.weight_decay)
    total_steps = cfg.epochs * len(loader)

    records: List[TrainRecord] = []
    best: Optional[Tuple[float, Dict[str, np.ndarray]]] = None
    report: Optional[EvalReport] = None
    step = 0
    progress = tqdm(total=total_steps, desc=label, disable=not progress_enabled())
    for epoch in range(cfg.epochs):
        for images, labels in loader.epoch():
            lr = cosine_lr(step, cfg, total_steps)
            with Tape() as tape:
                output = model(images)
                losses = objective(images, labels, output)
                if not np.isfinite(losses.total):
                    raise NumericError(F"{label}: non-finite loss at step {step + 1}")
                tape.backward(losses.objective)
            optimizer.step(lr)
            optimizer.zero_grad()
            step += 1
            train_acc = float(np.mean(output.logits.data.argmax(axis=1) == labels))
            records.append(TrainRecord(step=step, epoch=epoch, losses=losses, lr=lr,
                                       train_acc=train_acc))
            progress.update()
            progress.set_postfix_str(F"loss={losses.total:.4f} lr={lr:.2e}")

        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            report = evaluate(model, test, stats)
            records[-1].top1, records[-1].top5 = report.top1, report.top5
            logging.info("%s epoch %d: top1 %.4f top5 %.4f", label, epoch, report.top1,
                         report.top5)
            if cfg.select_best and (best is None or report.top1 > best[0]):
                best = (report.top1, model.state_dict())
    progress.close()

    if cfg.select_best and best is not None:
        model.load_state_dict(best[1])
        report = evaluate(model, test, stats)
    return records, report, stats


def train_supervised(model_cfg: ViTConfig, train: Dataset, test: Dataset, cfg: TrainConfig,
                     label: str = "baseline") -> TrainRun:
    """
    Plain cross-entropy training of a freshly initialized model
    :param model_cfg: model shape and init seed
    :param train: training split
    :param test: held-out split
    :param cfg: optimization schedule
    :param label: progress/log label
    """
    model = VisionTransformer(model_cfg)
    data_rng = cfg.streams()[DATA_STREAM]

    def objective(images: np.ndarray, labels: np.ndarray, output: ModelOutput) -> LossBreakdown:
        l_ori = cross_entropy(output.logits, labels, cfg.label_smoothing)
        value = float(l_ori.data)
        return LossBreakdown(l_ori=value, l_mimic=0.0, l_gen=0.0, l_kd=0.0, total=value,
                             objective=l_ori)

    records, report, stats = _fit(model, {}, objective, train, test, cfg, data_rng, label)
    ckpt = model_checkpoint(model, stats, {"train": asdict(cfg)})
    return TrainRun(model=model, records=records, report=report, checkpoint=ckpt, stats=stats)


def train_teacher(train: Dataset, test: Dataset, model_cfg: ViTConfig, cfg: TrainConfig,
                  checkpoint_path: Optional[str] = None,
                  metrics_path: Optional[str] = None) -> TrainRun:
    """
    Train the teacher with cross-entropy and persist checkpoint and metrics
    :param checkpoint_path: .vkd1 target, skipped when None
    :param metrics_path: .jsonl target, skipped when None
    """
    run = train_supervised(model_cfg, train, test, cfg, label="teacher")
    _persist(run, checkpoint_path, metrics_path)
    return run


def distill_student(train: Dataset,
                    test: Dataset,
                    teacher_ckpt: Checkpoint,
                    student_cfg: ViTConfig,
                    distill_cfg: DistillConfig,
                    cfg: TrainConfig,
                    teacher_cfg: Optional[ViTConfig] = None,
                    checkpoint_path: Optional[str] = None,
                    metrics_path: Optional[str] = None) -> TrainRun:
    """
    Train the student with L_ori + alpha L_mimic + beta L_gen (+ logit KD) against a
    frozen teacher. With alpha = beta = 0 and KD off this is step-for-step the
    baseline run of `train_supervised` with the same config
    :param teacher_ckpt: trained teacher
    :param student_cfg: student shape and init seed
    :param distill_cfg: distillation setup
    :param cfg: optimization schedule
    :param teacher_cfg: teacher shape when the checkpoint has no config echo
    """
    teacher, _ = build_model(teacher_ckpt, teacher_cfg)
    if teacher.config.num_patches != student_cfg.num_patches:
        raise TokenGridError(F"teacher has {teacher.config.num_patches} patch tokens, "
                             F"student has {student_cfg.num_patches}")
    teacher.freeze()
    student = VisionTransformer(student_cfg)
    data_rng, init_rng, mask_rng = cfg.streams()
    distiller = ViTKDDistiller(distill_cfg, student_cfg, teacher.config, init_rng)

    def objective(images: np.ndarray, labels: np.ndarray, output: ModelOutput) -> LossBreakdown:
        with no_grad():
            teacher_output = teacher(images)
        l_ori = cross_entropy(output.logits, labels, cfg.label_smoothing)
        return distiller(output, teacher_output, l_ori, mask_rng)

    records, report, stats = _fit(student, {"distiller": distiller}, objective, train, test,
                                  cfg, data_rng, "student")
    ckpt = model_checkpoint(student, stats, {"train": asdict(cfg),
                                             "distill": jsonable(asdict(distill_cfg))})
    run = TrainRun(model=student, records=records, report=report, checkpoint=ckpt,
                   stats=stats, extras={"distiller": distiller, "teacher": teacher})
    _persist(run, checkpoint_path, metrics_path)
    return run


def _persist(run: TrainRun, checkpoint_path: Optional[str],
             metrics_path: Optional[str]) -> None:
    if checkpoint_path is not None:
        checkpoint_save(run.checkpoint, checkpoint_path)
        logging.info("Saved checkpoint to %s", checkpoint_path)
    if metrics_path is not None:
        write_jsonl((record.to_line() for record in run.records), metrics_path)

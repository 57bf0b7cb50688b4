from dataclasses import asdict, dataclass, field
from enum import Enum
import math
from typing import Dict, Optional, Tuple, Union

import numpy as np

from vitkd.module.tensor.layers import Linear
from vitkd.module.tensor.tensor import Tensor, constant, log_softmax_rows, matmul
from vitkd.module.vit.vision_transformer import FeatureMap, TapSource
from vitkd.util.errors import ConfigError, TokenGridError

# A feature given either as a tap or directly as its token tensor
Features = Union[FeatureMap, Tensor]


class MimicMethod(str, Enum):
    LINEAR = "LINEAR"  # align with a linear layer, match features
    CORRELATION = "CORRELATION"  # match N x N token correlation matrices


class DeepMethod(str, Enum):
    GENERATION = "GENERATION"  # masked generation through a generative block
    LINEAR = "LINEAR"
    CORRELATION = "CORRELATION"


class GenBlockKind(str, Enum):
    CONV = "CONV"
    SELF_ATTN = "SELF_ATTN"
    CROSS_ATTN = "CROSS_ATTN"


@dataclass(frozen=True)
class KDConfig:
    """
    Classic logit distillation term
    """

    enabled: bool = False
    temperature: float = 1.0
    weight: float = 1.0


@dataclass(frozen=True)
class DistillConfig:
    """
    Which layers are distilled, how, and with what weights.
    Layer indices left as None resolve against the model depths
    """

    alpha: float = 3e-5
    beta: float = 3e-6
    mask_ratio: float = 0.5
    shallow_layers: Tuple[int, ...] = (0, 1)
    deep_layer: Optional[int] = None
    teacher_shallow_layers: Optional[Tuple[int, ...]] = None
    teacher_deep_layer: Optional[int] = None
    mimic_method: MimicMethod = MimicMethod.LINEAR
    deep_method: DeepMethod = DeepMethod.GENERATION
    gen_block: GenBlockKind = GenBlockKind.CONV
    gen_depth: int = 2
    gen_heads: int = 4
    cross_attn_ffn: bool = True
    tap_source: TapSource = TapSource.FFN_OUT
    deep_post_norm: bool = False
    kd: KDConfig = field(default_factory=KDConfig)

    def student_deep_layer(self, student_depth: int) -> int:
        return student_depth - 1 if self.deep_layer is None else self.deep_layer

    def teacher_layers(self, teacher_depth: int) -> Tuple[Tuple[int, ...], int]:
        """
        :return: teacher shallow layers and teacher deep layer
        """
        shallow = self.shallow_layers if self.teacher_shallow_layers is None \
            else self.teacher_shallow_layers
        deep = teacher_depth - 1 if self.teacher_deep_layer is None else self.teacher_deep_layer
        return tuple(shallow), deep

    def validate(self, student_depth: int, teacher_depth: int) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(F"distill: alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(F"distill: mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.kd.temperature <= 0 or self.kd.weight < 0:
            raise ConfigError("distill.kd: temperature must be > 0 and weight >= 0")
        if self.gen_depth < 1 or self.gen_heads < 1:
            raise ConfigError("distill: gen_depth and gen_heads must be >= 1")
        deep = self.student_deep_layer(student_depth)
        teacher_shallow, teacher_deep = self.teacher_layers(teacher_depth)
        for index in (*self.shallow_layers, deep):
            if not 0 <= index < student_depth:
                raise ConfigError(F"distill: student layer {index} outside depth {student_depth}")
        for index in (*teacher_shallow, teacher_deep):
            if not 0 <= index < teacher_depth:
                raise ConfigError(F"distill: teacher layer {index} outside depth {teacher_depth}")
        if deep in self.shallow_layers:
            raise ConfigError(F"distill: deep layer {deep} is also listed as a shallow layer")
        if len(teacher_shallow) != len(self.shallow_layers):
            raise ConfigError("distill: teacher_shallow_layers must pair one-to-one "
                              "with shallow_layers")
        if self.deep_post_norm and deep != student_depth - 1:
            raise ConfigError("distill: deep_post_norm needs the last student layer")
        if self.deep_post_norm and teacher_deep != teacher_depth - 1:
            raise ConfigError("distill: deep_post_norm needs the last teacher layer")


class LinearAdapter(Linear):
    """
    fc(.) aligning student embedding dim D_S to teacher dim D_T; trained with the student
    """


@dataclass
class MaskSpec:
    """
    Realized random token mask, mask[b, i] = 1 iff r_i < ratio with r_i ~ U[0, 1)
    """

    ratio: float
    mask: np.ndarray
    seed: Optional[int] = None

    @property
    def num_tokens(self) -> int:
        return self.mask.shape[-1]

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())

    def column(self, ndim: int) -> np.ndarray:
        """
        :param ndim: rank of the token tensor the mask is applied to (2 or 3)
        :return: mask shaped to broadcast over the embedding axis
        """
        return self.mask[0][:, None] if ndim == 2 else self.mask[:, :, None]


@dataclass
class LossBreakdown:
    """
    Components of the combined objective and their weighted total
    """

    l_ori: float
    l_mimic: float
    l_gen: float
    l_kd: float
    total: float
    objective: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_dict(self) -> Dict[str, float]:
        values = asdict(self)
        values.pop("objective")
        return values


def _tokens(features: Features) -> Tensor:
    return features.tokens if isinstance(features, FeatureMap) else features


def _batch_size(tokens: Tensor) -> int:
    return tokens.shape[0] if tokens.ndim == 3 else 1


def _check_grid(student: Tensor, teacher: Tensor) -> None:
    if student.shape[-2] != teacher.shape[-2] or student.shape[:-2] != teacher.shape[:-2]:
        raise TokenGridError(F"student tokens {student.shape} and teacher tokens "
                             F"{teacher.shape} come from different patch grids")


def loss_mimic_linear(fs: Features, ft: Features, adapter: LinearAdapter) -> Tensor:
    """
    sum_i sum_j (F^T - fc(F^S))^2 per sample, averaged over the batch
    :param fs: student features [B, N, D_S]
    :param ft: teacher features [B, N, D_T], detached here
    :param adapter: D_S -> D_T linear layer
    """
    student, teacher = _tokens(fs), _tokens(ft).detach()
    _check_grid(student, teacher)
    residual = teacher - adapter(student)
    return residual.square().sum() / _batch_size(student)


def correlation_matrix(f: Features) -> Tensor:
    """
    :return: M = F F^T / sqrt(D), N x N per sample whatever D is
    """
    tokens = _tokens(f)
    return matmul(tokens, tokens.swap_last()) * (1.0 / math.sqrt(tokens.shape[-1]))


def loss_mimic_corr(fs: Features, ft: Features) -> Tensor:
    """
    sum_ij (M^T - M^S)^2 per sample, averaged over the batch; needs no adapter
    """
    student, teacher = _tokens(fs), _tokens(ft).detach()
    _check_grid(student, teacher)
    residual = correlation_matrix(teacher) - correlation_matrix(student)
    return residual.square().sum() / _batch_size(student)


def make_mask(n: int, ratio: float, rng: np.random.Generator, batch: int = 1,
              seed: Optional[int] = None) -> MaskSpec:
    """
    Draw a fresh i.i.d. token mask per sample
    :param n: token count N
    :param ratio: lambda, probability of masking a token
    :param rng: generator owned by the caller's training step
    :param batch: number of samples
    :param seed: recorded for provenance only
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(F"mask ratio must lie in [0, 1], got {ratio}")
    draws = rng.random((batch, n))
    return MaskSpec(ratio=ratio, mask=(draws < ratio).astype(np.float64), seed=seed)


def apply_mask(fs_aligned: Tensor, mask: MaskSpec, masked_token: Tensor) -> Tensor:
    """
    Replace masked rows of the aligned student feature by the learnable masked token
    :param fs_aligned: [B, N, D_T] or [N, D_T], already through the alignment layer
    :param mask: realized mask
    :param masked_token: [D_T]
    """
    if fs_aligned.shape[-2] != mask.num_tokens:
        raise TokenGridError(F"mask over {mask.num_tokens} tokens applied to "
                             F"features {fs_aligned.shape}")
    column = mask.column(fs_aligned.ndim)
    return fs_aligned * constant(1.0 - column) + masked_token * constant(column)


def loss_generation(gen_out: Tensor, ft: Features, mask: MaskSpec) -> Tensor:
    """
    sum_i Mask_i sum_j (F^T_ij - G(F^S)_ij)^2 per sample, averaged over the batch;
    unmasked rows contribute exactly zero
    """
    teacher = _tokens(ft).detach()
    _check_grid(gen_out, teacher)
    residual = teacher - gen_out
    weighted = residual.square() * constant(mask.column(gen_out.ndim))
    return weighted.sum() / _batch_size(gen_out)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_kd_logit(student_logits: Tensor, teacher_logits: Tensor,
                  temperature: float = 1.0) -> Tensor:
    """
    T^2 KL(softmax(z_T / T) || softmax(z_S / T)), averaged over the batch
    :param student_logits: [B, C] or [C]
    :param teacher_logits: same shape, detached here
    :param temperature: softening temperature T
    """
    if student_logits.shape != teacher_logits.shape:
        raise TokenGridError(F"student logits {student_logits.shape} and teacher logits "
                             F"{teacher_logits.shape} differ")
    log_teacher = _log_softmax(teacher_logits.data / temperature)
    teacher_probs = np.exp(log_teacher)
    entropy_term = float((teacher_probs * log_teacher).sum())
    log_student = log_softmax_rows(student_logits * (1.0 / temperature))
    cross_term = (log_student * constant(teacher_probs)).sum()
    batch = student_logits.shape[0] if student_logits.ndim == 2 else 1
    return (constant(entropy_term) - cross_term) * (temperature ** 2 / batch)


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """
    Label-smoothed cross-entropy, averaged over the batch
    :param logits: [B, C]
    :param labels: [B] integer class ids
    :param smoothing: mass spread uniformly over all classes
    """
    batch, classes = logits.shape
    targets = np.full((batch, classes), smoothing / classes)
    targets[np.arange(batch), labels] += 1.0 - smoothing
    return -(log_softmax_rows(logits) * constant(targets)).sum() / batch


def _value(term: Union[Tensor, float]) -> float:
    return float(term.data) if isinstance(term, Tensor) else float(term)


def loss_total(l_ori: Union[Tensor, float],
               l_mimic: Union[Tensor, float],
               l_gen: Union[Tensor, float],
               l_kd: Union[Tensor, float],
               cfg: DistillConfig) -> LossBreakdown:
    """
    L = L_ori + alpha L_mimic + beta L_gen (+ kd.weight L_kd when enabled).
    When l_ori is a tensor the differentiable objective is attached too
    """
    kd_weight = cfg.kd.weight if cfg.kd.enabled else 0.0
    total = _value(l_ori) + cfg.alpha * _value(l_mimic) + cfg.beta * _value(l_gen) \
        + kd_weight * _value(l_kd)
    objective = None
    if isinstance(l_ori, Tensor):
        objective = l_ori
        for term, weight in ((l_mimic, cfg.alpha), (l_gen, cfg.beta), (l_kd, kd_weight)):
            if isinstance(term, Tensor) and (term is not l_kd or cfg.kd.enabled):
                objective = objective + term * weight
    return LossBreakdown(l_ori=_value(l_ori),
                         l_mimic=_value(l_mimic),
                         l_gen=_value(l_gen),
                         l_kd=_value(l_kd),
                         total=total,
                         objective=objective)

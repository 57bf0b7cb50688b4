import logging
from typing import Optional, Union

import numpy as np

from vitkd.module.distill.distill_losses import (DeepMethod, DistillConfig, LinearAdapter,
                                                 LossBreakdown, MaskSpec, MimicMethod,
                                                 apply_mask, loss_generation, loss_kd_logit,
                                                 loss_mimic_corr, loss_mimic_linear,
                                                 loss_total, make_mask)
from vitkd.module.distill.generative_blocks import GenerativeBlock, build_generative_block
from vitkd.module.tensor.layers import Module
from vitkd.module.tensor.tensor import Tensor
from vitkd.module.vit.vision_transformer import ModelOutput, TapSource, ViTConfig
from vitkd.util.errors import TokenGridError


class ViTKDDistiller(Module):
    """
    Student-side distillation parameters (per-layer adapters, deep alignment layer,
    generative block with its masked token) and the combined objective built from
    a student and a teacher forward
    """

    def __init__(self, cfg: DistillConfig, student: ViTConfig, teacher: ViTConfig,
                 rng: np.random.Generator):
        """
        :param cfg: distillation setup
        :param student: student model shape
        :param teacher: teacher model shape
        :param rng: initialization generator of the distillation parameters
        """
        if student.num_patches != teacher.num_patches:
            raise TokenGridError(F"student has {student.num_patches} patch tokens, teacher has "
                                 F"{teacher.num_patches}: patch grids must match")
        cfg.validate(student.depth, teacher.depth)
        self._config = cfg
        self._deep_layer = cfg.student_deep_layer(student.depth)
        self._teacher_shallow, self._teacher_deep = cfg.teacher_layers(teacher.depth)
        self._last_mask: Optional[MaskSpec] = None

        self.adapters = []
        if cfg.mimic_method == MimicMethod.LINEAR:
            self.adapters = [LinearAdapter(student.dim, teacher.dim, rng)
                             for _ in cfg.shallow_layers]
        self.align: Optional[LinearAdapter] = None
        self.generator: Optional[GenerativeBlock] = None
        if cfg.deep_method == DeepMethod.GENERATION:
            self.align = LinearAdapter(student.dim, teacher.dim, rng)
            self.generator = build_generative_block(cfg.gen_block, teacher.dim,
                                                    teacher.num_patches, rng,
                                                    heads=cfg.gen_heads,
                                                    depth=cfg.gen_depth,
                                                    mlp_ratio=teacher.mlp_ratio,
                                                    cross_attn_ffn=cfg.cross_attn_ffn)
        elif cfg.deep_method == DeepMethod.LINEAR:
            self.align = LinearAdapter(student.dim, teacher.dim, rng)
        logging.debug("Distiller: shallow %s -> teacher %s (%s), deep %d -> teacher %d (%s)",
                      list(cfg.shallow_layers), list(self._teacher_shallow),
                      cfg.mimic_method.value, self._deep_layer, self._teacher_deep,
                      cfg.deep_method.value)

    @property
    def config(self) -> DistillConfig:
        return self._config

    @property
    def last_mask(self) -> Optional[MaskSpec]:
        """
        :return: mask drawn by the latest generation step
        """
        return self._last_mask

    def mimic_loss(self, student: ModelOutput, teacher: ModelOutput) -> Union[Tensor, float]:
        """
        Sum of the shallow-layer mimicking losses
        """
        total: Union[Tensor, float] = 0.0
        source = TapSource(self._config.tap_source)
        for index, (layer, teacher_layer) in enumerate(zip(self._config.shallow_layers,
                                                           self._teacher_shallow)):
            fs, ft = student.tap(layer, source), teacher.tap(teacher_layer, source)
            if self._config.mimic_method == MimicMethod.LINEAR:
                term = loss_mimic_linear(fs, ft, self.adapters[index])
            else:
                term = loss_mimic_corr(fs, ft)
            total = term if isinstance(total, float) else total + term
        return total

    def deep_loss(self, student: ModelOutput, teacher: ModelOutput,
                  rng: np.random.Generator) -> Tensor:
        """
        Deep-layer term: masked generation, or mimicking when so configured
        :param rng: mask stream of the training run
        """
        post_norm = self._config.deep_post_norm
        fs = student.tap(self._deep_layer, TapSource.FFN_OUT, post_norm)
        ft = teacher.tap(self._teacher_deep, TapSource.FFN_OUT, post_norm)
        method = self._config.deep_method
        if method == DeepMethod.LINEAR:
            return loss_mimic_linear(fs, ft, self.align)
        if method == DeepMethod.CORRELATION:
            return loss_mimic_corr(fs, ft)
        batch = fs.tokens.shape[0]
        mask = make_mask(fs.num_tokens, self._config.mask_ratio, rng, batch)
        self._last_mask = mask
        masked = apply_mask(self.align(fs.tokens), mask, self.generator.masked_token)
        return loss_generation(self.generator(masked, mask), ft, mask)

    def forward(self, student: ModelOutput, teacher: ModelOutput, l_ori: Tensor,
                rng: np.random.Generator) -> LossBreakdown:
        """
        :param student: student forward on the batch
        :param teacher: frozen teacher forward on the same batch
        :param l_ori: supervised cross-entropy of the student
        :param rng: mask stream of the training run
        :return: loss breakdown carrying the differentiable objective
        """
        l_mimic = self.mimic_loss(student, teacher)
        l_gen = self.deep_loss(student, teacher, rng)
        l_kd: Union[Tensor, float] = 0.0
        if self._config.kd.enabled:
            l_kd = loss_kd_logit(student.logits, teacher.logits, self._config.kd.temperature)
        return loss_total(l_ori, l_mimic, l_gen, l_kd, self._config)

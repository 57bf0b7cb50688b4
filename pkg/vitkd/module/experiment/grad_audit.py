import logging
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from vitkd.module.distill.distill_losses import (LinearAdapter, MaskSpec, loss_generation,
                                                 loss_kd_logit, loss_mimic_corr,
                                                 loss_mimic_linear)
from vitkd.module.distill.generative_blocks import (ConvProjector, CrossAttnGenerator,
                                                    SelfAttnGenerator)
from vitkd.module.tensor.grad_check import GradCheckReport, grad_check
from vitkd.module.tensor.layers import Module
from vitkd.module.tensor.tensor import (Tensor, constant, conv3x3, layer_norm, matmul,
                                        precision, softmax_rows)
from vitkd.module.vit.vision_transformer import EncoderLayer
from vitkd.util.errors import ConfigError
from vitkd.util.pipeline import progress_enabled

TOKENS, DIM, TEACHER_DIM = 4, 8, 6
# Small enough that ReLU kinks are practically never crossed, large enough for float64
AUDIT_STEP = 1e-6
AUDIT_TOL = 1e-3

Instance = Tuple[Callable[..., Tensor], Dict[str, Tensor]]


def _uniform(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, shape)


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(_uniform(rng, *shape), requires_grad=True)


def _weighted_sum(out: Tensor, weights: Tensor) -> Tensor:
    return (out * weights).sum()


def _module_instance(module: Module, x: Tensor, run: Callable[[Tensor], Tensor],
                     rng: np.random.Generator) -> Instance:
    probe = constant(_uniform(rng, *x.shape))
    inputs = {"x": x}
    inputs.update(module.named_parameters())
    return (lambda *_: _weighted_sum(run(x), probe)), inputs


def _matmul(rng: np.random.Generator) -> Instance:
    a, b = _leaf(rng, TOKENS, DIM), _leaf(rng, DIM, TOKENS)
    probe = constant(_uniform(rng, TOKENS, TOKENS))
    return (lambda a_, b_: _weighted_sum(matmul(a_, b_), probe)), {"a": a, "b": b}


def _softmax(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, TOKENS, DIM)
    probe = constant(_uniform(rng, TOKENS, DIM))
    return (lambda x_: _weighted_sum(softmax_rows(x_), probe)), {"x": x}


def _layer_norm(rng: np.random.Generator) -> Instance:
    x, gamma, beta = _leaf(rng, TOKENS, DIM), _leaf(rng, DIM), _leaf(rng, DIM)
    probe = constant(_uniform(rng, TOKENS, DIM))
    return (lambda x_, g_, b_: _weighted_sum(layer_norm(x_, g_, b_), probe)), \
        {"x": x, "gamma": gamma, "beta": beta}


def _conv3x3(rng: np.random.Generator) -> Instance:
    x = _leaf(rng, DIM, 2, 2)
    kernel, bias = _leaf(rng, DIM, DIM, 3, 3), _leaf(rng, DIM)
    probe = constant(_uniform(rng, DIM, 2, 2))
    return (lambda x_, k_, b_: _weighted_sum(conv3x3(x_, k_, b_), probe)), \
        {"x": x, "kernel": kernel, "bias": bias}


def _mimic_linear(rng: np.random.Generator) -> Instance:
    fs, ft = _leaf(rng, 1, TOKENS, DIM), constant(_uniform(rng, 1, TOKENS, TEACHER_DIM))
    adapter = LinearAdapter(DIM, TEACHER_DIM, rng)
    return (lambda *_: loss_mimic_linear(fs, ft, adapter)), \
        {"fs": fs, "adapter.weight": adapter.weight, "adapter.bias": adapter.bias}


def _mimic_corr(rng: np.random.Generator) -> Instance:
    fs, ft = _leaf(rng, 1, TOKENS, DIM), constant(_uniform(rng, 1, TOKENS, TEACHER_DIM))
    return (lambda fs_: loss_mimic_corr(fs_, ft)), {"fs": fs}


def _audit_mask() -> MaskSpec:
    return MaskSpec(ratio=0.5, mask=np.array([[1.0, 0.0, 1.0, 0.0]]))


def _generation(rng: np.random.Generator) -> Instance:
    out, ft = _leaf(rng, 1, TOKENS, DIM), constant(_uniform(rng, 1, TOKENS, DIM))
    mask = _audit_mask()
    return (lambda out_: loss_generation(out_, ft, mask)), {"gen_out": out}


def _kd_logit(rng: np.random.Generator) -> Instance:
    student, teacher = _leaf(rng, 2, 5), constant(_uniform(rng, 2, 5))
    return (lambda s_: loss_kd_logit(s_, teacher, temperature=2.0)), {"student_logits": student}


def _conv_projector(rng: np.random.Generator) -> Instance:
    block = ConvProjector(DIM, TOKENS, rng)
    return _module_instance(block, _leaf(rng, 1, TOKENS, DIM), block, rng)


def _self_attn_generator(rng: np.random.Generator) -> Instance:
    block = SelfAttnGenerator(DIM, 2, 1, TOKENS, 2.0, rng)
    return _module_instance(block, _leaf(rng, 1, TOKENS, DIM), block, rng)


def _cross_attn_generator(rng: np.random.Generator) -> Instance:
    block = CrossAttnGenerator(DIM, 2, 1, TOKENS, 2.0, True, rng)
    mask = _audit_mask()
    return _module_instance(block, _leaf(rng, 1, TOKENS, DIM), lambda x: block(x, mask), rng)


def _encoder_layer(rng: np.random.Generator) -> Instance:
    layer = EncoderLayer(DIM, 2, 2.0, rng)
    return _module_instance(layer, _leaf(rng, 1, TOKENS, DIM), lambda x: layer(x)[0], rng)


AUDIT_TARGETS: Dict[str, Callable[[np.random.Generator], Instance]] = {
    "matmul": _matmul,
    "softmax": _softmax,
    "layer_norm": _layer_norm,
    "conv3x3": _conv3x3,
    "loss_mimic_linear": _mimic_linear,
    "loss_mimic_corr": _mimic_corr,
    "loss_generation": _generation,
    "loss_kd_logit": _kd_logit,
    "conv_projector": _conv_projector,
    "self_attn_generator": _self_attn_generator,
    "cross_attn_generator": _cross_attn_generator,
    "encoder_layer": _encoder_layer,
}


def run_grad_audit(targets: Optional[Iterable[str]] = None,
                   seed: int = 0,
                   tol: float = AUDIT_TOL) -> List[GradCheckReport]:
    """
    Check analytic gradients of every op, loss and block against central differences,
    on random 4-token x 8-dim instances with entries in [-1, 1], evaluated in float64
    :param targets: subset of AUDIT_TARGETS names, all when None
    :param seed: instance seed
    :param tol: max relative error to pass
    :return: one report per target, in order
    """
    names = list(AUDIT_TARGETS) if targets is None else list(targets)
    unknown = [name for name in names if name not in AUDIT_TARGETS]
    if unknown:
        raise ConfigError(F"unknown audit targets {unknown}, known: {list(AUDIT_TARGETS)}")
    reports = []
    progress = tqdm(names, desc="Gradient audit", disable=not progress_enabled())
    for index, name in enumerate(progress):
        progress.set_postfix_str(name)
        rng = np.random.default_rng([seed, index])
        with precision(np.float64):
            f, inputs = AUDIT_TARGETS[name](rng)
            report = grad_check(f, inputs, step=AUDIT_STEP, tol=tol, name=name)
        logging.debug("%s: max rel error %.3e at %s%s", name, report.max_rel_error,
                      report.worst_input, report.worst_index)
        reports.append(report)
    return reports

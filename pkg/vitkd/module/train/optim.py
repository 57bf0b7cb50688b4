from dataclasses import dataclass, field
import math
from typing import TYPE_CHECKING, Dict, FrozenSet, Iterable, Mapping, Tuple

import numpy as np

from vitkd.module.tensor.tensor import Tensor

if TYPE_CHECKING:
    from vitkd.module.train.trainer import TrainConfig

# Parameters never decayed besides biases and norm gains (anything with ndim < 2)
NO_DECAY_NAMES = frozenset({"pos_embed", "cls_token", "masked_token"})


@dataclass
class AdamWState:
    """
    Step counter and first/second moment estimates by parameter name
    """

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, np.ndarray],
               grads: Mapping[str, np.ndarray],
               state: AdamWState,
               lr: float,
               betas: Tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8,
               weight_decay: float = 0.0,
               no_decay: FrozenSet[str] = frozenset()) -> Tuple[Dict[str, np.ndarray], AdamWState]:
    """
    One AdamW update. Weight decay is decoupled: p <- p (1 - lr wd) first,
    then the bias-corrected adaptive step
    :param params: current values by name
    :param grads: gradients by name
    :param state: moments from the previous step (zeros at step 0)
    :param lr: learning rate of this step
    :param betas: moment decay rates
    :param eps: denominator stabilizer
    :param weight_decay: decoupled decay coefficient
    :param no_decay: names excluded from weight decay
    :return: new values and new state
    """
    beta1, beta2 = betas
    step = state.step + 1
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        grad = grads[name]
        m = beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - beta1) * grad
        v = beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - beta2) * grad * grad
        decay = 0.0 if name in no_decay else weight_decay
        decayed = value * (1.0 - lr * decay)
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        new_params[name] = (decayed - lr * update).astype(value.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, AdamWState(step=step, m=new_m, v=new_v)


class AdamW:
    """
    Stateful wrapper over `adamw_step` for a set of named trainable tensors
    """

    def __init__(self,
                 named_params: Iterable[Tuple[str, Tensor]],
                 betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self._params = {name: param for name, param in named_params if param.requires_grad}
        self._betas = tuple(betas)
        self._eps = eps
        self._weight_decay = weight_decay
        self._no_decay = frozenset(
            name for name, param in self._params.items()
            if param.ndim < 2 or name.rsplit(".", 1)[-1] in NO_DECAY_NAMES)
        self.state = AdamWState()

    @property
    def param_names(self) -> Tuple[str, ...]:
        return tuple(self._params)

    def step(self, lr: float) -> None:
        values = {name: param.data for name, param in self._params.items()}
        grads = {name: param.grad for name, param in self._params.items()}
        updated, self.state = adamw_step(values, grads, self.state, lr, self._betas,
                                         self._eps, self._weight_decay, self._no_decay)
        for name, param in self._params.items():
            param.data = updated[name]

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.zero_grad()


def cosine_lr(step: int, cfg: "TrainConfig", total_steps: int) -> float:
    """
    Linear warmup from 0 to lr_max, then cosine decay reaching lr_min at the final step
    :param step: 0-based optimizer step
    :param cfg: training config (lr_max, lr_min, warmup)
    :param total_steps: number of optimizer steps of the run
    """
    warmup = cfg.resolved_warmup(total_steps)
    if step < warmup:
        return cfg.lr_max * step / warmup
    span = total_steps - 1 - warmup
    if span <= 0:
        return cfg.lr_max
    progress = min(1.0, (step - warmup) / span)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))

from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Sequence, Tuple, Union

import numpy as np

from vitkd.module.tensor.tensor import Tape, Tensor, no_grad

# Relative errors are measured against max(|analytic|, |numeric|, floor)
# so that entries with a vanishing gradient compare absolutely
RELATIVE_ERROR_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    """
    Outcome of comparing analytic and central-difference gradients
    """

    name: str
    max_rel_error: float
    worst_input: str
    worst_index: Tuple[int, ...]
    analytic: float
    numeric: float
    tol: float
    checked_elements: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def _named_inputs(inputs: Union[Sequence[Tensor], Mapping[str, Tensor]]) -> Dict[str, Tensor]:
    if isinstance(inputs, Mapping):
        return dict(inputs)
    return {F"input{index}": tensor for index, tensor in enumerate(inputs)}


def grad_check(f: Callable[..., Tensor],
               inputs: Union[Sequence[Tensor], Mapping[str, Tensor]],
               step: float = 1e-3,
               tol: float = 1e-3,
               name: str = "f") -> GradCheckReport:
    """
    Compare the backward pass of `f` with central differences, element by element.
    f must be deterministic and is called as f(*inputs) returning a scalar tensor
    :param f: scalar-valued computation
    :param inputs: tensors to differentiate against (those with requires_grad)
    :param step: finite-difference step
    :param tol: max relative error to pass
    :param name: label carried into the report
    :return: report with the worst element
    """
    named = _named_inputs(inputs)
    checked = {key: tensor for key, tensor in named.items() if tensor.requires_grad}
    for tensor in checked.values():
        tensor.zero_grad()
    with Tape() as tape:
        loss = f(*named.values())
        tape.backward(loss)
    analytic = {key: tensor.grad.copy() for key, tensor in checked.items()}

    def evaluate() -> float:
        with no_grad():
            return float(f(*named.values()).data)

    worst = (0.0, "", (), 0.0, 0.0)
    count = 0
    for key, tensor in checked.items():
        for index in np.ndindex(*tensor.shape):
            original = tensor.data[index]
            tensor.data[index] = original + step
            plus = evaluate()
            tensor.data[index] = original - step
            minus = evaluate()
            tensor.data[index] = original
            numeric = (plus - minus) / (2.0 * step)
            exact = float(analytic[key][index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), RELATIVE_ERROR_FLOOR)
            count += 1
            if error > worst[0] or not worst[1]:
                worst = (error, key, tuple(int(i) for i in index), exact, numeric)
    return GradCheckReport(name=name,
                           max_rel_error=worst[0],
                           worst_input=worst[1],
                           worst_index=worst[2],
                           analytic=worst[3],
                           numeric=worst[4],
                           tol=tol,
                           checked_elements=count)

from typing import Any, Dict, Iterator, List, Mapping, Sequence, Tuple
import zlib

import numpy as np

from vitkd.module.tensor.tensor import Tensor, layer_norm, matmul
from vitkd.util.errors import ConfigError, ShapeError


def trunc_normal(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02) -> Tensor:
    """
    Trainable tensor drawn from a normal distribution truncated at two
    standard deviations (out-of-range draws are redrawn)
    :param rng: generator to draw from
    :param shape: tensor shape
    :param std: standard deviation before truncation
    """
    values = rng.standard_normal(tuple(shape))
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return Tensor(values * std, requires_grad=True)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True)


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=True)


class Module:
    """
    Container of trainable tensors. Every public Tensor attribute is a
    parameter; public Module attributes (and lists of them) are children.
    Parameter names are dotted attribute paths in assignment order
    """

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        """
        :param prefix: prepended to every name
        :return: iterator of (dotted name, parameter)
        """
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full_name = F"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full_name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(F"{full_name}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(F"{full_name}.{index}.")

    def parameters(self) -> List[Tensor]:
        return [parameter for _, parameter in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        """
        :return: copy of every parameter value by name
        """
        return {name: parameter.data.copy() for name, parameter in self.named_parameters()}

    def load_state_dict(self, table: Mapping[str, np.ndarray]) -> None:
        """
        Overwrite parameter values; the table must name exactly this module's parameters
        :param table: name -> array
        """
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(table))
        unexpected = sorted(set(table) - set(own))
        if missing or unexpected:
            raise ConfigError(
                F"state table does not match the model: missing {missing[:5]}, "
                F"unexpected {unexpected[:5]}")
        for name, parameter in own.items():
            value = np.asarray(table[name])
            if value.shape != parameter.shape:
                raise ShapeError(
                    F"parameter {name}: stored shape {value.shape}, model shape {parameter.shape}")
        for name, parameter in own.items():
            parameter.data = np.array(table[name], dtype=parameter.data.dtype)

    def freeze(self) -> None:
        """
        Stop every parameter from taking part in gradient flow
        """
        for parameter in self.parameters():
            parameter.requires_grad = False
            parameter.zero_grad()

    def zero_grad(self) -> None:
        for parameter in self.parameters():
            parameter.zero_grad()

    def checksum(self) -> int:
        """
        :return: CRC32 over parameter names and raw values
        """
        crc = 0
        for name, parameter in self.named_parameters():
            crc = zlib.crc32(name.encode("utf-8"), crc)
            crc = zlib.crc32(parameter.data.tobytes(), crc)
        return crc


class Linear(Module):
    """
    y = x W + b with W stored as [in_dim, out_dim]
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = trunc_normal(rng, (in_dim, out_dim))
        self.bias = zeros((out_dim,))

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = ones((dim,))
        self.beta = zeros((dim,))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self._eps)

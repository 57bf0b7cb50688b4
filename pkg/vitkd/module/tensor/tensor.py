import contextlib
from dataclasses import dataclass
import os
import threading
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from vitkd.util.errors import ContractError, NumericError, ShapeError

# Per-thread engine state: active tapes, grad mode, compute precision, debug
_state = threading.local()

# What a Tensor can be built from
ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


def _current_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _debug_enabled() -> bool:
    flag = getattr(_state, "debug", None)
    if flag is None:
        return os.environ.get("VITKD_DEBUG", "0") == "1"
    return flag


def set_debug(flag: Optional[bool]) -> None:
    """
    Toggle finite-value checks after every recorded operation
    :param flag: True/False to force, None to follow the VITKD_DEBUG env var
    """
    _state.debug = flag


@contextlib.contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """
    Compute in another floating precision inside the block.
    Tensors created inside keep the precision they were created with
    :param dtype: numpy floating dtype, e.g. np.float64
    """
    previous = _current_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """
    Run operations without recording them on any tape
    """
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _tape_stack() -> List["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape() -> "Tape":
    """
    :return: innermost active tape, a per-thread default one is created lazily
    """
    stack = _tape_stack()
    if not stack:
        stack.append(Tape())
    return stack[-1]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sum a gradient over the axes that were broadcast in the forward pass
    :param grad: gradient of the broadcast result
    :param shape: shape of the operand before broadcasting
    :return: gradient with exactly `shape`
    """
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Dense row-major floating array taking part in reverse-mode differentiation.
    Leaves with `requires_grad` receive accumulated gradients on backward;
    results of recorded operations reference the tape they live on
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        """
        :param data: values, converted to the current compute precision
        :param requires_grad: whether backward should populate `grad`
        """
        array = np.asarray(data, dtype=_current_dtype())
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data: np.ndarray = array if array.flags.c_contiguous else array.copy()
        self.requires_grad = requires_grad
        self.is_leaf = True
        self._grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def grad(self) -> Optional[np.ndarray]:
        """
        :return: accumulated gradient; zeros for a leaf that requires grad
        but was not reached by any backward pass yet, None otherwise
        """
        if self._grad is None and self.requires_grad and self.is_leaf:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: Optional[np.ndarray]) -> None:
        self._grad = None if value is None else np.array(value, dtype=self.data.dtype)

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ContractError(
                F"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        if self._grad is None:
            self._grad = np.array(grad, dtype=self.data.dtype)
        else:
            self._grad += grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        """
        :return: constant tensor sharing the values but cut from gradient flow
        """
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self._grad = None

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes)

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def square(self) -> "Tensor":
        return Mul.apply(self, self)

    def __getitem__(self, key: Any) -> "Tensor":
        return Index.apply(self, key=key)

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        return Add.apply(self, _as_tensor(other))

    def __radd__(self, other: float) -> "Tensor":
        return Add.apply(_as_tensor(other), self)

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        return Sub.apply(self, _as_tensor(other))

    def __rsub__(self, other: float) -> "Tensor":
        return Sub.apply(_as_tensor(other), self)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return Mul.apply(self, other)
        return Scale.apply(self, factor=float(other))

    def __rmul__(self, other: float) -> "Tensor":
        return Scale.apply(self, factor=float(other))

    def __truediv__(self, other: float) -> "Tensor":
        return Scale.apply(self, factor=1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return Scale.apply(self, factor=-1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return F"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(data: ArrayLike) -> Tensor:
    """
    :return: tensor that never receives gradients
    """
    return Tensor(data, requires_grad=False)


@dataclass
class TapeRecord:
    """
    One recorded operation: how its output was produced from its inputs
    """

    function: "Function"
    inputs: Tuple[Tensor, ...]
    output: Tensor


class Tape:
    """
    Ordered log of differentiable operations. Backward replays it in reverse
    recording order (a valid reverse topological order) exactly once and then
    clears it. Usable as a context manager to scope a fresh tape
    """

    def __init__(self):
        self.records: List[TapeRecord] = []

    def record(self, function: "Function", inputs: Tuple[Tensor, ...], output: Tensor) -> None:
        output._tape = self
        self.records.append(TapeRecord(function=function, inputs=inputs, output=output))

    def clear(self) -> None:
        for record in self.records:
            record.output._tape = None
        self.records = []

    def backward(self, loss: Tensor) -> None:
        """
        Populate gradients of every leaf the loss depends on.
        Gradients accumulate (+=) into leaves used more than once or across calls
        :param loss: scalar tensor recorded on this tape
        """
        if loss.ndim != 0:
            raise ContractError(F"backward expects a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss is not recorded on this tape "
                                "(constant loss or graph already replayed)")
        grads = {id(loss): np.ones_like(loss.data)}
        for record in reversed(self.records):
            grad = grads.pop(id(record.output), None)
            if grad is None:
                continue
            input_grads = record.function.backward(grad)
            for tensor, tensor_grad in zip(record.inputs, input_grads):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    tensor._accumulate(tensor_grad)
                    continue
                key = id(tensor)
                grads[key] = tensor_grad if key not in grads else grads[key] + tensor_grad
        self.clear()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        _tape_stack().remove(self)
        self.clear()


def backward(loss: Tensor) -> None:
    """
    Run backward on the tape the loss was recorded on
    :param loss: scalar loss
    """
    if loss._tape is None:
        if loss.ndim != 0:
            raise ContractError(F"backward expects a scalar loss, got shape {loss.shape}")
        raise ContractError("loss is not recorded on any tape "
                            "(constant loss or graph already replayed)")
    loss._tape.backward(loss)


class Function:
    """
    Differentiable operation. Subclasses implement `forward` over numpy arrays
    and `backward` mapping the output gradient to one gradient per input
    (None for inputs that take no gradient)
    """

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        """
        Run forward and record the operation if any input requires grad
        :param tensors: operands
        :param kwargs: non-tensor parameters of the operation
        :return: result tensor
        """
        function = cls()
        out = Tensor(function.forward(*(tensor.data for tensor in tensors), **kwargs))
        if _debug_enabled() and not np.all(np.isfinite(out.data)) \
                and all(np.all(np.isfinite(tensor.data)) for tensor in tensors):
            raise NumericError(F"{cls.__name__} produced non-finite values from finite inputs")
        if _grad_enabled() and any(tensor.requires_grad for tensor in tensors):
            out.requires_grad = True
            out.is_leaf = False
            current_tape().record(function, tensors, out)
        return out


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Scale(Function):
    def forward(self, x: np.ndarray, factor: float) -> np.ndarray:
        self.factor = factor
        return x * x.dtype.type(factor)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return grad * grad.dtype.type(self.factor),


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(F"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        a, b = self.a, self.b
        grad_a = _unbroadcast(np.matmul(grad, np.swapaxes(b, -1, -2)), a.shape)
        if b.ndim == 2 and a.ndim > 2:
            # Shared weight: fold leading axes instead of summing a batch of products
            grad_b = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            grad_b = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), grad), b.shape)
        return grad_a, grad_b


class Transpose(Function):
    def forward(self, x: np.ndarray, axes: Tuple[int, ...]) -> np.ndarray:
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return np.transpose(grad, np.argsort(self.axes)),


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        self.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(F"cannot reshape {x.shape} into {tuple(shape)}") from None

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return grad.reshape(self.in_shape),


class Index(Function):
    """
    Basic (slice/integer) indexing
    """

    def forward(self, x: np.ndarray, key: Any) -> np.ndarray:
        self.key, self.in_shape, self.dtype = key, x.shape, x.dtype
        return np.array(x[key])

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(self.in_shape, dtype=self.dtype)
        full[self.key] = grad
        return full,


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis
        self.splits = np.cumsum([array.shape[axis] for array in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Sum(Function):
    def forward(self, x: np.ndarray, axis: Optional[int], keepdims: bool) -> np.ndarray:
        self.in_shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.array(np.broadcast_to(grad, self.in_shape)),


class Softmax(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        exps = np.exp(x - x.max(axis=-1, keepdims=True))
        self.y = exps / exps.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        y = self.y
        return y * (grad - (grad * y).sum(axis=-1, keepdims=True)),


class LogSoftmax(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        shifted = x - x.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        self.probs = np.exp(out)
        return out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return grad - self.probs * grad.sum(axis=-1, keepdims=True),


class LayerNorm(Function):
    def forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                eps: float) -> np.ndarray:
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise ShapeError(
                F"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not fit {x.shape}")
        centered = x - x.mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
        self.x_hat = centered * self.inv_std
        self.gamma = gamma
        return self.x_hat * gamma + beta

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dim = self.gamma.shape[0]
        grad_gamma = (grad * self.x_hat).reshape(-1, dim).sum(axis=0)
        grad_beta = grad.reshape(-1, dim).sum(axis=0)
        grad_x_hat = grad * self.gamma
        grad_x = self.inv_std * (
                grad_x_hat
                - grad_x_hat.mean(axis=-1, keepdims=True)
                - self.x_hat * (grad_x_hat * self.x_hat).mean(axis=-1, keepdims=True))
        return grad_x, grad_gamma, grad_beta


class Gelu(Function):
    """
    tanh approximation of GELU
    """

    COEF = np.sqrt(2.0 / np.pi)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.t = np.tanh(x.dtype.type(Gelu.COEF) * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        x, t = self.x, self.t
        du = x.dtype.type(Gelu.COEF) * (1.0 + 3.0 * 0.044715 * x ** 2)
        return grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),


class Relu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.positive = x > 0
        return np.where(self.positive, x, x.dtype.type(0))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return np.where(self.positive, grad, grad.dtype.type(0)),


class Conv3x3(Function):
    """
    3x3 convolution, stride 1, zero padding 1, computed as an im2col product
    """

    def forward(self, x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
        self.unbatched = x.ndim == 3
        if self.unbatched:
            x = x[None]
        if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[2:] != (3, 3) \
                or kernel.shape[1] != x.shape[1] or bias.shape != kernel.shape[:1]:
            raise ShapeError(
                F"conv3x3: input {x.shape}, kernel {kernel.shape}, bias {bias.shape} do not fit")
        batch, channels, height, width = x.shape
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        windows = [padded[:, :, dy:dy + height, dx:dx + width]
                   for dy in range(3) for dx in range(3)]
        self.cols = np.stack(windows, axis=2).reshape(batch, channels * 9, height * width)
        self.kernel_matrix = kernel.reshape(kernel.shape[0], -1)
        self.kernel_shape, self.in_shape = kernel.shape, x.shape
        out = np.matmul(self.kernel_matrix, self.cols) + bias[None, :, None]
        out = out.reshape(batch, kernel.shape[0], height, width)
        return out[0] if self.unbatched else out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.unbatched:
            grad = grad[None]
        batch, channels, height, width = self.in_shape
        grad = grad.reshape(batch, self.kernel_shape[0], height * width)
        grad_kernel = np.matmul(grad, np.swapaxes(self.cols, 1, 2)).sum(axis=0)
        grad_bias = grad.sum(axis=(0, 2))
        grad_cols = np.matmul(self.kernel_matrix.T, grad).reshape(
            batch, channels, 9, height, width)
        grad_padded = np.zeros((batch, channels, height + 2, width + 2), dtype=grad.dtype)
        for offset in range(9):
            dy, dx = divmod(offset, 3)
            grad_padded[:, :, dy:dy + height, dx:dx + width] += grad_cols[:, :, offset]
        grad_x = grad_padded[:, :, 1:-1, 1:-1]
        if self.unbatched:
            grad_x = grad_x[0]
        return np.ascontiguousarray(grad_x), grad_kernel.reshape(self.kernel_shape), grad_bias


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes, leading axes broadcast
    :return: a @ b
    """
    return MatMul.apply(a, b)


def softmax_rows(x: Tensor) -> Tensor:
    """
    :return: softmax over the last axis, stabilized by max-subtraction
    """
    return Softmax.apply(x)


def log_softmax_rows(x: Tensor) -> Tensor:
    return LogSoftmax.apply(x)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """
    Normalize every last-axis slice to zero mean and unit variance, then apply
    the affine map
    """
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def conv3x3(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """
    :param x: [C_in, H, W] or [B, C_in, H, W]
    :param kernel: [C_out, C_in, 3, 3]
    :param bias: [C_out]
    :return: same spatial size, C_out channels
    """
    return Conv3x3.apply(x, kernel, bias)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = shape[0]
    return Reshape.apply(x, shape=tuple(shape))


def tensor_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def tensor_mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return Scale.apply(Sum.apply(x, axis=axis, keepdims=keepdims), factor=1.0 / count)

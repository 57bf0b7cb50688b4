import math
from typing import List, Optional

import numpy as np

from vitkd.module.distill.distill_losses import GenBlockKind, MaskSpec
from vitkd.module.tensor.layers import LayerNorm, Linear, Module, trunc_normal, zeros
from vitkd.module.tensor.tensor import Tensor, constant, conv3x3, gelu, relu
from vitkd.module.vit.vision_transformer import Attention, EncoderLayer
from vitkd.util.errors import ConfigError, DegenerateAttentionError, TokenGridError

# Logit bias that removes a key from the softmax
_EXCLUDED_KEY = -1e9


def _as_batch(x: Tensor) -> Tensor:
    return x.reshape(1, *x.shape) if x.ndim == 2 else x


def _restore(y: Tensor, like: Tensor) -> Tensor:
    return y.reshape(*like.shape) if like.ndim == 2 else y


class GenerativeBlock(Module):
    """
    Maps masked student tokens [B, N, D_T] to a reconstruction of the teacher feature
    of the same shape. Owns the learnable masked token substituted at masked rows
    """

    kind: GenBlockKind

    def __init__(self, dim: int, rng: np.random.Generator):
        self.masked_token = trunc_normal(rng, (dim,))
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    def forward(self, x: Tensor, mask: Optional[MaskSpec] = None) -> Tensor:
        raise NotImplementedError


class Conv3x3Layer(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.weight = trunc_normal(rng, (out_channels, in_channels, 3, 3))
        self.bias = zeros((out_channels,))

    def forward(self, x: Tensor) -> Tensor:
        return conv3x3(x, self.weight, self.bias)


class ConvProjector(GenerativeBlock):
    """
    conv3x3 -> ReLU -> conv3x3 over the tokens laid out as a sqrt(N) x sqrt(N) grid,
    D_T channels throughout
    """

    kind = GenBlockKind.CONV

    def __init__(self, dim: int, num_tokens: int, rng: np.random.Generator):
        super().__init__(dim, rng)
        self._grid = self._grid_side(num_tokens)
        self.conv1 = Conv3x3Layer(dim, dim, rng)
        self.conv2 = Conv3x3Layer(dim, dim, rng)

    @staticmethod
    def _grid_side(num_tokens: int) -> int:
        side = math.isqrt(num_tokens)
        if side * side != num_tokens:
            raise ConfigError(F"conv projector needs a square token grid, got N={num_tokens}")
        return side

    def forward(self, x: Tensor, mask: Optional[MaskSpec] = None) -> Tensor:
        batched = _as_batch(x)
        batch, tokens, dim = batched.shape
        side = self._grid_side(tokens)
        grid = batched.reshape(batch, side, side, dim).transpose(0, 3, 1, 2)
        out = self.conv2(relu(self.conv1(grid)))
        return _restore(out.transpose(0, 2, 3, 1).reshape(batch, tokens, dim), x)


class SelfAttnGenerator(GenerativeBlock):
    """
    Stack of pre-norm encoder layers where every token attends to every token,
    with its own positional embedding
    """

    kind = GenBlockKind.SELF_ATTN

    def __init__(self, dim: int, heads: int, depth: int, num_tokens: int, mlp_ratio: float,
                 rng: np.random.Generator):
        super().__init__(dim, rng)
        if dim % heads != 0:
            raise ConfigError(F"generator: dim {dim} is not divisible by heads {heads}")
        self.pos_embed = trunc_normal(rng, (1, num_tokens, dim))
        self.layers = [EncoderLayer(dim, heads, mlp_ratio, rng) for _ in range(depth)]

    def forward(self, x: Tensor, mask: Optional[MaskSpec] = None) -> Tensor:
        h = _as_batch(x) + self.pos_embed
        for layer in self.layers:
            h, _, _ = layer(h)
        return _restore(h, x)


class CrossAttnLayer(Module):
    """
    Queries attend to a fixed key/value set, optional feed-forward sublayer after
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float, use_ffn: bool,
                 rng: np.random.Generator):
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.ffn: List[Module] = []
        if use_ffn:
            hidden = int(round(dim * mlp_ratio))
            self.ffn = [LayerNorm(dim), Linear(dim, hidden, rng), Linear(hidden, dim, rng)]

    def forward(self, q: Tensor, kv: Tensor, key_bias: np.ndarray) -> Tensor:
        attended, _ = self.attn(self.norm_q(q), self.norm_kv(kv), key_bias)
        q = q + attended
        if self.ffn:
            norm, fc1, fc2 = self.ffn
            q = q + fc2(gelu(fc1(norm(q))))
        return q


class CrossAttnGenerator(GenerativeBlock):
    """
    Masked positions query the unmasked positions; unmasked rows pass through unchanged
    """

    kind = GenBlockKind.CROSS_ATTN

    def __init__(self, dim: int, heads: int, depth: int, num_tokens: int, mlp_ratio: float,
                 use_ffn: bool, rng: np.random.Generator):
        super().__init__(dim, rng)
        if dim % heads != 0:
            raise ConfigError(F"generator: dim {dim} is not divisible by heads {heads}")
        self.pos_embed = trunc_normal(rng, (1, num_tokens, dim))
        self.layers = [CrossAttnLayer(dim, heads, mlp_ratio, use_ffn, rng) for _ in range(depth)]

    def forward(self, x: Tensor, mask: Optional[MaskSpec] = None) -> Tensor:
        if mask is None:
            raise ConfigError("cross-attention generator needs the token mask")
        batched = _as_batch(x)
        if mask.mask.shape != batched.shape[:2]:
            raise TokenGridError(F"mask {mask.mask.shape} does not cover tokens {x.shape}")
        masked = mask.mask > 0
        if np.any(masked.any(axis=1) & masked.all(axis=1)):
            raise DegenerateAttentionError(
                "cross-attention has masked queries but no unmasked keys to attend to")
        if not masked.any():
            return x

        h = batched + self.pos_embed
        key_bias = np.where(masked, _EXCLUDED_KEY, 0.0)
        queries = h
        for layer in self.layers:
            queries = layer(queries, h, key_bias)
        column = mask.mask[:, :, None]
        out = batched * constant(1.0 - column) + queries * constant(column)
        return _restore(out, x)


def build_generative_block(kind: GenBlockKind,
                           dim: int,
                           num_tokens: int,
                           rng: np.random.Generator,
                           heads: int = 4,
                           depth: int = 2,
                           mlp_ratio: float = 4.0,
                           cross_attn_ffn: bool = True) -> GenerativeBlock:
    """
    :param kind: which generative block
    :param dim: teacher embedding dim D_T
    :param num_tokens: patch token count N
    :param rng: initialization generator
    :param heads: attention heads (attention kinds only)
    :param depth: layer count (attention kinds only)
    :param mlp_ratio: FFN width multiplier
    :param cross_attn_ffn: keep the FFN sublayers of the cross-attention layers
    """
    kind = GenBlockKind(kind)
    if kind == GenBlockKind.CONV:
        return ConvProjector(dim, num_tokens, rng)
    if kind == GenBlockKind.SELF_ATTN:
        return SelfAttnGenerator(dim, heads, depth, num_tokens, mlp_ratio, rng)
    return CrossAttnGenerator(dim, heads, depth, num_tokens, mlp_ratio, cross_attn_ffn, rng)

from dataclasses import dataclass, field
from enum import Enum
import math
from typing import List, Optional, Tuple, Union

import numpy as np

from vitkd.module.tensor.layers import LayerNorm, Linear, Module, trunc_normal
from vitkd.module.tensor.tensor import (Tensor, concat, constant, gelu, matmul,
                                        softmax_rows)
from vitkd.util.errors import ConfigError, ContractError, ShapeError


class TapSource(str, Enum):
    """
    Extraction point of a feature tap inside an encoder layer
    """

    MHA_OUT = "MHA_OUT"  # x + MHA(LN(x))
    FFN_OUT = "FFN_OUT"  # mha_out + FFN(LN(mha_out)), the layer output


@dataclass(frozen=True)
class ViTConfig:
    """
    Shape of a DeiT-style encoder
    """

    image_size: int = 32
    patch_size: int = 4
    depth: int = 4
    dim: int = 32
    heads: int = 2
    mlp_ratio: float = 4.0
    num_classes: int = 10
    seed: int = 0

    def validate(self, name: str = "model") -> None:
        """
        :param name: config section name used in error messages
        """
        if self.patch_size < 1 or self.image_size < 1:
            raise ConfigError(F"{name}: image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(F"{name}: image_size {self.image_size} is not divisible "
                              F"by patch_size {self.patch_size}")
        if self.depth < 1:
            raise ConfigError(F"{name}: depth must be >= 1, got {self.depth}")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigError(F"{name}: dim {self.dim} is not divisible by heads {self.heads}")
        if self.num_classes < 1 or self.mlp_ratio <= 0:
            raise ConfigError(F"{name}: num_classes and mlp_ratio must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2


@dataclass
class FeatureMap:
    """
    Patch-token features of one layer (CLS excluded), batched as [B, N, D]
    """

    layer_index: int
    source: TapSource
    tokens: Tensor
    post_norm: bool = False

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class AttentionMap:
    """
    Row-stochastic (N+1)x(N+1) attention of one head for one sample, CLS included
    """

    layer_index: int
    head_index: int
    sample_index: int
    matrix: Tensor


@dataclass
class ModelOutput:
    logits: Tensor
    taps: List[FeatureMap]
    attentions: List[AttentionMap] = field(default_factory=list)
    final_tokens: Optional[FeatureMap] = None

    def tap(self, layer_index: int, source: TapSource = TapSource.FFN_OUT,
            post_norm: bool = False) -> FeatureMap:
        """
        :param layer_index: encoder layer
        :param source: extraction point
        :param post_norm: take the last layer's tokens after the final norm
        :return: matching feature map
        """
        if post_norm:
            if layer_index != len(self.taps) // 2 - 1:
                raise ConfigError("post-norm features exist for the last layer only")
            return self.final_tokens
        for feature_map in self.taps:
            if feature_map.layer_index == layer_index and feature_map.source == source:
                return feature_map
        raise ConfigError(F"no {source.value} tap for layer {layer_index}")


def patchify(images: Union[np.ndarray, Tensor], cfg: ViTConfig) -> Tensor:
    """
    Cut images into non-overlapping patches in raster order, each flattened
    row-major over (channel, row, column)
    :param images: [3, H, W] or [B, 3, H, W]
    :param cfg: model config (image and patch size)
    :return: [N, 3p^2] or [B, N, 3p^2] constant tensor
    """
    array = images.data if isinstance(images, Tensor) else np.asarray(images)
    unbatched = array.ndim == 3
    if unbatched:
        array = array[None]
    if array.ndim != 4 or array.shape[1] != 3 \
            or array.shape[2] != cfg.image_size or array.shape[3] != cfg.image_size:
        raise ShapeError(F"patchify: expected [3, {cfg.image_size}, {cfg.image_size}] "
                         F"images, got {tuple(array.shape[-3:])}")
    batch, p, grid = array.shape[0], cfg.patch_size, cfg.grid_size
    patches = array.reshape(batch, 3, grid, p, grid, p) \
        .transpose(0, 2, 4, 1, 3, 5) \
        .reshape(batch, grid * grid, 3 * p * p)
    return constant(patches[0] if unbatched else patches)


class Attention(Module):
    """
    Multi-head scaled dot-product attention with separate query and key/value inputs
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._heads = heads

    def _split_heads(self, x: Tensor) -> Tensor:
        batch, tokens, dim = x.shape
        return x.reshape(batch, tokens, self._heads, dim // self._heads).transpose(0, 2, 1, 3)

    def forward(self, x_q: Tensor, x_kv: Tensor,
                key_bias: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
        """
        :param x_q: query tokens [B, Tq, D]
        :param x_kv: key/value tokens [B, Tk, D]
        :param key_bias: additive logit bias per key [B, Tk] (large negative to exclude)
        :return: projected output [B, Tq, D] and probabilities [B, heads, Tq, Tk]
        """
        batch, query_len, dim = x_q.shape
        q = self._split_heads(self.q(x_q))
        k = self._split_heads(self.k(x_kv))
        v = self._split_heads(self.v(x_kv))
        scores = matmul(q, k.swap_last()) * (1.0 / math.sqrt(dim // self._heads))
        if key_bias is not None:
            scores = scores + constant(key_bias[:, None, None, :])
        probs = softmax_rows(scores)
        context = matmul(probs, v).transpose(0, 2, 1, 3).reshape(batch, query_len, dim)
        return self.proj(context), probs.data


class EncoderLayer(Module):
    """
    Pre-norm transformer encoder layer
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        hidden = int(round(dim * mlp_ratio))
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor, np.ndarray]:
        """
        :param x: hidden state [B, T, D]
        :return: layer output (FFN-out), post-residual MHA-out, attention probabilities
        """
        normed = self.norm1(x)
        attn_out, probs = self.attn(normed, normed)
        mha_out = x + attn_out
        y = mha_out + self.fc2(gelu(self.fc1(self.norm2(mha_out))))
        return y, mha_out, probs


class VisionTransformer(Module):
    """
    DeiT-style classifier (CLS token only, no distillation token) exposing
    per-layer MHA-out/FFN-out taps and attention maps
    """

    def __init__(self, cfg: ViTConfig):
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        self._config = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.dim, rng)
        self.cls_token = trunc_normal(rng, (1, 1, cfg.dim))
        self.pos_embed = trunc_normal(rng, (1, cfg.num_patches + 1, cfg.dim))
        self.layers = [EncoderLayer(cfg.dim, cfg.heads, cfg.mlp_ratio, rng)
                       for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, cfg.num_classes, rng)

    @property
    def config(self) -> ViTConfig:
        return self._config

    def forward(self, images: Union[np.ndarray, Tensor],
                return_attention: bool = False) -> ModelOutput:
        """
        :param images: batch [B, 3, S, S]
        :param return_attention: also collect per-head, per-sample attention maps
        :return: logits, feature taps, attention maps
        """
        if images.shape[0] == 0:
            raise ContractError("model forward needs a non-empty batch")
        patches = patchify(images, self._config)
        batch = patches.shape[0]
        tokens = self.patch_embed(patches)
        cls = self.cls_token + constant(np.zeros((batch, 1, self._config.dim)))
        x = concat([cls, tokens], axis=1) + self.pos_embed

        taps: List[FeatureMap] = []
        attentions: List[AttentionMap] = []
        for index, layer in enumerate(self.layers):
            x, mha_out, probs = layer(x)
            taps.append(FeatureMap(index, TapSource.MHA_OUT, mha_out[:, 1:, :]))
            taps.append(FeatureMap(index, TapSource.FFN_OUT, x[:, 1:, :]))
            if return_attention:
                attentions.extend(
                    AttentionMap(index, head, sample, constant(probs[sample, head]))
                    for sample in range(batch) for head in range(probs.shape[1]))

        normed = self.norm(x)
        logits = self.head(normed[:, 0, :])
        final_tokens = FeatureMap(self._config.depth - 1, TapSource.FFN_OUT,
                                  normed[:, 1:, :], post_norm=True)
        return ModelOutput(logits=logits, taps=taps, attentions=attentions,
                           final_tokens=final_tokens)


def attention_average(attentions: List[AttentionMap], layer: int) -> Tensor:
    """
    Mean attention of one layer over all heads and samples
    :param attentions: maps as returned by the model
    :param layer: layer index to average
    :return: (N+1)x(N+1) row-stochastic matrix
    """
    selected = [attention.matrix.data for attention in attentions
                if attention.layer_index == layer]
    if not selected:
        raise ConfigError(F"no attention maps recorded for layer {layer}")
    return constant(np.mean(np.stack(selected), axis=0))


def diagonal_mass(matrix: Tensor) -> float:
    """
    :return: mean of the diagonal entries (how much tokens attend to themselves)
    """
    return float(np.mean(np.diagonal(matrix.data)))

"""Plain pre-norm ViT encoder with tapped intermediate layers.

No class token: the decoder consumes patch tokens only. Taps are the raw
outputs of the indexed layers (residual stream after the layer's MLP); the
final output additionally passes through the closing LayerNorm.
"""

from dataclasses import dataclass
from math import sqrt

import numpy as np

from . import nn
from . import tensor as T
from .rng import SplitMix64
from .tensor import Tensor


@dataclass
class LayerOutputs:
    final: Tensor          # (B, N, C), after the final LayerNorm
    taps: list             # list of (B, N, C) in tap order
    grid: tuple            # (h, w) token grid


def tokens_to_map(x: Tensor, grid) -> Tensor:
    """(B, N, C) -> (B, C, h, w) with N == h*w in row-major order."""
    B, N, C = x.shape
    h, w = grid
    return x.transpose((0, 2, 1)).reshape((B, C, h, w))


def map_to_tokens(x: Tensor) -> Tensor:
    """(B, C, h, w) -> (B, h*w, C)."""
    B, C, h, w = x.shape
    return x.reshape((B, C, h * w)).transpose((0, 2, 1))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, rng: SplitMix64):
        super().__init__()
        if dim % heads:
            raise T.ShapeError(f"msa: dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = nn.Linear(dim, dim, rng)
        self.wk = nn.Linear(dim, dim, rng)
        self.wv = nn.Linear(dim, dim, rng)
        self.wo = nn.Linear(dim, dim, rng)

    def forward(self, x: Tensor, return_attn: bool = False):
        B, N, C = x.shape
        h, dk = self.heads, self.head_dim

        def split(t):
            return t.reshape((B, N, h, dk)).transpose((0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        logits = T.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / sqrt(dk))
        attn = T.softmax(logits, axis=-1)
        ctx = T.matmul(attn, v)                                   # (B, h, N, dk)
        out = self.wo(ctx.transpose((0, 2, 1, 3)).reshape((B, N, C)))
        if return_attn:
            return out, attn
        return out

    __call__ = forward


class TransformerLayer(nn.Module):
    """Pre-norm block: x + MSA(LN(x)), then z + MLP(LN(z)) with GELU inside."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: SplitMix64):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden, rng)
        self.fc2 = nn.Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        z = x + self.attn(self.ln1(x))
        return z + self.fc2(T.gelu(self.fc1(self.ln2(z))))

    __call__ = forward


class PatchEmbed(nn.Module):
    """Non-overlapping strided-conv embedding plus learned positional embeddings.

    Positional embeddings are stored for the configured grid and bilinearly
    resized on the fly when the input grid differs (multi-scale inference).
    """

    def __init__(self, image_size: int, patch_size: int, dim: int, rng: SplitMix64, in_ch: int = 3):
        super().__init__()
        if image_size % patch_size:
            raise T.ShapeError(f"patch_embed: image_size {image_size} not divisible by patch {patch_size}")
        self.patch_size = patch_size
        self.grid0 = image_size // patch_size
        self.proj = nn.Conv2d(in_ch, dim, patch_size, rng, stride=patch_size)
        self.pos = nn.Parameter(nn.trunc_normal_(rng, (1, self.grid0 * self.grid0, dim)))

    def forward(self, images: Tensor):
        B, _, H, W = images.shape
        if H % self.patch_size or W % self.patch_size:
            raise T.ShapeError(f"patch_embed: input {H}x{W} not divisible by patch {self.patch_size}")
        gh, gw = H // self.patch_size, W // self.patch_size
        x = map_to_tokens(self.proj(images))                      # (B, N, C)
        pos = self.pos
        if (gh, gw) != (self.grid0, self.grid0):
            C = pos.shape[2]
            pos_map = tokens_to_map(pos, (self.grid0, self.grid0))
            pos = map_to_tokens(T.bilinear_resize(pos_map, gh, gw))
        return x + pos, (gh, gw)

    __call__ = forward


class ViTBackbone(nn.Module):
    def __init__(self, image_size: int, patch_size: int, dim: int, depth: int,
                 heads: int, mlp_ratio: float, tap_indices, rng: SplitMix64):
        super().__init__()
        taps = list(tap_indices)
        if any(t < 0 or t >= depth for t in taps) or taps != sorted(set(taps)):
            raise T.ShapeError(f"backbone: bad tap indices {taps} for depth {depth}")
        self.tap_indices = taps
        self.embed = PatchEmbed(image_size, patch_size, dim, rng)
        self.layers = nn.ModuleList(
            [TransformerLayer(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        )
        self.final_ln = nn.LayerNorm(dim)

    def forward_with_taps(self, images: Tensor) -> LayerOutputs:
        x, grid = self.embed(images)
        want = set(self.tap_indices)
        taps = {}
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in want:
                taps[i] = x
        return LayerOutputs(final=self.final_ln(x),
                            taps=[taps[i] for i in self.tap_indices],
                            grid=grid)

    __call__ = forward_with_taps

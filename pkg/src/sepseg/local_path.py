"""Local high-frequency pathway: overlapping patch embedding, separation
blocks built on learnable zero-sum high-pass filters, and sigmoid-gated fusion
with the backbone's tapped feature maps.

The pathway runs at twice the backbone grid resolution throughout.
"""

import numpy as np

from . import nn
from . import tensor as T
from .rng import SplitMix64
from .tensor import Tensor


class OverlapPatchEmbed(nn.Module):
    """Conv embedding with kernel = patch, stride = patch/2, padding = patch/4,
    so the output grid is exactly twice the backbone grid."""

    def __init__(self, patch_size: int, out_dim: int, rng: SplitMix64, in_ch: int = 3):
        super().__init__()
        if patch_size % 4:
            raise T.ShapeError(f"overlap_patch_embed: patch {patch_size} must be a multiple of 4")
        self.proj = nn.Conv2d(in_ch, out_dim, patch_size, rng,
                              stride=patch_size // 2, padding=patch_size // 4)

    def forward(self, images: Tensor) -> Tensor:
        return self.proj(images)

    __call__ = forward


class LearnableHighPassFilter(nn.Module):
    """Depthwise conv whose per-channel kernel is Softmax(raw) - 1/k^2.

    The softmax runs jointly over all k*k positions of each channel's kernel,
    so every materialized kernel sums to zero and kills constant inputs. The
    raw logits are the trainable parameters; the kernel is re-derived each
    forward pass. No bias (it would break the constant-kill property).
    """

    def __init__(self, channels: int, kernel: int, rng: SplitMix64):
        super().__init__()
        self.channels = channels
        self.kernel = kernel
        self.raw = nn.Parameter(nn.trunc_normal_(rng, (channels, 1, kernel, kernel)))

    def materialize(self) -> Tensor:
        k2 = self.kernel * self.kernel
        flat = self.raw.reshape((self.channels, k2))
        w = T.softmax(flat, axis=1) - 1.0 / k2
        return w.reshape((self.channels, 1, self.kernel, self.kernel))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.materialize(), None,
                        stride=1, padding=self.kernel // 2, groups=self.channels)

    __call__ = forward


class LocalSeparationBlock(nn.Module):
    """x + Conv1x1(BN(LHF(Conv1x1(x)))) with the inner width expanded."""

    def __init__(self, dim: int, expand_ratio: int, lhf_kernel: int, rng: SplitMix64):
        super().__init__()
        inner = dim * expand_ratio
        self.expand = nn.Conv2d(dim, inner, 1, rng)
        self.lhf = LearnableHighPassFilter(inner, lhf_kernel, rng)
        self.norm = nn.BatchNorm2d(inner)
        self.project = nn.Conv2d(inner, dim, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.project(self.norm(self.lhf(self.expand(x))))

    __call__ = forward


class AttentionGuidedFuse(nn.Module):
    """gate * Xl + Up(Xg) with gate = Sigmoid(BN(Conv1x1(ReLU(BN(cat(GP(Xl), GP(Xg))))))).

    Xg arrives at the backbone width; a 1x1 adapter projects it to the local
    width when the two differ.
    """

    def __init__(self, local_dim: int, backbone_dim: int, rng: SplitMix64):
        super().__init__()
        self.adapter = (nn.Conv2d(backbone_dim, local_dim, 1, rng)
                        if backbone_dim != local_dim else None)
        self.norm_in = nn.BatchNorm2d(2 * local_dim)
        self.gate_conv = nn.Conv2d(2 * local_dim, local_dim, 1, rng)
        self.norm_out = nn.BatchNorm2d(local_dim)

    def forward(self, xl: Tensor, xg: Tensor) -> Tensor:
        if xl.shape[0] != xg.shape[0]:
            raise T.ShapeError(f"attention_guided_fuse: batch mismatch {xl.shape} vs {xg.shape}")
        if self.adapter is not None:
            xg = self.adapter(xg)
        pooled = T.concat([T.global_avg_pool(xl), T.global_avg_pool(xg)], axis=1)
        gate = T.sigmoid(self.norm_out(self.gate_conv(T.relu(self.norm_in(pooled)))))
        up = T.bilinear_resize(xg, xl.shape[2], xl.shape[3])
        return gate * xl + up

    __call__ = forward


class LocalPath(nn.Module):
    """Cascade: overlap embedding -> LSB -> (fuse with tap, LSB) x (T-1).

    Block i > 0 consumes attention_guided_fuse(previous output, taps[i-1]),
    so with T blocks the first T-1 tapped maps are fused here (the last tap is
    left to other consumers). Returns all per-block outputs, each at twice the
    backbone grid.
    """

    def __init__(self, patch_size: int, local_dim: int, backbone_dim: int,
                 num_blocks: int, expand_ratio: int, lhf_kernel: int, rng: SplitMix64):
        super().__init__()
        self.num_blocks = num_blocks
        self.embed = OverlapPatchEmbed(patch_size, local_dim, rng)
        self.blocks = nn.ModuleList(
            [LocalSeparationBlock(local_dim, expand_ratio, lhf_kernel, rng)
             for _ in range(num_blocks)]
        )
        self.fuses = nn.ModuleList(
            [AttentionGuidedFuse(local_dim, backbone_dim, rng)
             for _ in range(max(num_blocks - 1, 0))]
        )

    def forward(self, images: Tensor, tap_maps) -> list:
        """tap_maps: one tapped feature map (B,Cg,h,w) per block; block i>0
        fuses tap_maps[i-1], so the last entry is not consumed here."""
        if len(tap_maps) != self.num_blocks:
            raise T.ShapeError(
                f"local_path: expected {self.num_blocks} tap maps, got {len(tap_maps)}")
        x = self.embed(images)
        outputs = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = self.fuses[i - 1](x, tap_maps[i - 1])
            x = block(x)
            outputs.append(x)
        return outputs

    __call__ = forward

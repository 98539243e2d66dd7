"""Spatially adaptive separation upsampling.

Each stage converts a guidance feature map into per-site banks of four
softmax-normalized 3x3 filters (one bank per channel group), filters the
guided map with them, and pixel-shuffles the four results into a 2x2 block,
doubling the spatial resolution. Two chained stages give 4x.
"""

import numpy as np

from . import nn
from . import tensor as T
from .rng import SplitMix64
from .tensor import Tensor


class SasmStage(nn.Module):
    """One 2x upsampling stage.

    The filter-generating map is a 1x1 conv (a per-site linear layer on the
    guidance channels), zero-initialized so training starts from uniform 1/9
    (smooth averaging) filters. `downsample` prepends the learned 2x2 stride-2
    guidance reduction used when the guidance sits at twice the guided grid.
    """

    def __init__(self, guide_dim: int, groups: int, rng: SplitMix64, downsample: bool):
        super().__init__()
        self.groups = groups
        self.down = nn.Conv2d(guide_dim, guide_dim, 2, rng, stride=2) if downsample else None
        self.filter_gen = nn.Conv2d(guide_dim, groups * 4 * 9, 1, rng)
        self.filter_gen.weight.data[...] = 0.0
        self.filter_gen.bias.data[...] = 0.0

    def downsample_guidance(self, guidance: Tensor) -> Tensor:
        if guidance.shape[2] % 2 or guidance.shape[3] % 2:
            raise T.ShapeError(f"downsample_guidance: odd extents {tuple(guidance.shape)}")
        return self.down(guidance)

    def build_spatial_filters(self, guidance: Tensor) -> Tensor:
        """(B, Cl, H, W) -> (B, groups, 4, 9, H, W), each 9-tap slice softmaxed."""
        B, _, H, W = guidance.shape
        raw = self.filter_gen(guidance)
        raw = raw.reshape((B, self.groups, 4, 9, H, W))
        return T.softmax(raw, axis=3)

    def forward(self, x: Tensor, guidance: Tensor) -> Tensor:
        if self.down is not None:
            guidance = self.downsample_guidance(guidance)
        if guidance.shape[2:] != x.shape[2:]:
            raise T.ShapeError(
                f"sasm: guidance grid {tuple(guidance.shape)} does not match input {tuple(x.shape)}")
        saf = self.build_spatial_filters(guidance)
        return T.pixel_shuffle(T.saf_apply(x, saf), 2)

    __call__ = forward


class SasmStack(nn.Module):
    """Two chained stages: the first guided by the (downsampled) last local
    block output, the second by the penultimate one. Returns both the 2x map
    (which feeds the decoder) and the final 4x map."""

    def __init__(self, guide_dim: int, groups: int, rng: SplitMix64):
        super().__init__()
        self.stage1 = SasmStage(guide_dim, groups, rng, downsample=True)
        self.stage2 = SasmStage(guide_dim, groups, rng, downsample=False)

    def forward(self, final_map: Tensor, xl_last: Tensor, xl_penultimate: Tensor):
        up1 = self.stage1(final_map, xl_last)
        up2 = self.stage2(up1, xl_penultimate)
        return up1, up2

    __call__ = forward

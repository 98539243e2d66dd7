"""High-frequency pathway tests: overlapping embedding, zero-sum high-pass
filters, separation blocks, and gated fusion."""

import numpy as np
import pytest

import oracles
from sepseg import tensor as T
from sepseg.local_path import (AttentionGuidedFuse, LearnableHighPassFilter,
                               LocalPath, LocalSeparationBlock, OverlapPatchEmbed)
from sepseg.rng import SplitMix64
from sepseg.tensor import ShapeError, Tensor


def rnd(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


class TestOverlapPatchEmbed:
    def test_grid_is_twice_backbone_grid(self):
        emb = OverlapPatchEmbed(8, 12, SplitMix64(1))
        out = emb(Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32)))
        assert out.shape == (2, 12, 8, 8)

    def test_matches_conv_oracle(self):
        rng = np.random.default_rng(2)
        emb = OverlapPatchEmbed(8, 5, SplitMix64(2))
        img = rnd(rng, 2, 3, 24, 24)
        out = emb(Tensor(img))
        ref = oracles.conv2d_ref(img, emb.proj.weight.data, emb.proj.bias.data,
                                 stride=4, padding=2)
        assert np.abs(out.data - ref).max() <= 1e-5

    def test_patch_not_multiple_of_four_rejected(self):
        with pytest.raises(ShapeError):
            OverlapPatchEmbed(6, 8, SplitMix64(3))


class TestLearnableHighPassFilter:
    def test_uniform_logits_give_null_kernel(self):
        lhf = LearnableHighPassFilter(4, 5, SplitMix64(10))
        lhf.raw.data[...] = 0.7
        k = lhf.materialize().data
        assert np.abs(k).max() <= 1e-7

    def test_two_logit_closed_form(self):
        w = T.softmax(Tensor(np.array([[np.log(3.0), 0.0]], dtype=np.float32)), axis=1)
        k = w - 0.5
        assert np.abs(k.data - [[0.25, -0.25]]).max() <= 1e-6

    def test_single_hot_logit_closed_form(self):
        lhf = LearnableHighPassFilter(1, 5, SplitMix64(11))
        lhf.raw.data[...] = 0.0
        lhf.raw.data[0, 0, 0, 0] = np.log(3.0)
        k = lhf.materialize().data.reshape(25)
        assert abs(k[0] - (3.0 / 27.0 - 1.0 / 25.0)) <= 1e-7
        assert np.abs(k[1:] - (1.0 / 27.0 - 1.0 / 25.0)).max() <= 1e-7

    def test_kernels_sum_to_zero(self):
        rng = np.random.default_rng(12)
        for trial in range(20):
            c = int(rng.integers(1, 9))
            k = int(rng.choice([3, 5, 7]))
            lhf = LearnableHighPassFilter(c, k, SplitMix64(100 + trial))
            lhf.raw.data[...] = rnd(rng, c, 1, k, k) * 3.0
            sums = lhf.materialize().data.reshape(c, -1).sum(axis=1)
            assert np.abs(sums).max() <= 1e-6

    def test_entry_bounds(self):
        rng = np.random.default_rng(13)
        lhf = LearnableHighPassFilter(8, 5, SplitMix64(13))
        lhf.raw.data[...] = rnd(rng, 8, 1, 5, 5) * 4.0
        k = lhf.materialize().data
        assert k.min() >= -1.0 / 25.0 and k.max() <= 1.0 - 1.0 / 25.0

    def test_constant_input_killed_in_interior(self):
        rng = np.random.default_rng(14)
        lhf = LearnableHighPassFilter(3, 5, SplitMix64(14))
        lhf.raw.data[...] = rnd(rng, 3, 1, 5, 5)
        x = Tensor(np.full((2, 3, 12, 12), 2.5, dtype=np.float32))
        out = lhf(x).data
        assert np.abs(out[:, :, 2:-2, 2:-2]).max() <= 1e-5

    def test_matches_depthwise_conv_oracle(self):
        rng = np.random.default_rng(15)
        lhf = LearnableHighPassFilter(4, 3, SplitMix64(15))
        lhf.raw.data[...] = rnd(rng, 4, 1, 3, 3)
        x = rnd(rng, 2, 4, 6, 7)
        out = lhf(Tensor(x))
        ref = oracles.conv2d_ref(x, lhf.materialize().data, None,
                                 stride=1, padding=1, groups=4)
        assert np.abs(out.data - ref).max() <= 1e-6


class TestLocalSeparationBlock:
    def test_zero_projection_is_identity(self):
        rng = np.random.default_rng(20)
        blk = LocalSeparationBlock(6, 2, 5, SplitMix64(20))
        blk.project.weight.data[...] = 0.0
        blk.project.bias.data[...] = 0.0
        x = rnd(rng, 2, 6, 8, 8)
        out = blk(Tensor(x))
        assert np.array_equal(out.data, x)

    def test_odd_spatial_shape_preserved(self):
        blk = LocalSeparationBlock(4, 2, 3, SplitMix64(21))
        out = blk(Tensor(np.zeros((1, 4, 7, 9), dtype=np.float32)))
        assert out.shape == (1, 4, 7, 9)

    def test_eval_mode_matches_composed_oracle(self):
        rng = np.random.default_rng(22)
        blk = LocalSeparationBlock(3, 2, 3, SplitMix64(22))
        blk.eval()
        x = rnd(rng, 2, 3, 6, 6)

        h = oracles.conv2d_ref(x, blk.expand.weight.data, blk.expand.bias.data)
        h = oracles.conv2d_ref(h, blk.lhf.materialize().data, None,
                               stride=1, padding=1, groups=6)
        inv = 1.0 / np.sqrt(blk.norm.running_var + blk.norm.eps)
        h = (h - blk.norm.running_mean[:, None, None]) * inv[:, None, None]
        h = h * blk.norm.gamma.data[:, None, None] + blk.norm.beta.data[:, None, None]
        ref = x + oracles.conv2d_ref(h, blk.project.weight.data, blk.project.bias.data)

        out = blk(Tensor(x))
        assert np.abs(out.data - ref).max() <= 1e-5


class TestAttentionGuidedFuse:
    def test_zero_gate_conv_halves_local_branch(self):
        rng = np.random.default_rng(30)
        fuse = AttentionGuidedFuse(5, 5, SplitMix64(30))
        fuse.eval()
        fuse.gate_conv.weight.data[...] = 0.0
        fuse.gate_conv.bias.data[...] = 0.0
        xl, xg = rnd(rng, 2, 5, 8, 8), rnd(rng, 2, 5, 8, 8)
        out = fuse(Tensor(xl), Tensor(xg))
        assert np.array_equal(out.data, np.float32(0.5) * xl + xg)

    def test_gate_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(31)
        fuse = AttentionGuidedFuse(4, 4, SplitMix64(31))
        fuse.eval()
        xl = np.ones((2, 4, 6, 6), dtype=np.float32)
        xg = rnd(rng, 2, 4, 6, 6)
        out = fuse(Tensor(xl), Tensor(xg)).data
        gate = out - xg
        assert gate.min() > 0.0 and gate.max() < 1.0

    def test_upsamples_coarser_global_map(self):
        fuse = AttentionGuidedFuse(4, 4, SplitMix64(32))
        fuse.eval()
        out = fuse(Tensor(np.zeros((1, 4, 8, 8), dtype=np.float32)),
                   Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32)))
        assert out.shape == (1, 4, 8, 8)

    def test_adapter_only_when_widths_differ(self):
        assert AttentionGuidedFuse(4, 4, SplitMix64(33)).adapter is None
        assert AttentionGuidedFuse(4, 8, SplitMix64(33)).adapter is not None

    def test_batch_mismatch_rejected(self):
        fuse = AttentionGuidedFuse(4, 4, SplitMix64(34))
        with pytest.raises(ShapeError):
            fuse(Tensor(np.zeros((2, 4, 4, 4), dtype=np.float32)),
                 Tensor(np.zeros((3, 4, 4, 4), dtype=np.float32)))


class TestLocalPath:
    def test_single_block_is_embed_then_block(self):
        rng = np.random.default_rng(40)
        path = LocalPath(8, 6, 4, 1, 2, 3, SplitMix64(40))
        img = Tensor(rnd(rng, 1, 3, 32, 32))
        outs = path(img, [Tensor(rnd(rng, 1, 4, 4, 4))])
        manual = path.blocks[0](path.embed(img))
        assert len(outs) == 1 and len(path.fuses) == 0
        assert np.array_equal(outs[0].data, manual.data)

    def test_two_block_wiring(self):
        rng = np.random.default_rng(41)
        path = LocalPath(8, 6, 4, 2, 2, 3, SplitMix64(41))
        path.eval()
        img = Tensor(rnd(rng, 2, 3, 32, 32))
        taps = [Tensor(rnd(rng, 2, 4, 4, 4)) for _ in range(2)]
        outs = path(img, taps)

        x = path.blocks[0](path.embed(img))
        assert np.array_equal(outs[0].data, x.data)
        x = path.blocks[1](path.fuses[0](x, taps[0]))
        assert np.array_equal(outs[1].data, x.data)

    def test_all_outputs_at_double_grid(self):
        path = LocalPath(8, 6, 4, 3, 2, 3, SplitMix64(42))
        path.eval()
        taps = [Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32)) for _ in range(3)]
        outs = path(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)), taps)
        assert [o.shape for o in outs] == [(1, 6, 8, 8)] * 3

    def test_tap_count_mismatch_rejected(self):
        path = LocalPath(8, 6, 4, 2, 2, 3, SplitMix64(43))
        with pytest.raises(ShapeError):
            path(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)), [])

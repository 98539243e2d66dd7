"""Full segmentation models: the separation head and the linear baseline.

SegmentationModel pipeline per forward pass:
  1. backbone tokens + tapped intermediate maps,
  2. local path (overlap embedding + separation blocks, fusing the taps),
  3. two guided-upsampling stages: the first output feeds the decoder, the
     second (4x the backbone grid) carries the per-pixel features,
  4. query decoder with discriminative cross-attention,
  5. scaled-cosine mask prediction at quarter image resolution.

Labels enter forward() only to build the training-time similarity targets;
inference output is identical with labels omitted.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .backbone import ViTBackbone, map_to_tokens, tokens_to_map
from .config import ModelConfig
from .decoder import DcaDecoder, MaskPredictor, nearest_downsample_labels
from .local_path import LocalPath
from .rng import SplitMix64
from .sasm import SasmStack
from .tensor import Tensor


@dataclass
class ModelOutput:
    logits: Tensor                 # (B, K, H/4, W/4) class logits
    aux: list = field(default_factory=list)       # similarity logits per decoder layer
    attn: list = field(default_factory=list)      # cross-attention maps (probe/eval)
    boundary_logits: Tensor = None                # (B, 1, H/2-grid) when enabled
    decoder_grid: tuple = None     # token grid of the decoder input
    flat_labels: np.ndarray = None  # labels downsampled to the decoder grid
    local_features: Tensor = None  # final local-path map (probe)
    backbone_final: Tensor = None  # final backbone map (probe)


class SegmentationModel(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: SplitMix64):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = ViTBackbone(cfg.image_size, cfg.patch_size, cfg.embed_dim,
                                    cfg.depth, cfg.heads, cfg.mlp_ratio,
                                    cfg.tap_indices, rng)
        self.local = LocalPath(cfg.patch_size, cfg.local_dim, cfg.embed_dim,
                               cfg.num_blocks, cfg.expand_ratio, cfg.lhf_kernel, rng)
        self.sasm = SasmStack(cfg.local_dim, cfg.sasm_groups, rng)
        self.decoder = DcaDecoder(cfg.num_classes, cfg.embed_dim, cfg.decoder_depth,
                                  cfg.decoder_mlp_ratio, cfg.scale_init,
                                  cfg.ignore_value, rng)
        self.mask_pred = MaskPredictor(cfg.scale_init)
        self.boundary_head = (nn.Conv2d(cfg.local_dim, 1, 1, rng)
                              if cfg.use_boundary_loss else None)

    def forward(self, images: Tensor, labels: np.ndarray = None,
                collect_attn: bool = False) -> ModelOutput:
        lo = self.backbone.forward_with_taps(images)
        tap_maps = [tokens_to_map(t, lo.grid) for t in lo.taps]
        local_outs = self.local(images, tap_maps)
        xl_last = local_outs[-1]
        xl_penult = local_outs[-2] if len(local_outs) >= 2 else local_outs[-1]

        final_map = tokens_to_map(lo.final, lo.grid)
        up1, up2 = self.sasm(final_map, xl_last, xl_penult)

        decoder_grid = (up1.shape[2], up1.shape[3])
        flat_labels = None
        if labels is not None:
            ds = nearest_downsample_labels(labels, *decoder_grid)
            flat_labels = ds.reshape(ds.shape[0], -1)

        dec = self.decoder(map_to_tokens(up1), flat_labels, collect_attn)
        logits = self.mask_pred(dec.mask_embeddings, up2)

        boundary = self.boundary_head(xl_last) if self.boundary_head is not None else None
        return ModelOutput(logits=logits, aux=dec.aux, attn=dec.attn,
                           boundary_logits=boundary, decoder_grid=decoder_grid,
                           flat_labels=flat_labels,
                           local_features=xl_last, backbone_final=final_map)

    __call__ = forward

    def param_groups(self):
        """(name, params, lr_mult) groups: the local path, upsampling stages and
        boundary head train at 10x; the backbone, decoder, queries and mask
        scale stay at 1x."""
        fast_prefixes = ("local.", "sasm.", "boundary_head.")
        base, fast = [], []
        for name, p in self.named_parameters():
            (fast if name.startswith(fast_prefixes) else base).append(p)
        mult = self.cfg.new_param_lr_mult
        return [("base", base, 1.0), ("fast", fast, mult)]


class LinearDecoderModel(nn.Module):
    """Backbone + zero-initialized linear class head at the token grid.

    Zero init makes the step-0 logits exactly uniform, so the initial
    cross-entropy equals ln(num_classes).
    """

    def __init__(self, cfg: ModelConfig, rng: SplitMix64):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = ViTBackbone(cfg.image_size, cfg.patch_size, cfg.embed_dim,
                                    cfg.depth, cfg.heads, cfg.mlp_ratio,
                                    cfg.tap_indices, rng)
        self.head = nn.Linear(cfg.embed_dim, cfg.num_classes, rng)
        self.head.weight.data[...] = 0.0
        self.head.bias.data[...] = 0.0

    def forward(self, images: Tensor, labels: np.ndarray = None,
                collect_attn: bool = False) -> ModelOutput:
        lo = self.backbone.forward_with_taps(images)
        logits = tokens_to_map(self.head(lo.final), lo.grid)
        return ModelOutput(logits=logits, decoder_grid=lo.grid,
                           backbone_final=tokens_to_map(lo.final, lo.grid))

    __call__ = forward

    def param_groups(self):
        return [("base", list(self.parameters()), 1.0)]


def build_model(cfg: ModelConfig, rng: SplitMix64 = None):
    rng = rng if rng is not None else SplitMix64(cfg.seed)
    if cfg.decoder_kind == "linear":
        return LinearDecoderModel(cfg, rng)
    return SegmentationModel(cfg, rng)

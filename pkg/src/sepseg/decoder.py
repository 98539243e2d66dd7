"""Query decoder with discriminative cross-attention.

Cross-attention L2-normalizes projected queries and keys and multiplies the
cosine logits by a learned positive scale (stored as a log so positivity
survives optimization). In training mode each cross-attention additionally
emits query-to-region and patch-to-region similarity logits against the
per-class region embeddings of its own normalized keys; these feed the
matching losses only and add nothing to the inference path.
"""

from dataclasses import dataclass, field
from math import log

import numpy as np

from . import nn
from . import tensor as T
from .backbone import MultiHeadSelfAttention, map_to_tokens
from .rng import SplitMix64
from .tensor import Tensor

NEG_MASK = -1e9


def nearest_downsample_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-sampled nearest-neighbor label reduction; preserves discreteness."""
    B, H, W = labels.shape
    ys = np.minimum((np.floor((np.arange(out_h) + 0.5) * H / out_h)).astype(np.int64), H - 1)
    xs = np.minimum((np.floor((np.arange(out_w) + 0.5) * W / out_w)).astype(np.int64), W - 1)
    return labels[:, ys][:, :, xs]


@dataclass
class RegionEmbeddings:
    embeddings: Tensor        # (B, K, C); absent classes are exactly zero rows
    presence: np.ndarray      # (B, K) bool


def region_embeddings(k_norm: Tensor, flat_labels: np.ndarray, num_classes: int,
                      ignore_value: int = 255) -> RegionEmbeddings:
    """Per-class mean of normalized key rows under the flattened label map.

    flat_labels: (B, N) ints; ignore-labeled positions feed no class.
    """
    B, N, C = k_norm.shape
    if flat_labels.shape != (B, N):
        raise T.ShapeError(f"region_embeddings: labels {flat_labels.shape} vs keys {(B, N)}")
    valid = flat_labels != ignore_value
    if valid.any() and flat_labels[valid].max() >= num_classes:
        raise ValueError(f"region_embeddings: label {int(flat_labels[valid].max())} "
                         f">= num_classes {num_classes}")
    onehot = np.zeros((B, num_classes, N), dtype=k_norm.dtype)
    b_idx, n_idx = np.nonzero(valid)
    onehot[b_idx, flat_labels[b_idx, n_idx], n_idx] = 1.0
    counts = onehot.sum(axis=2)
    weights = onehot / np.maximum(counts, 1.0)[:, :, None]
    emb = T.matmul(Tensor(weights), k_norm)
    return RegionEmbeddings(embeddings=emb, presence=counts > 0)


@dataclass
class AuxSimilarities:
    q2r_logits: Tensor        # (B, K, K), absent-class columns masked
    p2r_logits: Tensor        # (B, N, K), absent-class columns masked
    presence: np.ndarray      # (B, K) bool


class DiscriminativeCrossAttention(nn.Module):
    def __init__(self, dim: int, scale_init: float, num_classes: int,
                 ignore_value: int, rng: SplitMix64):
        super().__init__()
        self.num_classes = num_classes
        self.ignore_value = ignore_value
        self.wq = nn.Linear(dim, dim, rng)
        self.wk = nn.Linear(dim, dim, rng)
        self.wv = nn.Linear(dim, dim, rng)
        self.wo = nn.Linear(dim, dim, rng)
        self.log_scale = nn.Parameter(np.array(log(scale_init), dtype=np.float32))

    def forward(self, queries: Tensor, tokens: Tensor, flat_labels=None,
                collect_attn: bool = False):
        qn = T.l2_normalize(self.wq(queries), axis=-1)
        kn = T.l2_normalize(self.wk(tokens), axis=-1)
        v = self.wv(tokens)
        scale = T.texp(self.log_scale)
        attn = T.softmax(T.matmul(qn, kn.transpose((0, 2, 1))) * scale, axis=-1)
        out = self.wo(T.matmul(attn, v))

        aux = None
        if flat_labels is not None:
            re = region_embeddings(kn, flat_labels, self.num_classes, self.ignore_value)
            ren = T.l2_normalize(re.embeddings, axis=-1)
            col_mask = Tensor(np.where(re.presence, 0.0, NEG_MASK)[:, None, :]
                              .astype(qn.dtype))
            sim = lambda rows: T.matmul(rows, ren.transpose((0, 2, 1))) * scale + col_mask
            aux = AuxSimilarities(q2r_logits=sim(qn), p2r_logits=sim(kn),
                                  presence=re.presence)
        attn_np = attn.data.copy() if collect_attn else None
        return out, aux, attn_np

    __call__ = forward


class DecoderLayer(nn.Module):
    """Pre-norm residual block: query self-attention, discriminative
    cross-attention to the patch tokens, then an MLP."""

    def __init__(self, dim: int, mlp_ratio: float, scale_init: float,
                 num_classes: int, ignore_value: int, rng: SplitMix64):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.ln1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadSelfAttention(dim, 1, rng)
        self.ln2 = nn.LayerNorm(dim)
        self.cross = DiscriminativeCrossAttention(dim, scale_init, num_classes,
                                                  ignore_value, rng)
        self.ln3 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden, rng)
        self.fc2 = nn.Linear(hidden, dim, rng)

    def forward(self, q: Tensor, tokens: Tensor, flat_labels, collect_attn: bool):
        q = q + self.self_attn(self.ln1(q))
        ca, aux, attn = self.cross(self.ln2(q), tokens, flat_labels, collect_attn)
        q = q + ca
        q = q + self.fc2(T.gelu(self.fc1(self.ln3(q))))
        return q, aux, attn

    __call__ = forward


@dataclass
class DecodeResult:
    mask_embeddings: Tensor   # (B, K, C)
    aux: list = field(default_factory=list)    # AuxSimilarities per layer
    attn: list = field(default_factory=list)   # (B, K, N) numpy maps per layer


class DcaDecoder(nn.Module):
    """One learnable query per class; depth blocks of self/cross attention.

    With depth 0 the mask embeddings are the raw queries.
    """

    def __init__(self, num_classes: int, dim: int, depth: int, mlp_ratio: float,
                 scale_init: float, ignore_value: int, rng: SplitMix64):
        super().__init__()
        self.num_classes = num_classes
        self.queries = nn.Parameter(nn.trunc_normal_(rng, (num_classes, dim)))
        self.layers = nn.ModuleList(
            [DecoderLayer(dim, mlp_ratio, scale_init, num_classes, ignore_value, rng)
             for _ in range(depth)]
        )

    def forward(self, tokens: Tensor, flat_labels=None, collect_attn: bool = False) -> DecodeResult:
        B = tokens.shape[0]
        K, C = self.queries.shape
        q = T.broadcast_to(self.queries.reshape((1, K, C)), (B, K, C))
        result = DecodeResult(mask_embeddings=q)
        for layer in self.layers:
            q, aux, attn = layer(q, tokens, flat_labels, collect_attn)
            if aux is not None:
                result.aux.append(aux)
            if attn is not None:
                result.attn.append(attn)
        result.mask_embeddings = q
        return result

    __call__ = forward


class MaskPredictor(nn.Module):
    """Scaled cosine between mask embeddings and per-pixel features."""

    def __init__(self, scale_init: float):
        super().__init__()
        self.log_scale = nn.Parameter(np.array(log(scale_init), dtype=np.float32))

    def forward(self, mask_emb: Tensor, feat_map: Tensor) -> Tensor:
        B, K, C = mask_emb.shape
        Bf, Cf, H, W = feat_map.shape
        if Cf != C or Bf != B:
            raise T.ShapeError(f"mask_prediction: embeddings {tuple(mask_emb.shape)} "
                               f"vs features {tuple(feat_map.shape)}")
        me = T.l2_normalize(mask_emb, axis=-1)
        tn = T.l2_normalize(map_to_tokens(feat_map), axis=-1)
        logits = T.matmul(me, tn.transpose((0, 2, 1))) * T.texp(self.log_scale)
        return logits.reshape((B, K, H, W))

    __call__ = forward

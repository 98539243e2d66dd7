"""Loss assembly: segmentation cross-entropy, the two region-matching terms,
and the optional binary boundary term.

All losses take the label map at image resolution as a plain integer array;
prediction logits are bilinearly upsampled to the label size before scoring.
Every term is 0 (with a zero valid count) when nothing valid contributes.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

BOUNDARY_WEIGHT = 0.4
POS_WEIGHT_CAP = 50.0


@dataclass
class LossReport:
    total: Tensor
    seg: Tensor
    q2r: Tensor
    p2r: Tensor
    boundary: Tensor
    valid_counts: dict

    def scalars(self) -> dict:
        out = {k: float(getattr(self, k).item()) for k in ("total", "seg", "q2r", "p2r", "boundary")}
        out.update({f"n_{k}": v for k, v in self.valid_counts.items()})
        return out


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def cross_entropy_seg(logits: Tensor, labels: np.ndarray, ignore_value: int = 255):
    """Mean NLL over non-ignored pixels; logits are upsampled to the label size."""
    B, K, _, _ = logits.shape
    Bl, H, W = labels.shape
    if Bl != B:
        raise T.ShapeError(f"cross_entropy_seg: batch mismatch {tuple(logits.shape)} vs {labels.shape}")
    up = T.bilinear_resize(logits, H, W)
    logp = T.log_softmax(up, axis=1)
    valid = labels != ignore_value
    count = int(valid.sum())
    if count == 0:
        return _zero(logits.dtype), 0
    onehot = np.zeros((B, K, H, W), dtype=logits.dtype)
    b, h, w = np.nonzero(valid)
    onehot[b, labels[b, h, w], h, w] = 1.0
    loss = -(logp * Tensor(onehot)).sum() / float(count)
    return loss, count


def matching_losses(aux_list, flat_labels: np.ndarray, ignore_value: int = 255):
    """Cross-entropy on the similarity logits, averaged over decoder layers.

    Query-to-region: target is the identity restricted to present classes;
    rows of absent classes are excluded. Patch-to-region: target is each valid
    pixel's class. Returns (q2r, p2r, counts).
    """
    if not aux_list:
        return _zero(np.float32), _zero(np.float32), {"q2r_rows": 0, "p2r_pixels": 0}
    dtype = aux_list[0].q2r_logits.dtype
    q2r_total, p2r_total = _zero(dtype), _zero(dtype)
    rows = pixels = 0
    B, N, K = aux_list[0].p2r_logits.shape
    valid = flat_labels != ignore_value
    n_pix = int(valid.sum())
    onehot = np.zeros((B, N, K), dtype=dtype)
    b, n = np.nonzero(valid)
    onehot[b, n, flat_labels[b, n]] = 1.0
    eye = np.eye(K, dtype=dtype)[None]

    for aux in aux_list:
        presence = aux.presence.astype(dtype)
        n_rows = int(presence.sum())
        rows += n_rows
        pixels += n_pix
        if n_rows:
            lp = T.log_softmax(aux.q2r_logits, axis=2)
            diag = (lp * Tensor(eye)).sum(axis=2)              # (B, K)
            q2r_total = q2r_total + -(diag * Tensor(presence)).sum() / float(n_rows)
        if n_pix:
            lp = T.log_softmax(aux.p2r_logits, axis=2)
            p2r_total = p2r_total + -(lp * Tensor(onehot)).sum() / float(n_pix)

    L = float(len(aux_list))
    return q2r_total / L, p2r_total / L, {"q2r_rows": rows, "p2r_pixels": pixels}


def boundary_map(labels: np.ndarray, ignore_value: int = 255) -> np.ndarray:
    """True where any 4-neighbor carries a different non-ignore label."""
    m = np.zeros(labels.shape, dtype=bool)
    valid = labels != ignore_value
    diff = (labels[:, 1:, :] != labels[:, :-1, :]) & valid[:, 1:, :] & valid[:, :-1, :]
    m[:, 1:, :] |= diff
    m[:, :-1, :] |= diff
    diff = (labels[:, :, 1:] != labels[:, :, :-1]) & valid[:, :, 1:] & valid[:, :, :-1]
    m[:, :, 1:] |= diff
    m[:, :, :-1] |= diff
    return m


def boundary_loss(boundary_logits: Tensor, labels: np.ndarray, ignore_value: int = 255):
    """Positive-weighted binary cross-entropy against the 4-neighbor boundary map.

    The positive-class weight is negatives/positives per batch, capped at 50.
    No boundary pixels -> loss 0.
    """
    B, C, _, _ = boundary_logits.shape
    if C != 1:
        raise T.ShapeError(f"boundary_loss: expected single-channel logits, got {tuple(boundary_logits.shape)}")
    Bl, H, W = labels.shape
    target = boundary_map(labels, ignore_value)
    valid = labels != ignore_value
    pos = int((target & valid).sum())
    n_valid = int(valid.sum())
    if pos == 0:
        return _zero(boundary_logits.dtype), 0
    w_pos = min((n_valid - pos) / pos, POS_WEIGHT_CAP)
    z = T.bilinear_resize(boundary_logits, H, W).reshape((B, H, W))
    y = Tensor(target.astype(boundary_logits.dtype))
    vmask = Tensor(valid.astype(boundary_logits.dtype))
    per_pixel = y * T.softplus(-z) * w_pos + (1.0 - y) * T.softplus(z)
    loss = (per_pixel * vmask).sum() / float(n_valid)
    return loss, pos


def total_loss(seg, q2r=None, p2r=None, boundary=None, counts=None) -> LossReport:
    """Weighted sum: seg + q2r + p2r (unit weights) + 0.4 * boundary.

    Pass None to drop a term (e.g. the linear baseline supplies only seg).
    """
    dtype = seg.dtype
    q2r = q2r if q2r is not None else _zero(dtype)
    p2r = p2r if p2r is not None else _zero(dtype)
    bnd = boundary if boundary is not None else _zero(dtype)
    total = seg + q2r + p2r + bnd * BOUNDARY_WEIGHT
    return LossReport(total=total, seg=seg, q2r=q2r, p2r=p2r, boundary=bnd,
                      valid_counts=dict(counts or {}))

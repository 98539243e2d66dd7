"""Inference protocols: sliding-window tiling and multi-scale ensembling.

Sliding-window accumulates per-window logits (upsampled to window size) into
an image-sized canvas together with a coverage count, then divides; windows
are visited in row-major index order so the reduction is deterministic.
Multi-scale resizes the image per scale, infers, resizes logits back to the
native size, and averages softmax probabilities (optionally also over a
horizontal mirror) before the argmax.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)
FINE_SCALES = (1.0, 1.25, 1.5, 1.75)


@dataclass
class SlidingWindowResult:
    logits: np.ndarray    # (B, K, H, W)
    coverage: np.ndarray  # (H, W) int window counts
    window: int           # effective (possibly clipped) window size
    clipped: bool         # True when the requested window exceeded the image


def _as_array(images) -> np.ndarray:
    a = images.numpy() if isinstance(images, Tensor) else np.asarray(images)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise ValueError(f"infer: expected (3,H,W) or (B,3,H,W) images, got {a.shape}")
    return np.ascontiguousarray(a, dtype=a.dtype if a.dtype == np.float64 else np.float32)


def _offsets(extent: int, window: int, stride: int):
    offs = list(range(0, extent - window + 1, stride))
    if offs[-1] != extent - window:
        offs.append(extent - window)
    return offs


def _forward_logits(model, images: np.ndarray) -> np.ndarray:
    """Run the model and return logits upsampled to the input size."""
    H, W = images.shape[2], images.shape[3]
    out = model(Tensor(images))
    return T.bilinear_resize(out.logits, H, W).numpy()


def sliding_window_infer(model, images, window: int, stride: int) -> SlidingWindowResult:
    imgs = _as_array(images)
    B, _, H, W = imgs.shape
    if stride <= 0 or window <= 0:
        raise ValueError("sliding_window_infer: window and stride must be positive")
    if stride > window:
        raise ValueError(f"sliding_window_infer: stride {stride} exceeds window {window}")

    patch = model.cfg.patch_size
    clipped = window > min(H, W)
    eff = min(window, H, W)
    eff -= eff % patch
    if eff <= 0:
        raise ValueError(f"sliding_window_infer: image {H}x{W} smaller than one patch")
    stride = min(stride, eff)

    logits_sum = None
    coverage = np.zeros((H, W), dtype=np.int64)
    for oy in _offsets(H, eff, stride):
        for ox in _offsets(W, eff, stride):
            tile = np.ascontiguousarray(imgs[:, :, oy : oy + eff, ox : ox + eff])
            lg = _forward_logits(model, tile)
            if logits_sum is None:
                logits_sum = np.zeros((B, lg.shape[1], H, W), dtype=lg.dtype)
            logits_sum[:, :, oy : oy + eff, ox : ox + eff] += lg
            coverage[oy : oy + eff, ox : ox + eff] += 1
    logits = logits_sum / coverage[None, None].astype(logits_sum.dtype)
    return SlidingWindowResult(logits=logits, coverage=coverage,
                               window=eff, clipped=clipped)


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def _snap(size: int, patch: int) -> int:
    return max(patch, int(round(size / patch)) * patch)


def scaled_size(H: int, W: int, scale: float, patch: int):
    return _snap(int(round(H * scale)), patch), _snap(int(round(W * scale)), patch)


def multi_scale_infer(model, images, scales=(1.0,), flip: bool = False,
                      window: int = None, stride: int = None) -> np.ndarray:
    """Scale-ensembled prediction; returns the argmax label map (B, H, W).

    Scaled sizes snap to the nearest patch-size multiple. When `window` is
    None each scaled image is inferred in one forward pass; otherwise
    sliding-window inference runs at every scale.
    """
    scales = tuple(scales)
    if not scales:
        raise ValueError("multi_scale_infer: empty scale list")
    imgs = _as_array(images)
    B, _, H, W = imgs.shape
    patch = model.cfg.patch_size

    prob_sum = None
    n_terms = 0
    variants = [imgs] + ([np.ascontiguousarray(imgs[:, :, :, ::-1])] if flip else [])
    for scale in scales:
        sh, sw = scaled_size(H, W, scale, patch)
        for vi, var in enumerate(variants):
            scaled = T.bilinear_resize(Tensor(var), sh, sw).numpy()
            if window is None:
                lg = _forward_logits(model, scaled)
            else:
                lg = sliding_window_infer(model, scaled, window,
                                          stride if stride is not None else window).logits
            lg = T.bilinear_resize(Tensor(lg), H, W).numpy()
            if vi == 1:
                lg = lg[:, :, :, ::-1]
            p = _softmax_np(lg, axis=1)
            prob_sum = p if prob_sum is None else prob_sum + p
            n_terms += 1
    probs = prob_sum / n_terms
    return probs.argmax(axis=1).astype(np.uint8)

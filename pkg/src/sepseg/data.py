"""Deterministic synthetic scenes and corruption transforms.

Scenes composite colored shapes back-to-front over a background: axis-aligned
rectangles, disks, and thin lines (1-2 px wide, the small/thin-structure
class). Class ids: 0 background, 1 rectangle, 2 disk, 3 line. The PRNG is
splitmix64 seeded with (spec.seed XOR scene index), so any scene regenerates
bit-identically in isolation.
"""

import math
from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64

CLASS_NAMES = ("background", "rectangle", "disk", "line")

# Per-class base colors (RGB in [0,1]); instances jitter around these.
BASE_COLORS = {
    0: (0.15, 0.20, 0.25),
    1: (0.80, 0.30, 0.25),
    2: (0.25, 0.45, 0.80),
    3: (0.90, 0.85, 0.30),
}

CORRUPTION_KINDS = ("gaussian-noise", "gaussian-blur", "brightness", "contrast")

# Severity 1..5 parameter tables (severity 0 is the identity).
NOISE_STD = (0.04, 0.08, 0.12, 0.18, 0.26)
BLUR_SIGMA = (0.5, 0.75, 1.0, 1.5, 2.0)
BRIGHTNESS_DELTA = (0.06, 0.12, 0.18, 0.24, 0.30)
CONTRAST_FACTOR = (0.75, 0.60, 0.45, 0.30, 0.20)


@dataclass
class SceneSpec:
    seed: int = 42
    image_size: int = 64
    num_classes: int = 4
    noise_std: float = 0.02
    shapes_min: int = 3
    shapes_max: int = 6


def _jitter_color(rng: SplitMix64, base, spread: float = 0.08):
    return tuple(min(max(c + rng.uniform(-spread, spread), 0.0), 1.0) for c in base)


def gen_scene(spec: SceneSpec, index: int, return_meta: bool = False):
    """One (image, labels) pair; image (3,S,S) f32 in [0,1], labels (S,S) uint8."""
    S = spec.image_size
    rng = SplitMix64(spec.seed ^ index)
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)

    image = np.empty((3, S, S), dtype=np.float32)
    for ch, v in enumerate(_jitter_color(rng, BASE_COLORS[0], 0.05)):
        image[ch] = v
    labels = np.zeros((S, S), dtype=np.uint8)

    n_shapes = rng.randint(spec.shapes_min, spec.shapes_max)
    meta = []
    for _ in range(n_shapes):
        kind = rng.randint(1, 3)
        color = _jitter_color(rng, BASE_COLORS[kind])
        if kind == 1:
            w = rng.randint(S // 8, S // 2)
            h = rng.randint(S // 8, S // 2)
            x0 = rng.randint(0, S - 1 - w)
            y0 = rng.randint(0, S - 1 - h)
            mask = np.zeros((S, S), dtype=bool)
            mask[y0 : y0 + h, x0 : x0 + w] = True
        elif kind == 2:
            r = rng.uniform(S / 10, S / 4)
            cx = rng.uniform(r, S - r)
            cy = rng.uniform(r, S - r)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            width = rng.randint(1, 2)
            theta = rng.uniform(0.0, math.pi)
            px = rng.uniform(S * 0.2, S * 0.8)
            py = rng.uniform(S * 0.2, S * 0.8)
            length = rng.uniform(S / 3, S)
            c, s = math.cos(theta), math.sin(theta)
            perp = np.abs(c * (xx - px) + s * (yy - py))
            along = np.abs(-s * (xx - px) + c * (yy - py))
            mask = (perp <= width / 2.0) & (along <= length / 2.0)
        for ch in range(3):
            image[ch][mask] = color[ch]
        labels[mask] = kind
        meta.append((kind, int(mask.sum())))

    if spec.noise_std > 0:
        noise = rng.normal_array(3 * S * S).reshape(3, S, S) * spec.noise_std
        image = np.clip(image + noise.astype(np.float32), 0.0, 1.0)

    if return_meta:
        return image, labels, meta
    return image, labels


def _gauss_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()

    def conv_last(x):
        xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(radius, radius)], mode="edge")
        out = np.zeros_like(x, dtype=np.float64)
        for i, w in enumerate(k):
            out += w * xp[..., i : i + x.shape[-1]]
        return out

    blurred = conv_last(image.astype(np.float64))
    blurred = np.swapaxes(conv_last(np.swapaxes(blurred, -1, -2)), -1, -2)
    return blurred.astype(np.float32)


def corrupt_image(image: np.ndarray, kind: str, severity: int, rng: SplitMix64 = None) -> np.ndarray:
    """Apply one corruption at integer severity 0-5; output clamped to [0,1]."""
    if severity == 0:
        return image.copy()
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption kind {kind!r}; expected one of {CORRUPTION_KINDS}")
    if not 1 <= severity <= 5:
        raise ValueError(f"severity must be in 0..5, got {severity}")
    if kind == "gaussian-noise":
        if rng is None:
            rng = SplitMix64(0x5EED ^ severity)
        noise = rng.normal_array(image.size).reshape(image.shape) * NOISE_STD[severity - 1]
        out = image + noise.astype(np.float32)
    elif kind == "gaussian-blur":
        out = _gauss_blur(image, BLUR_SIGMA[severity - 1])
    elif kind == "brightness":
        out = image + BRIGHTNESS_DELTA[severity - 1]
    else:
        f = CONTRAST_FACTOR[severity - 1]
        mean = image.mean(axis=(1, 2), keepdims=True)
        out = (image - mean) * f + mean
    return np.clip(out, 0.0, 1.0).astype(np.float32)


class SceneDataset:
    """Indexable view over a contiguous range of scene indices."""

    def __init__(self, spec: SceneSpec, count: int, offset: int = 0):
        self.spec = spec
        self.count = count
        self.offset = offset

    def __len__(self):
        return self.count

    def __getitem__(self, i: int):
        if not 0 <= i < self.count:
            raise IndexError(i)
        return gen_scene(self.spec, self.offset + i)


def make_splits(spec: SceneSpec, train_scenes: int, eval_scenes: int):
    """Disjoint train/eval splits by scene index."""
    return (SceneDataset(spec, train_scenes, 0),
            SceneDataset(spec, eval_scenes, train_scenes))

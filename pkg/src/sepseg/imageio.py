"""Binary PPM/PGM serialization (8-bit, dependency-free, bit-exact).

Images: P6 PPM, RGB, maxval 255. Label maps: P5 PGM with 255 reserved as the
ignore value. Heatmaps: P5 PGM after per-image min-max normalization.
"""

import numpy as np


def _write_header(fh, magic: bytes, w: int, h: int):
    fh.write(magic + b"\n" + f"{w} {h}\n255\n".encode("ascii"))


def write_ppm(path, image: np.ndarray):
    """image: (3, H, W) float in [0,1] or uint8."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm: expected (3,H,W), got {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    _, H, W = image.shape
    with open(path, "wb") as fh:
        _write_header(fh, b"P6", W, H)
        fh.write(image.transpose(1, 2, 0).tobytes())


def write_pgm(path, gray: np.ndarray):
    """gray: (H, W) uint8."""
    if gray.ndim != 2:
        raise ValueError(f"write_pgm: expected (H,W), got {gray.shape}")
    if gray.dtype != np.uint8:
        raise ValueError("write_pgm: expected uint8 data")
    H, W = gray.shape
    with open(path, "wb") as fh:
        _write_header(fh, b"P5", W, H)
        fh.write(gray.tobytes())


def write_heatmap_pgm(path, values: np.ndarray):
    """Min-max normalize a float map to 0..255 and write as PGM."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    write_pgm(path, np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8))


def _read_tokens(data: bytes, count: int):
    """Read whitespace-separated header tokens, skipping # comments; returns
    (tokens, offset of the byte right after the final single whitespace)."""
    tokens = []
    i = 0
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError("truncated netpbm header")
        tokens.append(data[start:i])
    return tokens, i + 1  # single whitespace after maxval precedes the raster


def read_ppm(path) -> np.ndarray:
    """Returns (3, H, W) float32 in [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _read_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ValueError(f"read_ppm: bad magic {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"read_ppm: unsupported maxval {maxval}")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=offset)
    return raster.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


def read_pgm(path) -> np.ndarray:
    """Returns (H, W) uint8."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _read_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"read_pgm: bad magic {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"read_pgm: unsupported maxval {maxval}")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset)
    return raster.reshape(h, w).copy()

"""Feature probes: over-smoothness measurement and heatmap dumps.

The smoothness score of a feature map is the mean cosine similarity between
each site and its right/down neighbors -- high values mean neighboring
features are nearly parallel (smoothed-out detail). The probe reports this
for the global (backbone) map and the local-path map, plus per-class
cross-attention heatmaps from the final decoder layer.
"""

import json
import os

import numpy as np

from .imageio import write_heatmap_pgm, write_ppm
from .tensor import Tensor

_EPS = 1e-12


def neighbor_cosine(feat: np.ndarray) -> float:
    """Mean cosine similarity between horizontally/vertically adjacent sites
    of a (B, C, H, W) feature map."""
    if feat.ndim != 4:
        raise ValueError(f"neighbor_cosine: expected (B,C,H,W), got {feat.shape}")
    f = feat / np.maximum(np.linalg.norm(feat, axis=1, keepdims=True), _EPS)
    sims = []
    if f.shape[3] > 1:
        sims.append((f[:, :, :, :-1] * f[:, :, :, 1:]).sum(axis=1).ravel())
    if f.shape[2] > 1:
        sims.append((f[:, :, :-1, :] * f[:, :, 1:, :]).sum(axis=1).ravel())
    if not sims:
        return float("nan")
    return float(np.concatenate(sims).mean())


def probe_model(model, images: np.ndarray) -> dict:
    """Run one forward pass and collect smoothness scores plus heatmap arrays.

    Returns {"report": {...}, "heatmaps": {name: (H', W') array}} for the
    first image of the batch.
    """
    model.eval()
    out = model(Tensor(images), collect_attn=True)
    report = {"backend_grid": list(out.decoder_grid)}
    heatmaps = {}

    pairs = [("global", out.backbone_final), ("local", out.local_features)]
    for name, feat in pairs:
        if feat is None:
            continue
        arr = feat.numpy()
        report[f"smoothness_{name}"] = neighbor_cosine(arr)
        heatmaps[f"feat_{name}"] = np.linalg.norm(arr[0], axis=0)
    if "smoothness_global" in report and "smoothness_local" in report:
        report["smoothness_drop"] = (report["smoothness_global"]
                                     - report["smoothness_local"])

    if out.attn:
        h, w = out.decoder_grid
        attn = out.attn[-1][0]          # (K, N) final layer, first image
        for c in range(attn.shape[0]):
            heatmaps[f"attn_class{c}"] = attn[c].reshape(h, w)
        report["attn_layers"] = len(out.attn)

    probs = out.logits.numpy()[0]
    heatmaps["pred_confidence"] = probs.max(axis=0) - np.median(probs, axis=0)
    return {"report": report, "heatmaps": heatmaps}


def write_probe_outputs(probe: dict, images: np.ndarray, out_dir: str) -> dict:
    """Write the probed heatmaps (PGM) and input (PPM); returns the report."""
    os.makedirs(out_dir, exist_ok=True)
    write_ppm(os.path.join(out_dir, "input.ppm"), images[0])
    for name, arr in probe["heatmaps"].items():
        write_heatmap_pgm(os.path.join(out_dir, f"{name}.pgm"), arr)
    report = probe["report"]
    with open(os.path.join(out_dir, "probe.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report

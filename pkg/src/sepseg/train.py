"""Training loop and evaluation harness.

Determinism contract: the same config (including seed) reproduces parameter
init, data order, every loss value, and therefore byte-identical logs.
Separate PRNG streams cover parameter init (the model builder) and batch
order (a spawned stream), so changing one cannot perturb the other.
"""

import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .backend import BACKEND_NAME
from .checkpoint import write_checkpoint
from .config import ModelConfig
from .data import SceneSpec, corrupt_image, make_splits
from .infer import multi_scale_infer
from .losses import boundary_loss, cross_entropy_seg, matching_losses, total_loss
from .metrics import MetricAccumulator, MetricReport
from .model import build_model
from .rng import SplitMix64
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DATA_ORDER_STREAM = 0xBA7C4


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {step}")
        self.step = step


class AdamW:
    """Decoupled-weight-decay Adam. Weight decay applies only to parameters of
    rank >= 2 (matrices/kernels); biases, norm affines and scalar scales are
    exempt. Each group carries a learning-rate multiplier."""

    def __init__(self, groups, weight_decay: float = 0.0):
        self.groups = [(list(params), float(mult)) for _, params, mult in groups]
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [[np.zeros_like(p.data) for p in params] for params, _ in self.groups]
        self.v = [[np.zeros_like(p.data) for p in params] for params, _ in self.groups]

    def step(self, lr: float):
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for gi, (params, mult) in enumerate(self.groups):
            glr = lr * mult
            for pi, p in enumerate(params):
                g = p.grad if p.grad is not None else 0.0
                m = self.m[gi][pi]
                v = self.v[gi][pi]
                m *= ADAM_BETA1
                m += (1.0 - ADAM_BETA1) * g
                v *= ADAM_BETA2
                v += (1.0 - ADAM_BETA2) * np.square(g)
                update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
                if self.weight_decay and p.data.ndim >= 2:
                    update = update + self.weight_decay * p.data
                p.data -= glr * update


def lr_at(step: int, cfg: ModelConfig) -> float:
    """Linear warmup to the base lr, then polynomial decay to zero."""
    warm = min(cfg.warmup_steps, cfg.steps)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    span = max(cfg.steps - warm, 1)
    frac = (step - warm) / span
    return cfg.lr * (1.0 - frac) ** cfg.poly_power


def scene_spec(cfg: ModelConfig) -> SceneSpec:
    return SceneSpec(seed=cfg.seed, image_size=cfg.image_size,
                     num_classes=cfg.num_classes, noise_std=cfg.noise_std,
                     shapes_min=cfg.shapes_min, shapes_max=cfg.shapes_max)


def _gather_batch(dataset, indices):
    imgs, labels = [], []
    for i in indices:
        img, lab = dataset[int(i)]
        imgs.append(img)
        labels.append(lab)
    return np.stack(imgs), np.stack(labels)


def compute_losses(model, images: np.ndarray, labels: np.ndarray):
    """Forward pass plus the full loss assembly for one batch."""
    cfg = model.cfg
    out = model(Tensor(images), labels=labels)
    seg, n_seg = cross_entropy_seg(out.logits, labels, cfg.ignore_value)
    counts = {"seg_pixels": n_seg}
    q2r = p2r = bnd = None
    if out.aux:
        q2r, p2r, match_counts = matching_losses(out.aux, out.flat_labels,
                                                 cfg.ignore_value)
        counts.update(match_counts)
    if out.boundary_logits is not None:
        bnd, n_bnd = boundary_loss(out.boundary_logits, labels, cfg.ignore_value)
        counts["boundary_pixels"] = n_bnd
    return total_loss(seg, q2r=q2r, p2r=p2r, boundary=bnd, counts=counts), out


def _json_safe(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


@dataclass
class TrainResult:
    model: object
    log: list                  # the JSONL records, in order
    report: MetricReport       # final-eval metrics
    checkpoint_path: str       # empty when no out_dir was given


def train(cfg: ModelConfig, out_dir: str = None, progress=None) -> TrainResult:
    cfg.validate()
    model = build_model(cfg)
    opt = AdamW(model.param_groups(), weight_decay=cfg.weight_decay)
    train_ds, eval_ds = make_splits(scene_spec(cfg), cfg.train_scenes, cfg.eval_scenes)
    order_rng = SplitMix64(cfg.seed).spawn(DATA_ORDER_STREAM)

    n_params = sum(int(p.size) for p in model.parameters())
    log = [{"event": "start", "backend": BACKEND_NAME, "n_params": n_params,
            "config": asdict(cfg)}]

    order = []
    t_start = time.perf_counter()
    for step in range(cfg.steps):
        while len(order) < cfg.batch_size:
            epoch = list(range(len(train_ds)))
            order_rng.shuffle(epoch)
            order.extend(epoch)
        batch, order = order[: cfg.batch_size], order[cfg.batch_size :]
        images, labels = _gather_batch(train_ds, batch)

        with T.Tape():
            report, _ = compute_losses(model, images, labels)
            total = float(report.total.item())
            if not np.isfinite(total):
                raise TrainingDiverged(step, total)
            T.backward(report.total)
        opt.step(lr_at(step, cfg))
        model.zero_grad()

        if step % cfg.log_interval == 0 or step == cfg.steps - 1:
            rec = {"event": "loss", "step": step, "lr": lr_at(step, cfg)}
            rec.update(report.scalars())
            log.append(rec)
            if progress is not None:
                progress(rec)

    model.eval()
    final = evaluate(model, eval_ds, cfg)
    log.append({"event": "metrics", "step": cfg.steps,
                "elapsed_s": round(time.perf_counter() - t_start, 3),
                **_json_safe(final.as_dict())})

    ckpt_path = ""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "model.ckpt")
        write_checkpoint(ckpt_path, model.state_dict())
        with open(os.path.join(out_dir, "train_log.jsonl"), "w") as f:
            for rec in log:
                f.write(json.dumps(_json_safe(rec)) + "\n")
    return TrainResult(model=model, log=log, report=final, checkpoint_path=ckpt_path)


def evaluate(model, dataset, cfg: ModelConfig, corrupt_kind: str = None,
             severity: int = 0, scales=(1.0,), flip: bool = False,
             window: int = None, stride: int = None) -> MetricReport:
    """Metrics over a dataset; optionally corrupt every image first."""
    was_training = getattr(model, "training", False)
    model.eval()
    acc = MetricAccumulator(cfg.num_classes, cfg.small_area_threshold,
                            cfg.boundary_tol, cfg.ignore_value)
    bs = cfg.batch_size
    for start in range(0, len(dataset), bs):
        idx = range(start, min(start + bs, len(dataset)))
        images, labels = _gather_batch(dataset, idx)
        if corrupt_kind is not None and severity:
            noise_rng = SplitMix64(cfg.seed ^ 0xC0FFEE ^ (severity * 1000003 + start))
            images = np.stack([
                corrupt_image(img, corrupt_kind, severity, rng=noise_rng)
                for img in images])
        pred = multi_scale_infer(model, images, scales=scales, flip=flip,
                                 window=window, stride=stride)
        acc.update(pred, labels)
    if was_training:
        model.train()
    return acc.report()

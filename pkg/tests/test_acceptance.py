"""Release acceptance gate.

Eleven numbered criteria cover the library's documented guarantees end to
end: analytic gradients, the structural filter constraints, attention
normalization, region-embedding semantics, oracle agreement for every core
operator, the toy training comparison against a linear-decoder baseline,
attention concentration, inference-protocol exactness, determinism, and the
robustness harness.

Each test checks exactly one criterion and emits one verdict line
(`criterion NN [PASS|FAIL] ...`), so both the -v report and the captured
output carry a per-criterion result. Criteria 7, 8 and 11 share a single
module-scoped pair of training runs (the expensive part of the gate).
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from sepseg import tensor as T
from sepseg.backbone import MultiHeadSelfAttention
from sepseg.checkpoint import load_checkpoint, save_checkpoint
from sepseg.config import ModelConfig, load_config
from sepseg.data import CORRUPTION_KINDS, make_splits
from sepseg.decoder import (DiscriminativeCrossAttention, MaskPredictor,
                            nearest_downsample_labels, region_embeddings)
from sepseg.gradcheck import gradcheck_model
from sepseg.infer import (DEFAULT_SCALES, FINE_SCALES, multi_scale_infer,
                          sliding_window_infer)
from sepseg.local_path import LearnableHighPassFilter
from sepseg.losses import cross_entropy_seg, matching_losses
from sepseg.model import build_model
from sepseg.rng import SplitMix64
from sepseg.sasm import SasmStage
from sepseg.tensor import Tensor
from sepseg.train import evaluate, scene_spec, train

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

GRADCHECK_TIME_LIMIT_S = 300.0
TRAINING_TIME_LIMIT_S = 1800.0


def verdict(num: int, ok: bool, detail: str):
    line = f"criterion {num:02d} [{'PASS' if ok else 'FAIL'}] {detail}"
    print(line, flush=True)
    assert ok, line


@pytest.fixture(scope="module")
def toy_runs():
    """The linear-baseline and full-model training runs shared by 7/8/11."""
    t0 = time.perf_counter()
    linear = train(load_config(CONFIG_DIR / "linear.cfg"))
    full = train(load_config(CONFIG_DIR / "default.cfg"))
    return linear, full, time.perf_counter() - t0


def test_criterion_01_full_model_gradients():
    cfg = load_config(CONFIG_DIR / "gradcheck.cfg")
    # Pin the advertised check scale: 2-layer backbone at dim 32 with 2 heads,
    # 2 separation blocks, the 2-stage upsampler, a 2-layer query decoder,
    # 4 classes, 32x32 input, all in f64.
    assert (cfg.depth, cfg.embed_dim, cfg.heads, cfg.num_blocks) == (2, 32, 2, 2)
    assert (cfg.decoder_depth, cfg.num_classes, cfg.image_size) == (2, 4, 32)
    t0 = time.perf_counter()
    res = gradcheck_model(cfg, batch=2, step=1e-5, rtol=1e-5, floor=1e-8)
    dt = time.perf_counter() - t0
    verdict(1, res.ok and dt <= GRADCHECK_TIME_LIMIT_S,
            f"max rel grad err {res.max_rel_err:.2e} over {res.n_checks} checks "
            f"(tol 1e-05) in {dt:.0f}s (limit {GRADCHECK_TIME_LIMIT_S:.0f}s); "
            f"worst offenders: {res.failures[:3] or 'none'}")


def test_criterion_02_high_pass_kernels():
    channels, k = 50, 5
    lhf = LearnableHighPassFilter(channels, k, SplitMix64(2))
    rng = np.random.default_rng(2)
    worst_sum = worst_resp = 0.0
    n_kernels = 0
    for _ in range(20):  # 20 rounds x 50 channels = 1000 kernels
        scale = rng.uniform(0.1, 6.0)
        lhf.raw.data[...] = (rng.standard_normal(lhf.raw.shape) * scale
                             ).astype(np.float32)
        kernels = lhf.materialize().data.reshape(channels, -1)
        n_kernels += channels
        worst_sum = max(worst_sum, float(
            np.abs(kernels.sum(axis=1, dtype=np.float64)).max()))
        # Constant input must be annihilated wherever the kernel support is
        # fully inside the image (the zero-padded border rim is excluded).
        const = np.full((1, channels, 10, 10), rng.uniform(-3, 3), np.float32)
        resp = lhf(Tensor(const)).data[:, :, k // 2 : -(k // 2), k // 2 : -(k // 2)]
        worst_resp = max(worst_resp, float(np.abs(resp).max()))
    verdict(2, n_kernels == 1000 and worst_sum <= 1e-6 and worst_resp <= 1e-5,
            f"{n_kernels} kernels: max |sum| {worst_sum:.2e} (tol 1e-06); "
            f"max constant-input interior response {worst_resp:.2e} (tol 1e-05)")


def test_criterion_03_adaptive_filter_banks():
    guide_dim, groups = 8, 2
    stage = SasmStage(guide_dim, groups, SplitMix64(3), downsample=False)
    rng = np.random.default_rng(3)
    n_banks = 0
    worst_sum = worst_const = 0.0
    shape_ok = True
    for _ in range(4):  # 4 rounds x (2 x 2 x 8 x 8) sites = 1024 banks
        stage.filter_gen.weight.data[...] = (
            rng.standard_normal(stage.filter_gen.weight.shape) * 2.0
        ).astype(np.float32)
        stage.filter_gen.bias.data[...] = (
            rng.standard_normal(stage.filter_gen.bias.shape) * 2.0
        ).astype(np.float32)
        guidance = rng.standard_normal((2, guide_dim, 8, 8)).astype(np.float32)
        f = stage.build_spatial_filters(Tensor(guidance)).data
        n_banks += f.shape[0] * f.shape[1] * f.shape[4] * f.shape[5]
        worst_sum = max(worst_sum, float(
            np.abs(f.sum(axis=3, dtype=np.float64) - 1.0).max()))

        const = rng.uniform(-3, 3)
        x = np.full((2, 6, 8, 8), const, dtype=np.float32)
        out = stage(Tensor(x), Tensor(guidance))
        shape_ok = shape_ok and out.shape == (2, 6, 16, 16)
        interior = out.data[:, :, 2:-2, 2:-2]
        worst_const = max(worst_const, float(np.abs(interior - const).max()))
    verdict(3, n_banks >= 1000 and worst_sum <= 1e-6
            and worst_const <= 1e-5 and shape_ok,
            f"{n_banks} banks: max |filter sum - 1| {worst_sum:.2e} (tol 1e-06); "
            f"constant-field interior drift {worst_const:.2e} (tol 1e-05); "
            f"output shape doubling {'ok' if shape_ok else 'WRONG'}")


def test_criterion_04_attention_rows_are_stochastic():
    rng = np.random.default_rng(4)
    n_matrices = 0
    worst = 0.0

    def check(p):
        nonlocal n_matrices, worst
        n_matrices += 1
        worst = max(worst, float(np.abs(p.sum(axis=-1, dtype=np.float64) - 1.0).max()))

    for i in range(40):  # token self-attention
        heads = int(rng.integers(1, 5))
        dim = heads * int(rng.integers(1, 9))
        msa = MultiHeadSelfAttention(dim, heads, SplitMix64(40 + i))
        x = (rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 18)), dim))
             * rng.uniform(0.5, 4.0)).astype(np.float32)
        _, attn = msa(Tensor(x), return_attn=True)
        check(attn.data)

    for i in range(35):  # query cross-attention plus both similarity heads
        dim = int(rng.integers(2, 17))
        K = int(rng.integers(1, 7))
        B, N = int(rng.integers(1, 4)), int(rng.integers(2, 30))
        dca = DiscriminativeCrossAttention(dim, 10.0, K, 255, SplitMix64(80 + i))
        q = (rng.standard_normal((B, K, dim)) * rng.uniform(0.5, 4.0)).astype(np.float32)
        tok = (rng.standard_normal((B, N, dim)) * rng.uniform(0.5, 4.0)).astype(np.float32)
        labels = rng.integers(0, K, size=(B, N))
        labels[rng.random((B, N)) < 0.15] = 255
        labels[:, 0] = 0  # keep at least one class present
        _, aux, attn = dca(Tensor(q), Tensor(tok), labels, collect_attn=True)
        check(attn)
        check(T.softmax(aux.q2r_logits, axis=2).data)
        check(T.softmax(aux.p2r_logits, axis=2).data)

    verdict(4, n_matrices >= 100 and worst <= 1e-6,
            f"{n_matrices} attention/similarity matrices fuzzed: "
            f"max |row sum - 1| {worst:.2e} (tol 1e-06)")


def test_criterion_05_region_embedding_equivalence():
    rng = np.random.default_rng(5)
    worst = 0.0
    zero_ok = True
    for _ in range(100):
        B, N = int(rng.integers(1, 3)), int(rng.integers(4, 40))
        C, K = int(rng.integers(2, 10)), int(rng.integers(2, 6))
        kn = rng.standard_normal((B, N, C))
        labels = rng.integers(0, K, size=(B, N))
        labels[rng.random((B, N)) < 0.1] = 255
        re = region_embeddings(Tensor(kn), labels, K)
        for b in range(B):
            for c in range(K):
                if not re.presence[b, c]:
                    zero_ok = zero_ok and bool(np.all(re.embeddings.data[b, c] == 0.0))
                    continue
                total = kn[b][labels[b] == c].sum(axis=0)
                mean = re.embeddings.data[b, c]
                diff = total / np.linalg.norm(total) - mean / np.linalg.norm(mean)
                worst = max(worst, float(np.abs(diff).max()))

    # Absent classes must drop out of both matching losses: compare against a
    # log-softmax oracle that literally removes the absent columns/rows.
    dca = DiscriminativeCrossAttention(8, 10.0, 4, 255, SplitMix64(5))
    dca.to_dtype(np.float64)
    B, K, N = 2, 4, 30
    q = rng.standard_normal((B, K, 8))
    tok = rng.standard_normal((B, N, 8))
    labels = rng.integers(0, 3, size=(B, N))  # class 3 never occurs
    labels[0, :3] = [0, 1, 2]
    labels[1, :3] = [0, 1, 2]
    labels[0, 3:6] = 255
    _, aux, _ = dca(Tensor(q), Tensor(tok), labels)
    q2r, p2r, counts = matching_losses([aux], labels)

    def masked_rows_nll(logits, rows, targets, present_cols):
        nll = []
        for r, t in zip(rows, targets):
            z = logits[r][present_cols]
            z = z - z.max()
            nll.append(float(np.log(np.exp(z).sum()) - z[present_cols.index(t)]))
        return nll

    q2r_terms, p2r_terms = [], []
    for b in range(B):
        present = [c for c in range(K) if aux.presence[b, c]]
        q2r_terms += masked_rows_nll(aux.q2r_logits.data[b],
                                     present, present, present)
        valid = [n for n in range(N) if labels[b, n] != 255]
        p2r_terms += masked_rows_nll(aux.p2r_logits.data[b],
                                     valid, [int(labels[b, n]) for n in valid],
                                     present)
    oracle_ok = (abs(float(q2r.item()) - np.mean(q2r_terms)) <= 1e-6
                 and abs(float(p2r.item()) - np.mean(p2r_terms)) <= 1e-6
                 and counts == {"q2r_rows": len(q2r_terms),
                                "p2r_pixels": len(p2r_terms)}
                 and not aux.presence[:, 3].any())
    verdict(5, worst <= 1e-6 and zero_ok and oracle_ok,
            f"normalized sum-vs-mean max diff {worst:.2e} over 100 label maps "
            f"(tol 1e-06); absent classes zeroed: {zero_ok}; hand-masked loss "
            f"oracle agreement: {oracle_ok}")


def test_criterion_06_oracle_agreement():
    rng = np.random.default_rng(6)
    worst = {}

    def track(name, a, b):
        worst[name] = max(worst.get(name, 0.0), float(np.abs(a - b).max()))

    for i in range(20):
        # plain/strided/grouped convolution
        g = int(rng.integers(1, 3))
        cin, cout = g * int(rng.integers(1, 4)), g * int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        H = int(rng.integers(k + 1, 8))
        x = rng.standard_normal((2, cin, H, H))
        w = rng.standard_normal((cout, cin // g, k, k))
        b = rng.standard_normal(cout)
        track("conv2d", T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride,
                                 padding=pad, groups=g).data,
              oracles.conv2d_ref(x, w, b, stride=stride, padding=pad, groups=g))

        # multi-head self-attention
        heads = int(rng.integers(1, 4))
        dim = heads * int(rng.integers(1, 5))
        N = int(rng.integers(1, 9))
        msa = MultiHeadSelfAttention(dim, heads, SplitMix64(600 + i))
        msa.to_dtype(np.float64)
        x = rng.standard_normal((2, N, dim))
        track("msa", msa(Tensor(x)).data,
              oracles.msa_ref(x, msa.wq.weight.data, msa.wq.bias.data,
                              msa.wk.weight.data, msa.wk.bias.data,
                              msa.wv.weight.data, msa.wv.bias.data,
                              msa.wo.weight.data, msa.wo.bias.data, heads))

        # grouped adaptive filtering
        G = int(rng.integers(1, 4))
        C = G * int(rng.integers(1, 4))
        H, W = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        x = rng.standard_normal((2, C, H, W))
        saf = rng.random((2, G, 4, 9, H, W)) + 0.05
        track("saf_apply", T.saf_apply(Tensor(x), Tensor(saf)).data,
              oracles.saf_apply_ref(x, saf))

        # region embeddings
        B, N, C, K = 2, int(rng.integers(3, 20)), int(rng.integers(2, 8)), 4
        kn = rng.standard_normal((B, N, C))
        labels = rng.integers(0, K, size=(B, N))
        labels[rng.random((B, N)) < 0.1] = 255
        re = region_embeddings(Tensor(kn), labels, K)
        ref_emb, ref_present = oracles.region_embed_ref(kn, labels, K)
        assert np.array_equal(re.presence, ref_present)
        track("region_embed", re.embeddings.data, ref_emb)

        # scaled-cosine mask prediction
        K, C = int(rng.integers(1, 5)), int(rng.integers(2, 7))
        h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        mp = MaskPredictor(10.0)
        mp.to_dtype(np.float64)
        emb = rng.standard_normal((2, K, C))
        fmap = rng.standard_normal((2, C, h, w))
        track("mask_pred", mp(Tensor(emb), Tensor(fmap)).data,
              oracles.mask_pred_ref(emb, fmap, 10.0))

        # segmentation cross-entropy
        K, h = 4, int(rng.integers(2, 7))
        logits = rng.standard_normal((2, K, h, h)) * 3.0
        labels = rng.integers(0, K, size=(2, h, h))
        labels[rng.random((2, h, h)) < 0.1] = 255
        loss, _ = cross_entropy_seg(Tensor(logits), labels)
        track("cross_entropy", np.float64(loss.item()),
              np.float64(oracles.cross_entropy_ref(logits, labels)))

    bad = {k: v for k, v in worst.items() if v > 1e-6}
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(6, len(worst) == 6 and not bad,
            f"20 instances each, max |diff| vs nested-loop oracles (tol 1e-06): {detail}")


def test_criterion_07_separation_head_beats_linear_baseline(toy_runs):
    linear, full, elapsed = toy_runs
    f, l = full.report, linear.report
    ok = (f.pixel_acc >= 0.90 and f.boundary_f > l.boundary_f
          and f.small_miou > l.small_miou and elapsed <= TRAINING_TIME_LIMIT_S)
    verdict(7, ok,
            f"full head: acc {f.pixel_acc:.4f} (need >=0.90), "
            f"boundary-F {f.boundary_f:.4f} vs linear {l.boundary_f:.4f}, "
            f"small-object mIoU {f.small_miou:.4f} vs {l.small_miou:.4f} "
            f"(both must be strictly higher); "
            f"{elapsed:.0f}s total (limit {TRAINING_TIME_LIMIT_S:.0f}s)")


def test_criterion_08_queries_attend_to_their_regions(toy_runs):
    _, full, _ = toy_runs
    model = full.model
    cfg = model.cfg
    _, eval_ds = make_splits(scene_spec(cfg), cfg.train_scenes, cfg.eval_scenes)
    hits = total = 0
    for start in range(0, len(eval_ds), cfg.batch_size):
        pairs = [eval_ds[i] for i in range(start, min(start + cfg.batch_size,
                                                      len(eval_ds)))]
        images = np.stack([p[0] for p in pairs])
        labels = np.stack([p[1] for p in pairs])
        out = model(Tensor(images), collect_attn=True)
        attn = np.mean(out.attn, axis=0)  # layer-mean, (B, K, N)
        flat = nearest_downsample_labels(labels, *out.decoder_grid)
        flat = flat.reshape(labels.shape[0], -1)
        for b in range(flat.shape[0]):
            n_valid = int((flat[b] != cfg.ignore_value).sum())
            for c in range(cfg.num_classes):
                region = flat[b] == c
                count = int(region.sum())
                if count == 0:
                    continue
                total += 1
                hits += float(attn[b, c, region].sum()) > count / n_valid
    rate = hits / total
    verdict(8, rate >= 0.80,
            f"{hits}/{total} (image, present-class) pairs put more "
            f"cross-attention mass on their region than its area fraction "
            f"(rate {rate:.3f}, need >=0.80)")


def test_criterion_09_inference_protocol_exactness():
    cfg = ModelConfig(image_size=32, patch_size=8, embed_dim=16, depth=2,
                      heads=2, mlp_ratio=2.0, tap_indices=[0, 1], local_dim=16,
                      expand_ratio=2, lhf_kernel=3, sasm_groups=4,
                      sasm_group_dim=4, num_classes=4, decoder_depth=1,
                      decoder_mlp_ratio=2.0, seed=9)
    model = build_model(cfg)
    model.eval()
    images = np.random.default_rng(9).random((2, 3, 32, 32)).astype(np.float32)
    direct = T.bilinear_resize(model(Tensor(images)).logits, 32, 32).numpy()
    sw = sliding_window_infer(model, images, window=32, stride=32)
    window_diff = float(np.abs(sw.logits - direct).max())
    single = multi_scale_infer(model, images, scales=[1.0])
    scale_exact = np.array_equal(single, direct.argmax(axis=1).astype(np.uint8))
    lists_ok = (DEFAULT_SCALES == (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)
                and FINE_SCALES == (1.0, 1.25, 1.5, 1.75))
    verdict(9, window_diff <= 1e-6 and scale_exact and lists_ok,
            f"window==image logits diff {window_diff:.2e} (tol 1e-06); "
            f"scales [1.0] bitwise-equals direct argmax: {scale_exact}; "
            f"pinned scale lists correct: {lists_ok}")


def test_criterion_10_determinism_and_persistence():
    cfg = load_config(CONFIG_DIR / "gradcheck.cfg")
    cfg.log_interval = 1  # one record per step
    first, second = train(cfg), train(cfg)

    def loss_events(result):
        return [r for r in result.log if r["event"] == "loss"]

    logs_equal = (json.dumps(loss_events(first), sort_keys=True)
                  == json.dumps(loss_events(second), sort_keys=True))
    blob = save_checkpoint(first.model.state_dict())
    blob_again = save_checkpoint(load_checkpoint(blob))
    verdict(10, logs_equal and blob == blob_again,
            f"same-seed loss logs identical over {len(loss_events(first))} "
            f"records: {logs_equal}; checkpoint save->load->save byte-identical "
            f"({len(blob)} bytes): {blob == blob_again}")


def test_criterion_11_robustness_retention_reported(toy_runs):
    _, full, _ = toy_runs
    cfg = full.model.cfg
    _, eval_ds = make_splits(scene_spec(cfg), cfg.train_scenes, cfg.eval_scenes)
    clean = full.report.miou
    retentions = []
    print(f"robustness retention (clean mIoU {clean:.4f}):")
    for kind in CORRUPTION_KINDS:
        row = []
        for severity in range(1, 6):
            rep = evaluate(full.model, eval_ds, cfg,
                           corrupt_kind=kind, severity=severity)
            retentions.append(rep.miou / clean)
            row.append(f"s{severity} {rep.miou / clean:.3f}")
        print(f"  {kind:<15} " + "  ".join(row))
    ok = len(retentions) == 20 and all(np.isfinite(retentions))
    verdict(11, ok,
            f"retention computed for {len(CORRUPTION_KINDS)} corruption kinds "
            f"x 5 severities: min {min(retentions):.3f}, max {max(retentions):.3f} "
            f"(reported, no threshold)")

"""Acceptance criteria, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed even under
capture) or directly with ``python3 tests/test_acceptance.py``.
"""
import itertools
import json
import math
import sys
import time

import numpy as np
import pytest

from avfd.cli import main as cli
from avfd.encoders import ToyTextEncoder
from avfd.evaluation import aggregate_video_score, average_precision, mmd2, read_score_reports, roc_auc, score_overlap
from avfd.fapl import PolarityEmbeddings, PromptHierarchy, encode_polarity, ftca_loss, ftca_loss_and_grads
from avfd.mmdwl import (
    DEFAULT_ALPHA, AlignmentMatrix, WeightGenerator, alignment_matrix, av_alignment_loss, av_loss_and_grads,
    generate_weights, modulate,
)
from avfd.perturbations import CorruptionSpec, apply_corruption, gaussian_kernel
from avfd.training import total_loss
from avfd.encoders import Projections, RawFeatures

TRAIN_SEED, HELDOUT_SEED = 11, 12
RESULTS = {}
pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        RESULTS[criterion] = ok
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return emit


def _pipeline(root, corruptions=()):
    """synth 200 + held-out 100, train 30 epochs, evaluate; returns (run dir, seconds)."""
    start = time.perf_counter()
    steps = [
        ["synth", "--n", "200", "--seed", str(TRAIN_SEED), "--out", str(root / "train")],
        ["synth", "--n", "100", "--seed", str(HELDOUT_SEED), "--test-only", "--out", str(root / "heldout")],
        ["train", "--manifest", str(root / "train/manifest.avfd"), "--epochs", "30", "--out", str(root / "model")],
        ["evaluate", "--manifest", str(root / "heldout/manifest.avfd"), "--checkpoint",
         str(root / "model/checkpoint.avfd"), "--out", str(root / "eval")],
    ]
    for args in steps:
        assert cli(args) == 0, args
    elapsed = time.perf_counter() - start
    if corruptions:
        args = steps[-1][:-1] + [str(root / "eval_corrupt")]
        for spec in corruptions:
            args += ["--corrupt", spec]
        assert cli(args) == 0
    return root, elapsed


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("run_a"), corruptions=("blur", "resize"))


# -- 1 ---------------------------------------------------------------------------


def test_c1_synthetic_separability(pipeline, report):
    root, elapsed = pipeline
    m = json.loads((root / "eval/metrics.json").read_text())["overall"]
    ok = m["auc"] >= 0.95 and m["ap"] >= 0.95 and elapsed < 300 and m["n_real"] + m["n_fake"] == 100
    report(1, ok, f"AUC={m['auc']:.4f} AP={m['ap']:.4f} (>= 0.95) wall={elapsed:.1f}s (< 300s)")


# -- 2 ---------------------------------------------------------------------------


def test_c2_loss_identities(report):
    rng = np.random.default_rng(0)
    p = rng.standard_normal(8)
    faces = rng.standard_normal((6, 8))
    err_ft = abs(ftca_loss(faces, PolarityEmbeddings(p, p.copy(), np.eye(8))) - math.log(2))
    errs_av = []
    for F, window in ((5, 15), (7, 6), (1, 0)):
        m = min(F, 2 * window + 1) if F > 1 else 1
        errs_av.append(abs(av_alignment_loss(AlignmentMatrix(np.full((F, F), 0.3), window)) - math.log(m)))
    # coefficient (1, 1) total equals the component sum
    text = ToyTextEncoder(0, d=16)
    prompts = PromptHierarchy.default(text.d_tok, seed=1)
    from avfd.training import DetectorParams, TrainConfig
    cfg = TrainConfig(d=16)
    params = DetectorParams(prompts, np.eye(16), Projections.init(16, 16), WeightGenerator.init(16, 8))
    batch = [RawFeatures(f / np.linalg.norm(f), rng.standard_normal((5, 16)), rng.standard_normal((5, 16)))
             for f in rng.standard_normal((4, 16))]
    total, l_av, l_ft = total_loss(batch, params, cfg, text)
    err_sum = abs(total - (l_av + l_ft))
    ok = err_ft <= 1e-9 and max(errs_av) <= 1e-9 and err_sum <= 1e-12
    report(2, ok, f"|ftca-ln2|={err_ft:.1e} max|L_av-ln m|={max(errs_av):.1e} (<= 1e-9) "
                  f"|L-(L_av+L_ft)|={err_sum:.1e} (<= 1e-12)")


# -- 3 ---------------------------------------------------------------------------


def _rel_fd(fun, x, analytic, eps=1e-6):
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        hi = fun()
        x[idx] = old - eps
        lo = fun()
        x[idx] = old
        num[idx] = (hi - lo) / (2 * eps)
    return np.linalg.norm(analytic - num) / max(np.linalg.norm(num), 1e-300)


def test_c3_gradient_checks(report):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d, F, N = 8, 4, 4
        text = ToyTextEncoder(seed, d=d, d_tok=4)
        prompts = PromptHierarchy.create(["a real face", "natural mouth"], ["a fake face", "dull eyes"],
                                         4, 3, seed)
        prompts.pos_tokens = rng.standard_normal(prompts.pos_tokens.shape)
        prompts.neg_tokens = rng.standard_normal(prompts.neg_tokens.shape)
        W = np.eye(d) + 0.3 * rng.standard_normal((d, d))
        faces = rng.standard_normal((N, d))
        faces /= np.linalg.norm(faces, axis=1, keepdims=True)
        tau = 0.5
        _, g = ftca_loss_and_grads(faces, prompts, text, W, tau)

        def ft():
            return ftca_loss(faces, encode_polarity(prompts, text, W, tau))

        worst = max(worst, _rel_fd(ft, W, g["W"]), _rel_fd(ft, prompts.pos_tokens, g["pos_tokens"]),
                    _rel_fd(ft, prompts.neg_tokens, g["neg_tokens"]))
        v, a = rng.standard_normal((F, d)), rng.standard_normal((F, d))
        _, g_v, g_a = av_loss_and_grads(v, a, 0.5, 15)

        def av():
            return av_alignment_loss(alignment_matrix(v, a, 0.5, 15))

        worst = max(worst, _rel_fd(av, v, g_v), _rel_fd(av, a, g_a))
    report(3, worst < 1e-4, f"worst relative FD error over 20 seeds = {worst:.2e} (< 1e-4)")


# -- 4 ---------------------------------------------------------------------------


def test_c4_aggregation_bounds(report):
    rng = np.random.default_rng(4)
    bound_ok, worst_shift = True, 0.0
    for _ in range(1000):
        F = int(rng.integers(1, 64))
        s = rng.standard_normal(F) * rng.uniform(0.1, 50)
        agg = aggregate_video_score(s)
        bound_ok &= s.max() <= agg <= s.max() + math.log(F) + 1e-12
        c = rng.uniform(-100, 100)
        worst_shift = max(worst_shift, abs(aggregate_video_score(s + c) - agg - c))
    report(4, bool(bound_ok) and worst_shift <= 1e-9,
           f"bounds hold on 1000 vectors={bool(bound_ok)}, max shift error={worst_shift:.1e} (<= 1e-9)")


# -- 5 ---------------------------------------------------------------------------


def test_c5_weight_simplex(report):
    rng = np.random.default_rng(5)
    gen = WeightGenerator.init(8, hidden=16, seed=5)
    worst_sum, all_pos, worst_shift = 0.0, True, 0.0
    for _ in range(1000):
        w_hat = generate_weights(gen, rng.standard_normal(16) * 5, rng.standard_normal(8), rng.standard_normal(8))
        alpha = rng.uniform(-1, 1, 3)
        w = modulate(w_hat, alpha)
        worst_sum = max(worst_sum, abs(w.sum() - 1))
        all_pos &= bool(np.all(w > 0))
        worst_shift = max(worst_shift, np.max(np.abs(modulate(w_hat, alpha + rng.uniform(-5, 5)) - w)))
    w = modulate(np.full(3, 1 / 3), DEFAULT_ALPHA)
    dev = np.max(np.abs(w - [0.2905, 0.3548, 0.3548]))
    ok = worst_sum <= 1e-9 and all_pos and dev <= 1e-4 and worst_shift <= 1e-9
    report(5, ok, f"max|sum-1|={worst_sum:.1e} all>0={all_pos} w={np.round(w, 4).tolist()} "
                  f"(dev {dev:.1e} <= 1e-4) shift err={worst_shift:.1e}")


# -- 6 ---------------------------------------------------------------------------


def _ap_oracle(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if labels[i]:
            hits += 1
            total += hits / rank
    return total / sum(labels)


def _auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg)) / (
        len(pos) * len(neg))


def _mmd_oracle(X, Y):
    pts = list(X) + list(Y)
    bw = float(np.median([math.dist(pts[i], pts[j]) for i in range(len(pts)) for j in range(i + 1, len(pts))]))

    def k(x, y):
        return math.exp(-sum((a - b) ** 2 for a, b in zip(x, y)) / (2 * bw * bw))
    n, m = len(X), len(Y)
    xx = sum(k(X[i], X[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    yy = sum(k(Y[i], Y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    return xx + yy - 2 * sum(k(a, b) for a in X for b in Y) / (n * m)


def test_c6_metric_oracles(report):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 101))
        scores = list(rng.integers(0, 10, n) / 3.0)
        labels = list(rng.integers(0, 2, n))
        if len(set(labels)) == 1:
            labels[0] = 1 - labels[0]
        worst = max(worst, abs(average_precision(scores, labels) - _ap_oracle(scores, labels)),
                    abs(roc_auc(scores, labels) - _auc_oracle(scores, labels)))
    X, Y = rng.standard_normal((50, 4)), rng.standard_normal((50, 4)) + 0.3
    mmd_err = abs(mmd2(X, Y) - _mmd_oracle(X, Y))
    self_biased = abs(mmd2(X, X, biased=True))
    ok = worst <= 1e-12 and mmd_err <= 1e-9 and self_biased <= 1e-12
    report(6, ok, f"AP/AUC max err={worst:.1e} (<= 1e-12) MMD err={mmd_err:.1e} (<= 1e-9) "
                  f"biased mmd2(X,X)={self_biased:.1e} (<= 1e-12)")


# -- 7 ---------------------------------------------------------------------------


def test_c7_corruption_conformance(pipeline, report):
    root, _ = pipeline
    s = CorruptionSpec("blur")
    defaults = (s.quality, s.scale, s.ksize, s.sigma, s.block) == (20, 0.5, 5, 25.0, 10)
    rng = np.random.default_rng(7)
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    inv = np.array_equal(apply_corruption(apply_corruption(img, CorruptionSpec("invert")),
                                          CorruptionSpec("invert")), img)
    pix = np.array_equal(apply_corruption(np.array([[0, 255], [255, 0]], np.uint8),
                                          CorruptionSpec("pixelation", block=2)), np.full((2, 2), 127))
    ksum = abs(gaussian_kernel(5).sum() - 1)
    noise = CorruptionSpec("noise", seed=3)
    noise_ok = apply_corruption(img, noise).tobytes() == apply_corruption(img, noise).tobytes()
    aucs = json.loads((root / "eval_corrupt/corruption_auc.json").read_text())
    clean = aucs["clean"]
    gaps = {k: abs(v - clean) for k, v in aucs.items() if k != "clean"}
    ok = defaults and inv and pix and ksum <= 1e-9 and noise_ok and max(gaps.values()) <= 0.05
    report(7, ok, f"defaults={defaults} invert={inv} pixel={pix} kernel|sum-1|={ksum:.1e} noise={noise_ok} "
                  f"AUC clean={clean:.4f} " + " ".join(f"{k}={aucs[k]:.4f}" for k in gaps) + " (gap <= 0.05)")


# -- 8 ---------------------------------------------------------------------------


def test_c8_diagnostics(pipeline, report):
    root, _ = pipeline
    same = score_overlap([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])
    disjoint = score_overlap([0.0, 0.1, 0.2], [5.0, 6.0])
    reports = read_score_reports(root / "eval/scores.jsonl")
    real = np.stack([r.fused_features() for r in reports if r.label == "real"])
    fake = np.stack([r.fused_features() for r in reports if r.label == "fake"])
    value = mmd2(real, fake)
    ok = same == 1.0 and disjoint == 0.0 and value > 1e-3
    report(8, ok, f"overlap identical={same} disjoint={disjoint} mmd2(real,fake)={value:.4g} (> 1e-3)")


# -- 9 ---------------------------------------------------------------------------


def test_c9_determinism(pipeline, tmp_path, report):
    root_a, _ = pipeline
    root_b, _ = _pipeline(tmp_path / "run_b")
    same = {name: (root_a / "eval" / name).read_bytes() == (root_b / "eval" / name).read_bytes()
            for name in ("metrics.json", "metrics.txt", "scores.jsonl")}
    ckpt = (root_a / "model/checkpoint.avfd").read_bytes() == (root_b / "model/checkpoint.avfd").read_bytes()
    report(9, all(same.values()) and ckpt,
           "byte-identical rerun: " + " ".join(f"{k}={v}" for k, v in same.items()) + f" checkpoint={ckpt}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

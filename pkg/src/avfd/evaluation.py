"""Clip scoring, ranking metrics and domain-shift diagnostics.

Fake is the positive class throughout: a higher anomaly score means more
likely forged.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp
from scipy.stats import rankdata

from .data import SCENARIOS, DatasetManifest
from .encoders import RawFeatures, project
from .errors import DimensionMismatch, EmptyGroup, EmptySequence, NonFinite, SingleClass, TooFewSamples
from .fapl import PolarityEmbeddings, build_pattern, facial_anomaly
from .mmdwl import alignment_channels, alignment_matrix, frame_scores, generate_weights, modulate
from .training import Checkpoint, DetectorParams, Encoders, TrainConfig, extract_all

DEFAULT_BINS = 50


def aggregate_video_score(s_t) -> float:
    """Smoothed max: log of the summed exponentiated frame scores."""
    s_t = np.asarray(s_t, dtype=np.float64).ravel()
    if s_t.size == 0:
        raise EmptySequence("no frame scores to aggregate")
    if not np.all(np.isfinite(s_t)):
        raise NonFinite("non-finite frame score")
    return float(logsumexp(s_t))


def _binary_labels(labels) -> np.ndarray:
    labels = list(labels)
    if labels and isinstance(labels[0], str):
        return np.array([lab == "fake" for lab in labels])
    return np.asarray(labels).astype(bool)


def _check_two_class(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = _binary_labels(labels)
    if scores.shape != pos.shape:
        raise ValueError(f"{scores.size} scores for {pos.size} labels")
    if pos.all() or not pos.any():
        raise SingleClass("both real and fake samples are required")
    return scores, pos


def average_precision(scores, labels) -> float:
    """Mean over positives of the precision at their rank.

    Ranking is by descending score; equal scores keep their input order.
    """
    scores, pos = _check_two_class(scores, labels)
    order = np.argsort(-scores, kind="stable")
    hits = pos[order]
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits].mean())


def roc_auc(scores, labels) -> float:
    """Probability a fake outscores a real, ties counting one half (midrank form)."""
    scores, pos = _check_two_class(scores, labels)
    ranks = rankdata(scores)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def median_bandwidth(X, Y) -> float:
    """Median pairwise distance over the pooled sample; zero distances are
    skipped when they are the majority, and 0.0 means every point coincides."""
    dists = pdist(np.vstack([X, Y]))
    med = float(np.median(dists))
    if med > 0:
        return med
    nonzero = dists[dists > 0]
    return float(np.median(nonzero)) if nonzero.size else 0.0


def mmd2(X, Y, biased: bool = False, bandwidth: float | None = None) -> float:
    """Squared MMD with a Gaussian kernel exp(-|x-y|^2 / (2 bw^2)).

    The default is the unbiased estimator (diagonal kernel terms dropped
    within each sample), bandwidth from the median heuristic. Identical point
    sets with zero spread give 0.0 by convention.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise TooFewSamples("mmd2 needs at least two points per sample")
    if X.shape[1] != Y.shape[1]:
        raise DimensionMismatch(f"feature widths differ: {X.shape[1]} vs {Y.shape[1]}")
    bw = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    if bw == 0.0:
        return 0.0
    gamma = 1.0 / (2.0 * bw * bw)
    kxx = np.exp(-gamma * cdist(X, X, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(Y, Y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(X, Y, "sqeuclidean"))
    n, m = X.shape[0], Y.shape[0]
    if biased:
        return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(xx + yy - 2.0 * kxy.mean())


def score_overlap(real_scores, fake_scores, bins: int = DEFAULT_BINS) -> float:
    """Histogram intersection of the two score distributions on a shared range."""
    real = np.asarray(real_scores, dtype=np.float64).ravel()
    fake = np.asarray(fake_scores, dtype=np.float64).ravel()
    if real.size == 0 or fake.size == 0:
        raise EmptyGroup("both score groups must be non-empty")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    lo = min(real.min(), fake.min())
    hi = max(real.max(), fake.max())
    if hi == lo:
        return 1.0
    edges = np.linspace(lo, hi, bins + 1)
    h_real = np.histogram(real, edges)[0] / real.size
    h_fake = np.histogram(fake, edges)[0] / fake.size
    return float(np.minimum(h_real, h_fake).sum())


@dataclass
class ScoreReport:
    sample_id: str
    frame_scores: list[float]
    video_score: float
    weights: list[float]
    label: str
    scenario: str
    channels: dict[str, float] = field(default_factory=dict)

    def fused_features(self) -> np.ndarray:
        """Weight-scaled channel means, the per-clip diagnostic representation."""
        w = self.weights
        c = self.channels
        return np.array([w[0] * c["facial"], w[1] * c["visual_query"], w[2] * c["audio_query"]])


def score_clip(raw: RawFeatures, params: DetectorParams, emb: PolarityEmbeddings, cfg: TrainConfig,
               sample_id: str = "", label: str = "", scenario: str = "") -> ScoreReport:
    bundle = project(raw, params.projections)
    u_fp = facial_anomaly(bundle.face, emb)
    fp = build_pattern(bundle.face, emb).fp
    w_hat = generate_weights(params.generator, fp, bundle.visual.mean(axis=0), bundle.audio.mean(axis=0))
    w = modulate(w_hat, cfg.alpha)
    phi = alignment_matrix(bundle.visual, bundle.audio, cfg.tau_av, cfg.window)
    s_t = frame_scores(phi, u_fp, w)
    rows, cols = alignment_channels(phi)
    return ScoreReport(
        sample_id=sample_id,
        frame_scores=[float(x) for x in s_t],
        video_score=aggregate_video_score(s_t),
        weights=[float(x) for x in w],
        label=label,
        scenario=scenario,
        channels={"facial": u_fp, "visual_query": float(rows.mean()), "audio_query": float(cols.mean())},
    )


@dataclass
class EvaluationResult:
    metrics: dict
    reports: list[ScoreReport]


def _metric_block(reports: Sequence[ScoreReport]) -> dict:
    labels = [r.label for r in reports]
    scores = [r.video_score for r in reports]
    block = {"n_real": labels.count("real"), "n_fake": labels.count("fake"), "ap": None, "auc": None}
    if block["n_real"] and block["n_fake"]:
        block["ap"] = average_precision(scores, labels)
        block["auc"] = roc_auc(scores, labels)
    return block


def evaluate(manifest: DatasetManifest, checkpoint: Checkpoint, encoders: Encoders | None = None,
             split: str = "test", features: Sequence[RawFeatures] | None = None) -> EvaluationResult:
    """Score every clip of ``split`` and compute AP/AUC overall and per scenario.

    Reports are ordered by sample id, so the metrics do not depend on the
    order of the manifest.
    """
    cfg = checkpoint.train_config()
    encoders = encoders or Encoders.from_config(cfg)
    subset = manifest.split(split)
    feats = list(features) if features is not None else extract_all(subset, encoders, cfg.workers)
    params = checkpoint.params()
    emb = params.polarity(encoders.text, cfg.tau)
    reports = sorted(
        (score_clip(raw, params, emb, cfg, r.id, r.label, r.scenario) for raw, r in zip(feats, subset.records)),
        key=lambda rep: rep.sample_id,
    )
    overall = _metric_block(reports)
    if overall["ap"] is None:
        raise SingleClass(f"{split} split needs both real and fake clips")
    metrics = {"overall": overall}
    for scen in SCENARIOS:
        group = [r for r in reports if r.scenario == scen]
        if group:
            metrics[scen] = _metric_block(group)
    return EvaluationResult(metrics, reports)


def format_metrics_table(metrics: Mapping[str, dict]) -> str:
    lines = [f"{'scope':<10} {'n_real':>6} {'n_fake':>6} {'AP (%)':>8} {'AUC (%)':>8}"]
    for scope, m in metrics.items():
        ap = "-" if m["ap"] is None else f"{100 * m['ap']:.2f}"
        auc = "-" if m["auc"] is None else f"{100 * m['auc']:.2f}"
        lines.append(f"{scope:<10} {m['n_real']:>6} {m['n_fake']:>6} {ap:>8} {auc:>8}")
    return "\n".join(lines) + "\n"


def write_evaluation(result: EvaluationResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.json", "table": out / "metrics.txt", "scores": out / "scores.jsonl"}
    paths["metrics"].write_text(json.dumps(result.metrics, indent=2, sort_keys=True) + "\n")
    paths["table"].write_text(format_metrics_table(result.metrics))
    paths["scores"].write_text("".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in result.reports))
    return paths


def read_score_reports(path: str | Path) -> list[ScoreReport]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ScoreReport(**json.loads(ln)) for ln in lines if ln.strip()]


@dataclass
class DiagnosticReport:
    mmd2: dict[str, float]
    mmd2_raw: dict[str, float]
    overlap: float
    bins: int

    def to_json(self) -> dict:
        return asdict(self)


def diagnose(real_scores, fake_scores, feature_sets: Mapping[str, np.ndarray] | None = None,
             bins: int = DEFAULT_BINS) -> DiagnosticReport:
    """Score overlap between real and fake plus MMD^2 for every pair of feature sets.

    Reported MMD^2 values are clamped at zero; the raw unbiased estimates are
    kept alongside.
    """
    raw = {}
    names = list(feature_sets or {})
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            raw[f"{a}|{b}"] = mmd2(feature_sets[a], feature_sets[b])
    return DiagnosticReport(
        mmd2={k: max(v, 0.0) for k, v in raw.items()},
        mmd2_raw=raw,
        overlap=score_overlap(real_scores, fake_scores, bins),
        bins=bins,
    )


def plot_score_histograms(real_scores, fake_scores, path: str | Path, bins: int = DEFAULT_BINS) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pooled = np.concatenate([np.ravel(real_scores), np.ravel(fake_scores)])
    edges = np.linspace(pooled.min(), pooled.max(), bins + 1)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(real_scores, edges, alpha=0.6, density=True, label="real")
    ax.hist(fake_scores, edges, alpha=0.6, density=True, label="fake")
    ax.set_xlabel("video score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_corruption_auc(aucs: Mapping[str, float], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(list(aucs), [100 * v for v in aucs.values()])
    ax.set_ylabel("AUC (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)

"""Modality weighting, audio-visual alignment and frame-level scoring.

Channel order is (fp, v, a) everywhere: authentic facial pattern, visual,
audio.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import DimensionMismatch, EmptySequence, NonFinite

DEFAULT_ALPHA = (-0.1, 0.1, 0.1)
DEFAULT_TAU_AV = 0.1
DEFAULT_WINDOW = 15
DEFAULT_HIDDEN = 256

# Modulation grid from the appendix ablation, listed there as [visual, audio, fp];
# reordered here to (fp, v, a).
_GRID_VAF = (
    (-0.1, -0.1, +0.1),
    (+0.1, +0.1, +0.1),
    (+0.1, -0.1, -0.1),
    (+0.1, -0.1, +0.1),
    (-0.1, +0.1, -0.1),
    (-0.1, +0.1, +0.1),
    (-0.1, -0.1, -0.1),
    (+0.1, +0.1, -0.1),
)
ALPHA_GRID = tuple((fp, v, a) for v, a, fp in _GRID_VAF)


def parse_alpha(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in str(text).replace(" ", "").split(",")]
    if len(parts) != 3 or not all(np.isfinite(parts)):
        raise ValueError(f"alpha needs three finite numbers, got {text!r}")
    return tuple(parts)


@dataclass
class WeightGenerator:
    """One-hidden-layer ReLU network from concat[a, v, fp] to three logits."""

    w1: np.ndarray  # (h, 4d)
    b1: np.ndarray
    w2: np.ndarray  # (3, h)
    b2: np.ndarray

    @classmethod
    def init(cls, d: int, hidden: int = DEFAULT_HIDDEN, seed: int = 0) -> "WeightGenerator":
        rng = np.random.default_rng([seed, 707])
        n_in = 4 * d
        return cls(
            w1=rng.normal(0.0, np.sqrt(2.0 / n_in), (hidden, n_in)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, np.sqrt(1.0 / hidden), (3, hidden)),
            b2=np.zeros(3),
        )

    @property
    def d(self) -> int:
        return self.w1.shape[1] // 4

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.w2 @ np.maximum(0.0, self.w1 @ x + self.b1) + self.b2


def generate_weights(gen: WeightGenerator, fp, v_mean, a_mean) -> np.ndarray:
    """Softmax over the generator logits of concat[a_mean, v_mean, fp]."""
    fp, v_mean, a_mean = (np.asarray(x, dtype=np.float64) for x in (fp, v_mean, a_mean))
    d = gen.d
    if fp.shape != (2 * d,) or v_mean.shape != (d,) or a_mean.shape != (d,):
        raise DimensionMismatch(
            f"generator expects fp ({2 * d},), v/a ({d},); got {fp.shape}, {v_mean.shape}, {a_mean.shape}"
        )
    return softmax(gen.logits(np.concatenate([a_mean, v_mean, fp])))


def modulate(w_hat, alpha=DEFAULT_ALPHA) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (3,) or not np.all(np.isfinite(alpha)):
        raise NonFinite(f"modulation vector must be 3 finite numbers, got {alpha}")
    return softmax(np.asarray(w_hat, dtype=np.float64) + alpha)


@dataclass(frozen=True)
class AlignmentMatrix:
    phi: np.ndarray
    window: int = DEFAULT_WINDOW
    tau_av: float = DEFAULT_TAU_AV

    def __post_init__(self):
        if self.window < 0 or not self.tau_av > 0:
            raise ValueError("window must be >= 0 and tau_av > 0")

    @property
    def size(self) -> int:
        return self.phi.shape[0]

    @property
    def mask(self) -> np.ndarray:
        """True where k is in the temporal neighborhood of i."""
        idx = np.arange(self.size)
        return np.abs(idx[:, None] - idx[None, :]) <= self.window

    def masked(self) -> np.ndarray:
        return np.where(self.mask, self.phi, -np.inf)


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12), norms


def _check_pair(v, a):
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if v.shape[0] == 0 or a.shape[0] == 0:
        raise EmptySequence("alignment needs at least one frame")
    if v.shape != a.shape:
        raise DimensionMismatch(f"visual {v.shape} vs audio {a.shape}")
    return v, a


def alignment_matrix(v, a, tau_av: float = DEFAULT_TAU_AV, window: int = DEFAULT_WINDOW) -> AlignmentMatrix:
    """Pairwise cosine similarity of visual row i and audio row k, over tau_av."""
    v, a = _check_pair(v, a)
    vu, _ = _unit_rows(v)
    au, _ = _unit_rows(a)
    return AlignmentMatrix(vu @ au.T / tau_av, window, tau_av)


def av_alignment_loss(phi: AlignmentMatrix) -> float:
    """Mean over frames of -log softmax probability of the aligned pair."""
    logp = log_softmax(phi.masked(), axis=1)
    return float(-np.mean(np.diag(logp)))


def av_loss_and_grads(v, a, tau_av: float = DEFAULT_TAU_AV, window: int = DEFAULT_WINDOW):
    """Alignment loss with gradients wrt the unnormalized rows of v and a."""
    v, a = _check_pair(v, a)
    vu, vn = _unit_rows(v)
    au, an = _unit_rows(a)
    phi = AlignmentMatrix(vu @ au.T / tau_av, window, tau_av)
    masked = phi.masked()
    logp = log_softmax(masked, axis=1)
    loss = float(-np.mean(np.diag(logp)))
    n = phi.size
    g_phi = (np.exp(logp) - np.eye(n)) / n  # zero outside the window
    g_vu = g_phi @ au / tau_av
    g_au = g_phi.T @ vu / tau_av
    g_v = (g_vu - vu * np.sum(vu * g_vu, axis=1, keepdims=True)) / np.maximum(vn, 1e-12)
    g_a = (g_au - au * np.sum(au * g_au, axis=1, keepdims=True)) / np.maximum(an, 1e-12)
    return loss, g_v, g_a


def alignment_channels(phi: AlignmentMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame surprisal of the aligned pair, visual-as-query and audio-as-query."""
    masked = phi.masked()
    rows = -np.diag(log_softmax(masked, axis=1))
    cols = -np.diag(log_softmax(masked, axis=0))
    return rows, cols


def frame_scores(phi: AlignmentMatrix, u_fp: float, w) -> np.ndarray:
    """Weighted sum of facial anomaly and row/column alignment surprisal."""
    w = np.asarray(w, dtype=np.float64)
    rows, cols = alignment_channels(phi)
    return w[0] * u_fp + w[1] * rows + w[2] * cols

"""Facial authenticity pattern learning.

Positive and negative prompt hierarchies (fixed text plus learnable tokens)
are encoded, normalized, averaged per polarity and projected through one
shared matrix into the embeddings ``p`` and ``n``. Faces are pulled toward
``p`` and pushed from ``n`` by a two-way temperature-scaled contrastive loss.
All gradients are analytic; see ``ftca_loss_and_grads``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyBatch, EmptyGroup, EmptyPolarity, NonFinite, ParseError

DEFAULT_TAU = 0.07
DEFAULT_NUM_TOKENS = 4
TOKEN_INIT_STD = 0.02
W_INIT_STD = 0.01

# (region, positive, negative)
DEFAULT_PROMPTS: tuple[tuple[str, str, str], ...] = (
    ("face", "a real human face", "a fake human face"),
    ("eyes", "a bonafide face with expressive eyes", "a spoof face with dull eyes"),
    ("mouth", "a genuine face with natural mouth", "a forged face with unnatural mouth"),
)


@dataclass
class PromptHierarchy:
    """Positive/negative prompt texts and their learnable token blocks.

    ``pos_tokens`` has shape (g_p, l, d_tok) and ``neg_tokens`` (g_n, l, d_tok).
    With ``use_text=False`` the fixed text is dropped and each prompt is its
    learnable tokens alone.
    """

    positives: list[str]
    negatives: list[str]
    pos_tokens: np.ndarray
    neg_tokens: np.ndarray
    use_text: bool = True

    @property
    def g_p(self) -> int:
        return len(self.positives)

    @property
    def g_n(self) -> int:
        return len(self.negatives)

    @property
    def l(self) -> int:
        return self.pos_tokens.shape[1]

    @classmethod
    def create(cls, positives: Sequence[str], negatives: Sequence[str], d_tok: int,
               num_tokens: int = DEFAULT_NUM_TOKENS, seed: int = 0, use_text: bool = True):
        rng = np.random.default_rng([seed, 505])
        pos = rng.normal(0.0, TOKEN_INIT_STD, (len(positives), num_tokens, d_tok))
        neg = rng.normal(0.0, TOKEN_INIT_STD, (len(negatives), num_tokens, d_tok))
        return cls(list(positives), list(negatives), pos, neg, use_text)

    @classmethod
    def default(cls, d_tok: int, num_tokens: int = DEFAULT_NUM_TOKENS, seed: int = 0,
                regions: Sequence[str] | None = None, use_text: bool = True):
        rows = [r for r in DEFAULT_PROMPTS if regions is None or r[0] in regions]
        if regions is not None and len(rows) != len(set(regions)):
            known = [r[0] for r in DEFAULT_PROMPTS]
            raise ValueError(f"unknown prompt region in {list(regions)}; known: {known}")
        return cls.create([r[1] for r in rows], [r[2] for r in rows], d_tok, num_tokens, seed, use_text)

    def swapped(self) -> "PromptHierarchy":
        return PromptHierarchy(self.negatives, self.positives, self.neg_tokens, self.pos_tokens, self.use_text)


def read_prompt_file(path: str | Path) -> tuple[list[str], list[str]]:
    """Parse ``pos<TAB>text`` / ``neg<TAB>text`` lines; blank lines are skipped."""
    pos, neg = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        kind, sep, text = line.partition("\t")
        if not sep or kind not in ("pos", "neg") or not text.strip():
            raise ParseError(f"{path}:{lineno}: expected 'pos<TAB>text' or 'neg<TAB>text'")
        (pos if kind == "pos" else neg).append(text.strip())
    return pos, neg


def format_prompt_file(positives: Sequence[str], negatives: Sequence[str]) -> str:
    lines = [f"pos\t{t}" for t in positives] + [f"neg\t{t}" for t in negatives]
    return "\n".join(lines) + "\n"


def init_projection(d: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 606])
    return np.eye(d) + rng.normal(0.0, W_INIT_STD, (d, d))


@dataclass
class PolarityEmbeddings:
    p: np.ndarray
    n: np.ndarray
    W: np.ndarray
    tau: float = DEFAULT_TAU
    # per-polarity state kept for the backward pass
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def p_hat(self) -> np.ndarray:
        return self.p / np.linalg.norm(self.p)

    @property
    def n_hat(self) -> np.ndarray:
        return self.n / np.linalg.norm(self.n)


def _sequences(texts, tokens, text_enc, use_text):
    for text, toks in zip(texts, tokens):
        if use_text:
            fixed = text_enc.token_embeddings(text_enc.tokenize(text))
            yield np.concatenate([fixed, toks], axis=0)
        else:
            yield toks


def _polarity_mean(texts, tokens, text_enc, use_text):
    seqs = list(_sequences(texts, tokens, text_enc, use_text))
    raws = np.stack([np.asarray(text_enc.encode(s), dtype=np.float64) for s in seqs])
    norms = np.linalg.norm(raws, axis=1, keepdims=True)
    return (raws / norms).mean(axis=0), (seqs, raws, norms)


def encode_polarity(prompts: PromptHierarchy, text_enc, W: np.ndarray,
                    tau: float = DEFAULT_TAU) -> PolarityEmbeddings:
    """Shared-projection polarity embeddings.

    Each prompt is encoded and L2-normalized, the unit vectors are averaged
    within a polarity, and the mean goes through ``W``. The result is not
    re-normalized.
    """
    if prompts.g_p == 0 or prompts.g_n == 0:
        raise EmptyPolarity(f"need prompts of both polarities (g_p={prompts.g_p}, g_n={prompts.g_n})")
    if prompts.pos_tokens.shape[-1] != text_enc.d_tok or prompts.neg_tokens.shape[-1] != text_enc.d_tok:
        raise DimensionMismatch("learnable token width does not match the text encoder")
    if W.shape != (W.shape[0], text_enc.d):
        raise DimensionMismatch(f"W of shape {W.shape} cannot take {text_enc.d}-d text features")
    q_p, pos_state = _polarity_mean(prompts.positives, prompts.pos_tokens, text_enc, prompts.use_text)
    q_n, neg_state = _polarity_mean(prompts.negatives, prompts.neg_tokens, text_enc, prompts.use_text)
    return PolarityEmbeddings(
        p=W @ q_p, n=W @ q_n, W=W, tau=tau,
        cache={"q_p": q_p, "q_n": q_n, "pos": pos_state, "neg": neg_state},
    )


def _check_faces(faces) -> np.ndarray:
    faces = np.atleast_2d(np.asarray(faces, dtype=np.float64))
    if faces.shape[0] == 0:
        raise EmptyBatch("no faces in batch")
    if not np.all(np.isfinite(faces)):
        raise NonFinite("non-finite face feature")
    return faces


def _logits(faces, emb):
    if faces.shape[1] != emb.p.shape[0]:
        raise DimensionMismatch(f"faces are {faces.shape[1]}-d, embeddings {emb.p.shape[0]}-d")
    if not (np.all(np.isfinite(emb.p)) and np.all(np.isfinite(emb.n))):
        raise NonFinite("non-finite polarity embedding")
    return faces @ emb.p_hat / emb.tau, faces @ emb.n_hat / emb.tau


def ftca_loss(faces, emb: PolarityEmbeddings) -> float:
    """Mean over faces of -log softmax probability of the positive prompt.

    Faces are expected unit-norm; ``p`` and ``n`` are normalized here.
    """
    s_pos, s_neg = _logits(_check_faces(faces), emb)
    return float(np.mean(np.logaddexp(0.0, s_neg - s_pos)))


def _normalize_backward(x, grad_unit):
    """Gradient wrt x of a loss given its gradient wrt x / |x|."""
    norm = np.linalg.norm(x)
    unit = x / norm
    return (grad_unit - unit * (unit @ grad_unit)) / norm


def ftca_grads_wrt_embeddings(faces, emb: PolarityEmbeddings):
    """(loss, dL/dp, dL/dn, dL/dfaces) with p and n unnormalized."""
    faces = _check_faces(faces)
    s_pos, s_neg = _logits(faces, emb)
    margin = s_neg - s_pos
    loss = float(np.mean(np.logaddexp(0.0, margin)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * margin)) / len(faces)  # stable logistic
    g_phat = -(sig @ faces) / emb.tau
    g_nhat = (sig @ faces) / emb.tau
    g_faces = (np.outer(-sig, emb.p_hat) + np.outer(sig, emb.n_hat)) / emb.tau
    return loss, _normalize_backward(emb.p, g_phat), _normalize_backward(emb.n, g_nhat), g_faces


def _polarity_backward(state, tokens, g_q, text_enc, use_text):
    seqs, raws, norms = state
    g = len(seqs)
    grads = np.zeros_like(tokens)
    l = tokens.shape[1]
    for i, (seq, raw, norm) in enumerate(zip(seqs, raws, norms[:, 0])):
        g_raw = _normalize_backward(raw, g_q / g)
        g_seq = text_enc.backward(seq, g_raw)
        grads[i] = g_seq[len(seq) - l:] if l else g_seq[:0]
    return grads


def ftca_loss_and_grads(faces, prompts: PromptHierarchy, text_enc, W: np.ndarray,
                        tau: float = DEFAULT_TAU):
    """Loss plus gradients wrt positive tokens, negative tokens and W."""
    emb = encode_polarity(prompts, text_enc, W, tau)
    loss, g_p, g_n, _ = ftca_grads_wrt_embeddings(faces, emb)
    c = emb.cache
    g_W = np.outer(g_p, c["q_p"]) + np.outer(g_n, c["q_n"])
    g_pos = _polarity_backward(c["pos"], prompts.pos_tokens, W.T @ g_p, text_enc, prompts.use_text)
    g_neg = _polarity_backward(c["neg"], prompts.neg_tokens, W.T @ g_n, text_enc, prompts.use_text)
    return loss, {"pos_tokens": g_pos, "neg_tokens": g_neg, "W": g_W}


def facial_anomaly(f, emb: PolarityEmbeddings) -> float:
    """Cosine gap <f, n_hat> - <f, p_hat>; positive leans forged."""
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)) or not np.all(np.isfinite(emb.p)) or not np.all(np.isfinite(emb.n)):
        raise NonFinite("non-finite input to facial_anomaly")
    return float(f @ emb.n_hat - f @ emb.p_hat)


@dataclass(frozen=True)
class AuthenticPattern:
    fp: np.ndarray

    @property
    def d(self) -> int:
        return self.fp.shape[0] // 2


def build_pattern(f, emb: PolarityEmbeddings) -> AuthenticPattern:
    f = np.asarray(f, dtype=np.float64)
    if f.shape != emb.p.shape:
        raise DimensionMismatch(f"face {f.shape} vs positive embedding {emb.p.shape}")
    return AuthenticPattern(np.concatenate([emb.p, f]))


def similarity_diagnostic(groups: Mapping[str, Sequence], emb: PolarityEmbeddings) -> dict[str, dict[str, float]]:
    """Mean cosine of faces to the positive and negative embeddings per group.

    ``groups`` maps a group name (e.g. ``"real"``) to per-frame face vectors.
    Returns ``{group: {"p_texts", "n_texts", "difference"}}`` with
    difference = p_texts - n_texts.
    """
    out = {}
    for name, faces in groups.items():
        faces = np.atleast_2d(np.asarray(faces, dtype=np.float64))
        if faces.size == 0:
            raise EmptyGroup(f"group {name!r} has no faces")
        unit = faces / np.linalg.norm(faces, axis=1, keepdims=True)
        pos = float(np.mean(unit @ emb.p_hat))
        neg = float(np.mean(unit @ emb.n_hat))
        out[name] = {"p_texts": pos, "n_texts": neg, "difference": pos - neg}
    return out

"""Encoder contracts and deterministic toy encoders.

Every toy encoder is a fixed, seeded map, so identical inputs give
bit-identical outputs. Pretrained backbones plug in behind the same
duck-typed interfaces:

* face encoder: ``.d`` and ``.embed(frame, mask=None) -> (d,)``
* text encoder: ``.d``, ``.d_tok``, ``.tokenize(str)``, ``.token_embeddings(ids)``,
  ``.encode(seq) -> (d,)`` and ``.backward(seq, grad) -> grad wrt seq``
* AV front end: ``.d_raw``, ``.visual(mouths) -> (T, d_raw)``,
  ``.audio(mel) -> (T_a, d_raw)``
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np
from PIL import Image
from scipy.io import wavfile

from .data import SampleRecord, is_url
from .errors import DimensionMismatch, EmptyAudio, EmptySequence

D_EMBED = 512

N_MELS = 80
WIN_SECONDS = 0.025
HOP_SECONDS = 0.010
LOG_FLOOR = 1e-10


def l2_normalize(x: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.maximum(norm, eps)


def to_gray(image: np.ndarray) -> np.ndarray:
    """8-bit (H, W) or (H, W, C) image -> float64 luma in [0, 255]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] >= 3:
        return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    raise DimensionMismatch(f"unsupported image shape {img.shape}")


def _area_resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape == (size, size):
        return img
    return cv2.resize(img, (size, size), interpolation=cv2.INTER_AREA)


def dct_basis(n: int, orders: Sequence[int]) -> np.ndarray:
    """Orthonormal DCT-II rows of the given orders over ``n`` points."""
    k = np.asarray(orders, dtype=np.float64)[:, None]
    i = np.arange(n, dtype=np.float64)[None, :]
    basis = np.cos(np.pi * (i + 0.5) * k / n) * np.sqrt(2.0 / n)
    basis[k[:, 0] == 0] = 1.0 / np.sqrt(n)
    return basis


def dct_basis_2d(size: int, count: int) -> np.ndarray:
    """``count`` lowest-frequency 2-D DCT images (DC excluded), flattened."""
    pairs = sorted(
        ((u, v) for u in range(size) for v in range(size) if (u, v) != (0, 0)),
        key=lambda uv: (uv[0] + uv[1], uv[0]),
    )[:count]
    rows = dct_basis(size, range(size))
    return np.stack([np.outer(rows[u], rows[v]).ravel() for u, v in pairs])


# -- audio -------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def stft_params(sample_rate: int) -> tuple[int, int, int]:
    """(win_length, hop_length, n_fft) for the fixed 25 ms / 10 ms framing."""
    win = int(round(WIN_SECONDS * sample_rate))
    hop = int(round(HOP_SECONDS * sample_rate))
    # two octaves of zero padding keep the lowest mel filters non-empty at 16 kHz
    n_fft = 1 << int(np.ceil(np.log2(win)) + 1)
    return win, hop, n_fft


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular filters, peak value 1, centers evenly spaced on the mel scale.

    Returns an (n_mels, n_fft // 2 + 1) matrix.
    """
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lo, mid, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def compute_mel_spectrogram(waveform: np.ndarray, sample_rate: int) -> np.ndarray:
    """Natural-log mel power spectrogram, shape (frames, 80).

    Hann window of 25 ms, 10 ms hop, 80 mel bands over 0..Nyquist, energies
    floored at 1e-10 before the log. A waveform shorter than one window is
    zero-padded to a single frame.
    """
    x = np.asarray(waveform, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyAudio("waveform has no samples")
    if sample_rate <= 0:
        raise ValueError("sample rate must be positive")
    win, hop, n_fft = stft_params(sample_rate)
    if x.size < win:
        x = np.pad(x, (0, win - x.size))
    n_frames = 1 + (x.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(win + 2)[1:-1][None, :]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(sample_rate, n_fft).T
    return np.log(np.maximum(mel, LOG_FLOOR))


def resample_rows(x: np.ndarray, length: int) -> np.ndarray:
    """Bucket rows of ``x`` into ``length`` rows.

    Row i goes to bucket floor(i * length / n) and buckets are mean-pooled;
    when there are fewer rows than buckets the nearest row is repeated.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0 or length < 1:
        raise EmptySequence("cannot resample an empty sequence")
    if n == length:
        return x.copy()
    if n < length:
        return x[(np.arange(length) * n) // length]
    bucket = (np.arange(n) * length) // n
    sums = np.zeros((length,) + x.shape[1:])
    np.add.at(sums, bucket, x)
    return sums / np.bincount(bucket, minlength=length).reshape((-1,) + (1,) * (x.ndim - 1))


# -- toy encoders --------------------------------------------------------------


class ToyFaceEncoder:
    """Seeded linear map of a downsampled, centered grayscale frame.

    With a mask, each downsampled cell is the mask-weighted mean of its
    pixels, so masked-out regions contribute nothing.
    """

    name = "toy-face"

    def __init__(self, seed: int = 0, d: int = D_EMBED, grid: int = 16):
        self.seed, self.d, self.grid = seed, d, grid
        rng = np.random.default_rng([seed, 101])
        self.weight = rng.standard_normal((d, grid * grid)) / grid

    def pool(self, frame: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        gray = to_gray(frame) / 255.0 - 0.5
        if mask is None:
            return _area_resize(gray, self.grid).ravel()
        m = to_gray(mask) / 255.0
        if m.shape != gray.shape:
            raise DimensionMismatch(f"mask {m.shape} does not match frame {gray.shape}")
        num = _area_resize(gray * m, self.grid)
        den = _area_resize(m, self.grid)
        return np.where(den > 1e-6, num / np.maximum(den, 1e-6), 0.0).ravel()

    def embed(self, frame: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        return self.weight @ self.pool(frame, mask)


class LinearFaceAdapter(ToyFaceEncoder):
    """Face encoder whose linear map comes from an exported ``.npz`` file.

    The file holds one array, ``weight``, of shape (d, grid * grid); pooling
    is the same as the toy encoder's.
    """

    name = "linear-face-adapter"

    def __init__(self, weight: np.ndarray):
        weight = np.asarray(weight, dtype=np.float64)
        grid = int(round(np.sqrt(weight.shape[1]))) if weight.ndim == 2 else 0
        if grid < 1 or grid * grid != weight.shape[1]:
            raise DimensionMismatch(f"adapter weight must be (d, grid*grid), got {weight.shape}")
        self.seed, self.weight = None, weight
        self.d, self.grid = weight.shape[0], grid

    @classmethod
    def load(cls, path: str | Path) -> "LinearFaceAdapter":
        with np.load(path) as blob:
            return cls(blob["weight"])

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, weight=self.weight)


class ToyTextEncoder:
    """Mean-pooled token embeddings through a seeded linear map and tanh.

    Words hash to ids with CRC-32, so the vocabulary is open.
    """

    name = "toy-text"

    def __init__(self, seed: int = 0, d: int = D_EMBED, d_tok: int = 64, vocab: int = 4096):
        self.seed, self.d, self.d_tok, self.vocab = seed, d, d_tok, vocab
        rng = np.random.default_rng([seed, 202])
        self.table = rng.standard_normal((vocab, d_tok))
        self.weight = rng.standard_normal((d, d_tok)) / np.sqrt(d_tok)

    def tokenize(self, text: str) -> list[int]:
        return [zlib.crc32(w.encode("utf-8")) % self.vocab for w in text.lower().split()]

    def token_embeddings(self, ids: Sequence[int]) -> np.ndarray:
        return self.table[np.asarray(ids, dtype=np.int64)].reshape(-1, self.d_tok)

    def encode(self, seq: np.ndarray) -> np.ndarray:
        if len(seq) == 0:
            raise EmptySequence("empty token sequence")
        return np.tanh(self.weight @ seq.mean(axis=0))

    def backward(self, seq: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        out = self.encode(seq)
        g_h = self.weight.T @ (grad_out * (1.0 - out**2))
        return np.broadcast_to(g_h / len(seq), seq.shape).copy()


class ToyAVFrontEnd:
    """Seeded linear front ends for mouth crops and mel spectrograms.

    Both maps read only low-frequency structure: the visual map mixes the
    lowest 2-D DCT components of the centered crop, the audio map mixes the
    lowest cepstral orders of each mel column. Neither sees the DC term, so
    global brightness and loudness do not move the features.
    """

    name = "toy-av"

    def __init__(self, seed: int = 0, d_raw: int = 16, mouth_size: int = 32,
                 n_mels: int = N_MELS, n_components: int = 20):
        self.seed, self.d_raw, self.mouth_size, self.n_mels = seed, d_raw, mouth_size, n_mels
        rng = np.random.default_rng([seed, 303])
        self.visual_basis = dct_basis_2d(mouth_size, n_components)
        self.audio_basis = dct_basis(n_mels, range(1, n_components + 1))
        self.visual_mix = rng.standard_normal((d_raw, n_components))
        self.audio_mix = rng.standard_normal((d_raw, n_components))
        self.visual_weight = self.visual_mix @ self.visual_basis
        self.audio_weight = self.audio_mix @ self.audio_basis

    def visual(self, mouths: Sequence[np.ndarray]) -> np.ndarray:
        if len(mouths) == 0:
            raise EmptySequence("no mouth crops")
        rows = [_area_resize(to_gray(m) / 255.0 - 0.5, self.mouth_size).ravel() for m in mouths]
        return np.stack(rows) @ self.visual_weight.T

    def audio(self, mel: np.ndarray) -> np.ndarray:
        mel = np.asarray(mel, dtype=np.float64)
        if mel.ndim != 2 or mel.shape[1] != self.n_mels:
            raise DimensionMismatch(f"expected (frames, {self.n_mels}) mel, got {mel.shape}")
        return mel @ self.audio_weight.T


@dataclass
class Projections:
    """Trainable linear maps from front-end width to the shared space."""

    visual: np.ndarray  # (d, d_raw)
    audio: np.ndarray  # (d, d_raw)

    @classmethod
    def init(cls, d_raw: int, d: int = D_EMBED, seed: int = 0) -> "Projections":
        # one semi-orthogonal draw for both, so cosines of raw features survive projection
        rng = np.random.default_rng([seed, 404])
        q, _ = np.linalg.qr(rng.standard_normal((max(d, d_raw), min(d, d_raw))))
        q = q if d >= d_raw else q.T
        return cls(visual=q.copy(), audio=q.copy())

    @classmethod
    def identity(cls, d: int) -> "Projections":
        return cls(visual=np.eye(d), audio=np.eye(d))


# -- feature extraction -------------------------------------------------------


def encode_face_sequence(encoder, frames: Sequence[np.ndarray], mask=None) -> np.ndarray:
    """Unit face semantic: per-frame embeddings averaged over time, then normalized.

    ``mask`` may be one mask for all frames or a sequence with one per frame.
    """
    if len(frames) == 0:
        raise EmptySequence("no frames to encode")
    masks = mask if isinstance(mask, (list, tuple)) else [mask] * len(frames)
    if len(masks) != len(frames):
        raise DimensionMismatch(f"{len(masks)} masks for {len(frames)} frames")
    embs = np.stack([np.asarray(encoder.embed(f, m), dtype=np.float64) for f, m in zip(frames, masks)])
    mean = embs.mean(axis=0)
    norm = np.linalg.norm(mean)
    if not np.isfinite(norm) or norm == 0.0:
        raise EmptySequence("face embeddings average to zero")
    return mean / norm


@dataclass
class RawFeatures:
    """Frozen-encoder outputs of one clip, before the trainable projections."""

    face: np.ndarray  # (d,), unit norm
    visual: np.ndarray  # (T, d_raw)
    audio: np.ndarray  # (T, d_raw), already resampled to T


@dataclass
class FeatureBundle:
    face: np.ndarray  # (d,)
    visual: np.ndarray  # (T, d)
    audio: np.ndarray  # (T, d)

    @property
    def d(self) -> int:
        return self.face.shape[0]

    @property
    def num_frames(self) -> int:
        return self.visual.shape[0]


def read_image(path: str) -> np.ndarray:
    if is_url(path):
        raise FileNotFoundError(f"remote reference not fetched: {path}")
    with Image.open(path) as img:
        return np.asarray(img)


def read_audio(path: str) -> tuple[np.ndarray, int]:
    """Waveform as float64 in [-1, 1] plus its sample rate."""
    if is_url(path):
        raise FileNotFoundError(f"remote reference not fetched: {path}")
    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data / float(np.iinfo(data.dtype).max)
    return data.astype(np.float64), int(rate)


def extract_raw(sample: SampleRecord, face_enc, av_frontend,
                resolve: Callable[[str], str] = str) -> RawFeatures:
    frames = [read_image(resolve(r)) for r in sample.frame_refs]
    mouths = [read_image(resolve(r)) for r in sample.mouth_refs]
    mask = read_image(resolve(sample.mask_ref)) if sample.mask_ref else None
    wave, rate = read_audio(resolve(sample.audio_ref.path))
    if rate != sample.audio_ref.sample_rate:
        raise DimensionMismatch(
            f"{sample.id}: file rate {rate} Hz != manifest rate {sample.audio_ref.sample_rate} Hz"
        )
    face = encode_face_sequence(face_enc, frames, mask)
    visual = av_frontend.visual(mouths)
    audio = resample_rows(av_frontend.audio(compute_mel_spectrogram(wave, rate)), len(frames))
    return RawFeatures(face=face, visual=visual, audio=audio)


def project(raw: RawFeatures, projections: Projections) -> FeatureBundle:
    if projections.visual.shape[1] != raw.visual.shape[1] or projections.audio.shape[1] != raw.audio.shape[1]:
        raise DimensionMismatch("projection input width does not match front-end output")
    return FeatureBundle(
        face=raw.face,
        visual=raw.visual @ projections.visual.T,
        audio=raw.audio @ projections.audio.T,
    )


def extract_features(sample: SampleRecord, face_enc, av_frontend, projections: Projections,
                     root: str | Path | None = None) -> FeatureBundle:
    """Face semantic plus projected per-frame visual and audio rows for one clip.

    Relative references resolve against ``root``. A missing file raises
    ``FileNotFoundError`` naming the path.
    """
    resolve = str if root is None else (lambda ref: ref if is_url(ref) else str(Path(root) / ref))
    return project(extract_raw(sample, face_enc, av_frontend, resolve), projections)

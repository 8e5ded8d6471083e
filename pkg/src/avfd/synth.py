"""Desk-scale synthetic audio-visual clips with planted structure.

Every clip draws a latent sequence z_t (one d_raw vector per video frame).
Mouth crops are rendered so the toy visual front end reads back z_t exactly
(up to 8-bit rounding); the waveform is a bank of tones whose per-frame
amplitudes are solved so the toy audio front end reads back z_t as well.
Real clips use the same z for both streams; fakes drive the audio with a
derangement of the rows, so every frame is out of sync. Face frames are
rendered so the toy face encoder lands near the initial positive prompt
embedding (real) or the negative one (fake).
"""
from __future__ import annotations

import functools
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.io import wavfile

from .data import AudioRef, DatasetManifest, SampleRecord, save_manifest
from .encoders import (
    ToyAVFrontEnd, compute_mel_spectrogram, hz_to_mel, l2_normalize, mel_to_hz, resample_rows,
    stft_params,
)

FRAMES = 16
FPS = 25
SAMPLE_RATE = 16000
FRAME_SIZE = 64
VISUAL_SCALE = 0.75
AUDIO_SCALE = 1.5
FACE_NOISE = 0.5


class ToneBank:
    """Tones on a grid of the hop rate, one per isolated mel band.

    Tone frequencies are multiples of sample_rate / hop, so every analysis
    frame sees the same relative phases and a constant amplitude profile maps
    to a time-constant mel profile. ``solve`` finds per-frame log-power
    profiles whose audio features hit a target.
    """

    def __init__(self, frontend: ToyAVFrontEnd, sample_rate: int = SAMPLE_RATE, fps: int = FPS,
                 frames: int = FRAMES, seed: int = 0):
        self.frontend, self.sample_rate, self.frames = frontend, sample_rate, frames
        self.spf = sample_rate // fps
        _, hop, _ = stft_params(sample_rate)
        step = sample_rate / hop
        edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), frontend.n_mels + 2))
        centers = edges[1:-1]
        chosen = {}
        for b, c in enumerate(centers):
            f = round(c / step) * step
            if step <= f < sample_rate / 2 and f not in chosen.values() \
                    and abs(f - c) < 0.25 * (edges[b + 2] - edges[b]):
                chosen[b] = f
        self.freqs = np.array(sorted(chosen.values()))
        self.phases = np.random.default_rng([seed, 909]).uniform(0.0, 2 * np.pi, self.freqs.size)
        t = np.arange(frames * self.spf) / sample_rate
        self._carriers = np.sin(2 * np.pi * self.freqs[None, :] * t[:, None] + self.phases[None, :])
        self.offset, self.jacobian_pinv = self._calibrate()

    def render(self, profile: np.ndarray) -> np.ndarray:
        """Waveform for per-frame log-power profiles of shape (frames, n_tones), peak 0.5."""
        amp = np.repeat(np.exp(profile / 2.0), self.spf, axis=0)
        wave = (amp * self._carriers).sum(axis=1)
        return 0.5 * wave / np.max(np.abs(wave))

    def features(self, wave: np.ndarray) -> np.ndarray:
        mel = compute_mel_spectrogram(wave, self.sample_rate)
        return resample_rows(self.frontend.audio(mel), self.frames)

    def _static(self, prof: np.ndarray) -> np.ndarray:
        return self.features(self.render(np.tile(prof, (self.frames, 1)))).mean(axis=0)

    def _jacobian(self, prof: np.ndarray, eps: float = 0.05) -> np.ndarray:
        base = self._static(prof)
        cols = []
        for j in range(prof.size):
            bumped = prof.copy()
            bumped[j] += eps
            cols.append((self._static(bumped) - base) / eps)
        return np.stack(cols, axis=1)

    def _calibrate(self):
        # offset profile whose features are ~0, so targets are absolute
        prof = np.zeros(self.freqs.size)
        jp = np.linalg.pinv(self._jacobian(prof))
        for _ in range(8):
            prof -= 0.7 * jp @ self._static(prof)
        return prof, np.linalg.pinv(self._jacobian(prof))

    def solve(self, target: np.ndarray, iterations: int = 4) -> np.ndarray:
        prof = self.offset[None, :] + target @ self.jacobian_pinv.T
        for _ in range(iterations):
            prof += 0.7 * (target - self.features(self.render(prof))) @ self.jacobian_pinv.T
        return prof


@functools.lru_cache(maxsize=4)
def _tone_bank(av_seed: int, sample_rate: int, fps: int, frames: int) -> ToneBank:
    return ToneBank(ToyAVFrontEnd(av_seed), sample_rate, fps, frames, seed=av_seed)


def _derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    if n < 2:
        return np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def render_mouths(frontend: ToyAVFrontEnd, z: np.ndarray, scale: float = VISUAL_SCALE) -> np.ndarray:
    """8-bit mouth crops whose toy visual features equal ``scale * z`` before rounding."""
    coeffs = z @ np.linalg.pinv(frontend.visual_mix).T
    dev = scale * coeffs @ frontend.visual_basis
    pix = np.clip(np.floor((0.5 + dev) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return pix.reshape(-1, frontend.mouth_size, frontend.mouth_size)


def render_faces(face_enc, direction: np.ndarray, rng: np.random.Generator, frames: int = FRAMES,
                 size: int = FRAME_SIZE, noise: float = FACE_NOISE) -> np.ndarray:
    """RGB frames whose toy face embeddings point near ``direction``."""
    d = direction.shape[0]
    pinv = np.linalg.pinv(face_enc.weight)
    targets = l2_normalize(direction[None, :] + noise * rng.standard_normal((frames, d)) / np.sqrt(d))
    cells = targets @ pinv.T
    cells *= 0.35 / np.max(np.abs(cells))
    rep = size // face_enc.grid
    grid = cells.reshape(frames, face_enc.grid, face_enc.grid)
    gray = np.repeat(np.repeat(grid, rep, axis=1), rep, axis=2)
    pix = np.clip(np.floor((0.5 + gray) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return np.repeat(pix[..., None], 3, axis=-1)


def synthesize(out_root: str | Path, n: int, seed: int, encoders, emb, *, test_only: bool = False,
               scenario: str = "talking", frames: int = FRAMES, fps: int = FPS,
               sample_rate: int = SAMPLE_RATE, name: str = "synthetic",
               manifest_name: str = "manifest.avfd") -> DatasetManifest:
    """Write ``n`` clips (ceil(n/2) real, the rest fake) and their manifest.

    ``emb`` supplies the polarity embeddings faces are planted against. By
    default real clips go to the train split and fakes to test; with
    ``test_only`` every clip is a test clip.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    av = encoders.av
    bank = _tone_bank(av.seed, sample_rate, fps, frames)
    rng = np.random.default_rng([seed, 1111])
    labels = np.array(["real"] * ((n + 1) // 2) + ["fake"] * (n // 2))[rng.permutation(n)]
    records = []
    for i, label in enumerate(labels):
        crng = np.random.default_rng([seed, 2222, i])
        cid = f"{name}-{seed}-{i:04d}"
        rel = Path("clips") / cid
        (out_root / rel).mkdir(parents=True, exist_ok=True)
        z = crng.standard_normal((frames, av.d_raw))
        audio_z = z if label == "real" else z[_derangement(crng, frames)]
        direction = emb.p_hat if label == "real" else emb.n_hat
        frame_refs, mouth_refs = [], []
        for t, (face, mouth) in enumerate(zip(render_faces(encoders.face, direction, crng, frames),
                                              render_mouths(av, z))):
            frame_refs.append((rel / f"frame_{t:04d}.png").as_posix())
            mouth_refs.append((rel / f"mouth_{t:04d}.png").as_posix())
            Image.fromarray(face).save(out_root / frame_refs[-1])
            Image.fromarray(mouth).save(out_root / mouth_refs[-1])
        wave = bank.render(bank.solve(AUDIO_SCALE * audio_z))
        audio_path = (rel / "audio.wav").as_posix()
        wavfile.write(out_root / audio_path, sample_rate, wave.astype(np.float32))
        split = "test" if test_only or label == "fake" else "train"
        records.append(SampleRecord(
            id=cid, frame_refs=tuple(frame_refs), mouth_refs=tuple(mouth_refs),
            audio_ref=AudioRef(audio_path, sample_rate), label=str(label), scenario=scenario,
            split=split, meta={"fps": fps},
        ))
    manifest = DatasetManifest(
        tuple(records), name, "1",
        {"generator": "synthetic", "seed": seed, "frames": frames, "fps": fps, "sample_rate": sample_rate},
        out_root.resolve(),
    )
    save_manifest(manifest, out_root / manifest_name)
    return manifest

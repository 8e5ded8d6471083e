"""Frame corruptions for robustness evaluation.

Six kinds with fixed default strengths: blur (ksize 5), compress (JPEG
quality 20), invert, noise (sigma 25), pixelation (block 10) and resize
(scale 0.5, restored to the original size). Every function takes and returns
8-bit images of the same shape.
"""
from __future__ import annotations

import dataclasses
import io
import shutil
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

from .data import DatasetManifest, SampleRecord, save_manifest
from .encoders import read_image
from .errors import EmptyImage, InvalidSpec

KINDS = ("blur", "compress", "invert", "noise", "pixelation", "resize")
PIXELATION_BLOCKS = (2, 4, 8, 10, 16)

# which parameters each kind reads
_PARAMS = {
    "blur": ("ksize",),
    "compress": ("quality",),
    "invert": (),
    "noise": ("sigma", "seed"),
    "pixelation": ("block",),
    "resize": ("scale",),
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    ksize: int = 5
    quality: int = 20
    sigma: float = 25.0
    block: int = 10
    scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown corruption {self.kind!r}; expected one of {KINDS}")
        if self.ksize < 1 or self.ksize % 2 == 0:
            raise InvalidSpec(f"ksize must be a positive odd integer, got {self.ksize}")
        if not 0 <= self.quality <= 100:
            raise InvalidSpec(f"quality must be in [0, 100], got {self.quality}")
        if not self.sigma >= 0:
            raise InvalidSpec(f"sigma must be >= 0, got {self.sigma}")
        if self.block not in PIXELATION_BLOCKS:
            raise InvalidSpec(f"block must be one of {PIXELATION_BLOCKS}, got {self.block}")
        if not 0 < self.scale <= 1:
            raise InvalidSpec(f"scale must be in (0, 1], got {self.scale}")

    def __str__(self):
        params = ",".join(f"{k}={getattr(self, k)}" for k in _PARAMS[self.kind])
        return f"{self.kind}:{params}" if params else self.kind


def parse_spec(text: str) -> CorruptionSpec:
    """Parse ``kind[:key=value,...]``, e.g. ``noise:sigma=25,seed=7``."""
    kind, _, rest = text.strip().partition(":")
    kwargs = {}
    types = {f.name: f.type for f in dataclasses.fields(CorruptionSpec)}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, sep, value = item.partition("=")
        if not sep or key not in _PARAMS.get(kind, ()):
            raise InvalidSpec(f"bad parameter {item!r} for {kind!r}")
        try:
            kwargs[key] = float(value) if types[key] == "float" else int(value)
        except ValueError as exc:
            raise InvalidSpec(f"bad value in {item!r}") from exc
    return CorruptionSpec(kind, **kwargs)


def _to_uint8(x: np.ndarray) -> np.ndarray:
    # round half away from zero, then clamp
    r = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(r, 0, 255).astype(np.uint8)


def blur_sigma(ksize: int) -> float:
    return 0.3 * ((ksize - 1) * 0.5 - 1) + 0.8


def _gaussian_1d(ksize: int) -> np.ndarray:
    sigma = blur_sigma(ksize)
    x = np.arange(ksize) - (ksize - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_kernel(ksize: int) -> np.ndarray:
    """Normalized 2-D Gaussian kernel of side ``ksize``."""
    g = _gaussian_1d(ksize)
    return np.outer(g, g)


def gaussian_blur(img: np.ndarray, ksize: int) -> np.ndarray:
    g = _gaussian_1d(ksize)
    out = img.astype(np.float64)
    # separable; 'mirror' reflects about the edge pixel without repeating it
    out = correlate1d(out, g, axis=0, mode="mirror")
    out = correlate1d(out, g, axis=1, mode="mirror")
    return _to_uint8(out)


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as dec:
        out = np.asarray(dec.convert("L" if img.ndim == 2 else "RGB"))
    return out.reshape(img.shape)


def jpeg_size(img: np.ndarray, quality: int) -> int:
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="JPEG", quality=int(quality))
    return buf.tell()


def invert(img: np.ndarray) -> np.ndarray:
    return (255 - img).astype(np.uint8)


def gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return _to_uint8(img.astype(np.float64) + rng.normal(0.0, sigma, img.shape))


def pixelate(img: np.ndarray, block: int) -> np.ndarray:
    """Replace each block x block tile (smaller at the edges) by the floor of its mean."""
    if block < 1:
        raise InvalidSpec("block must be >= 1")
    h, w = img.shape[:2]
    rows, cols = np.arange(0, h, block), np.arange(0, w, block)
    sums = np.add.reduceat(np.add.reduceat(img.astype(np.int64), rows, axis=0), cols, axis=1)
    counts = np.outer(np.diff(np.append(rows, h)), np.diff(np.append(cols, w)))
    if img.ndim == 3:
        counts = counts[..., None]
    means = sums // counts
    out = np.repeat(np.repeat(means, np.diff(np.append(rows, h)), axis=0), np.diff(np.append(cols, w)), axis=1)
    return out.astype(np.uint8)


def resize_roundtrip(img: np.ndarray, scale: float) -> np.ndarray:
    h, w = img.shape[:2]
    small = (max(1, int(round(w * scale))), max(1, int(round(h * scale))))
    down = cv2.resize(img, small, interpolation=cv2.INTER_LINEAR)
    return cv2.resize(down, (w, h), interpolation=cv2.INTER_LINEAR).reshape(img.shape)


def apply_corruption(frame: np.ndarray, spec: CorruptionSpec, key: tuple[int, ...] = ()) -> np.ndarray:
    """Corrupt one 8-bit frame.

    ``key`` extends the noise seed so that different frames get independent
    but reproducible noise.
    """
    img = np.asarray(frame)
    if img.size == 0:
        raise EmptyImage("empty frame")
    if img.dtype != np.uint8:
        raise InvalidSpec(f"expected an 8-bit image, got {img.dtype}")
    if spec.kind == "blur":
        return gaussian_blur(img, spec.ksize)
    if spec.kind == "compress":
        return jpeg_roundtrip(img, spec.quality)
    if spec.kind == "invert":
        return invert(img)
    if spec.kind == "noise":
        return gaussian_noise(img, spec.sigma, np.random.default_rng([spec.seed, *key]))
    if spec.kind == "pixelation":
        return pixelate(img, spec.block)
    return resize_roundtrip(img, spec.scale)


def corrupt_dataset(manifest: DatasetManifest, spec: CorruptionSpec, out_root: str | Path,
                    manifest_name: str = "manifest.avfd") -> DatasetManifest:
    """Write a corrupted copy of every frame and mouth crop under ``out_root``.

    Audio and masks are copied unchanged. The returned manifest (also saved
    to ``out_root / manifest_name``) records the corruption in its metadata
    and in each record's ``meta``.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    records = []
    for r_idx, rec in enumerate(manifest.records):
        rel = Path("clips") / rec.id
        (out_root / rel).mkdir(parents=True, exist_ok=True)
        new_refs = {}
        for stream_idx, (stream, refs) in enumerate((("frame", rec.frame_refs), ("mouth", rec.mouth_refs))):
            out_refs = []
            for f_idx, ref in enumerate(refs):
                img = apply_corruption(read_image(manifest.resolve(ref)), spec, (r_idx, stream_idx, f_idx))
                dst = rel / f"{stream}_{f_idx:04d}.png"
                Image.fromarray(img).save(out_root / dst)
                out_refs.append(dst.as_posix())
            new_refs[stream] = tuple(out_refs)
        audio_dst = rel / ("audio" + Path(rec.audio_ref.path).suffix)
        shutil.copyfile(manifest.resolve(rec.audio_ref.path), out_root / audio_dst)
        mask_ref = None
        if rec.mask_ref:
            mask_ref = (rel / ("mask" + Path(rec.mask_ref).suffix)).as_posix()
            shutil.copyfile(manifest.resolve(rec.mask_ref), out_root / mask_ref)
        records.append(SampleRecord(
            id=rec.id,
            frame_refs=new_refs["frame"],
            mouth_refs=new_refs["mouth"],
            audio_ref=dataclasses.replace(rec.audio_ref, path=audio_dst.as_posix()),
            mask_ref=mask_ref,
            label=rec.label,
            scenario=rec.scenario,
            split=rec.split,
            meta={**rec.meta, "corruption": str(spec)},
        ))
    meta = {**manifest.metadata, "corruption": str(spec),
            "source": {"name": manifest.name, "version": manifest.version}}
    out = DatasetManifest(tuple(records), f"{manifest.name}-{spec.kind}", manifest.version, meta, out_root.resolve())
    save_manifest(out, out_root / manifest_name)
    return out

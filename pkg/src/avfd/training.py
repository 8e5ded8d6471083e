"""Real-only training of prompt tokens, shared text projection, AV projections.

The objective per batch is ``coeff_av * L_av + coeff_ft * L_ft``, with L_av
averaged over the clips of the batch (each clip against its own alignment
matrix) and L_ft taken over the batch of face vectors. Frozen encoders are run
once up front; the loop then only touches the trainable blocks.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest
from .encoders import (
    D_EMBED, LinearFaceAdapter, Projections, RawFeatures, ToyAVFrontEnd, ToyFaceEncoder, ToyTextEncoder,
    extract_raw,
)
from .errors import ConfigError, NonFinite, ParseError, ValidationError
from .fapl import (
    DEFAULT_NUM_TOKENS, DEFAULT_TAU, PolarityEmbeddings, PromptHierarchy, encode_polarity,
    ftca_loss, ftca_loss_and_grads, init_projection, read_prompt_file,
)
from .mmdwl import (
    DEFAULT_ALPHA, DEFAULT_HIDDEN, DEFAULT_TAU_AV, DEFAULT_WINDOW, WeightGenerator,
    alignment_matrix, av_alignment_loss, av_loss_and_grads, parse_alpha,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AVFDCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 9e-4
    batch_size: int = 512
    epochs: int = 30
    loss_coeff_av: float = 1.0
    loss_coeff_ft: float = 1.0
    seed: int = 0
    tau: float = DEFAULT_TAU
    tau_av: float = DEFAULT_TAU_AV
    window: int = DEFAULT_WINDOW
    alpha: tuple = DEFAULT_ALPHA
    d: int = D_EMBED
    num_tokens: int = DEFAULT_NUM_TOKENS
    hidden: int = DEFAULT_HIDDEN
    encoder_seed: int = 0
    prompt_file: str = ""
    prompt_regions: str = "face,eyes,mouth"
    prompt_text: bool = True
    workers: int = 1
    face_weights: str = ""

    def __post_init__(self):
        text = self.alpha if isinstance(self.alpha, str) else ",".join(map(str, self.alpha))
        try:
            self.alpha = parse_alpha(text)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not (np.isfinite(self.loss_coeff_av) and np.isfinite(self.loss_coeff_ft)):
            raise ConfigError("loss coefficients must be finite")
        if not self.tau > 0 or not self.tau_av > 0 or self.window < 0:
            raise ConfigError("tau, tau_av must be > 0 and window >= 0")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from strings or typed values; unknown keys raise ConfigError."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            kind = type(getattr(cls, key)) if hasattr(cls, key) else str
            try:
                kwargs[key] = _coerce(raw, kind)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(float(x)) for x in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            out[f.name] = str(value)
        return out


def _coerce(raw, kind):
    if not isinstance(raw, str):
        return raw
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        return parse_alpha(raw)
    return raw


def read_config_file(path: str | Path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def format_config(values: dict[str, str]) -> str:
    return "".join(f"{k}={values[k]}\n" for k in sorted(values))


@dataclass
class Encoders:
    face: object
    text: object
    av: object

    @classmethod
    def toy(cls, seed: int = 0, d: int = D_EMBED) -> "Encoders":
        return cls(ToyFaceEncoder(seed, d=d), ToyTextEncoder(seed, d=d), ToyAVFrontEnd(seed))

    @classmethod
    def from_config(cls, cfg: "TrainConfig") -> "Encoders":
        """Toy encoders, with the face map swapped for an adapter when ``face_weights`` is set."""
        enc = cls.toy(cfg.encoder_seed, cfg.d)
        if cfg.face_weights:
            try:
                enc.face = LinearFaceAdapter.load(cfg.face_weights)
            except (OSError, KeyError, ValueError) as exc:
                raise ConfigError(f"cannot load face adapter {cfg.face_weights}: {exc}") from exc
            if enc.face.d != cfg.d:
                raise ConfigError(f"face adapter outputs d={enc.face.d}, config has d={cfg.d}")
        return enc


@dataclass
class DetectorParams:
    """Every trainable block plus the prompt hierarchy it belongs to."""

    prompts: PromptHierarchy
    W: np.ndarray
    projections: Projections
    generator: WeightGenerator

    @classmethod
    def init(cls, cfg: TrainConfig, encoders: Encoders) -> "DetectorParams":
        if cfg.prompt_file:
            pos, neg = read_prompt_file(cfg.prompt_file)
            prompts = PromptHierarchy.create(pos, neg, encoders.text.d_tok, cfg.num_tokens,
                                             cfg.seed, cfg.prompt_text)
        else:
            regions = [r.strip() for r in cfg.prompt_regions.split(",") if r.strip()]
            try:
                prompts = PromptHierarchy.default(encoders.text.d_tok, cfg.num_tokens, cfg.seed,
                                                  regions, cfg.prompt_text)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return cls(
            prompts=prompts,
            W=init_projection(cfg.d, cfg.seed),
            projections=Projections.init(encoders.av.d_raw, cfg.d, cfg.seed),
            generator=WeightGenerator.init(cfg.d, cfg.hidden, cfg.seed),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        g = self.generator
        return {
            "pos_tokens": self.prompts.pos_tokens, "neg_tokens": self.prompts.neg_tokens,
            "W": self.W, "proj_visual": self.projections.visual, "proj_audio": self.projections.audio,
            "gen_w1": g.w1, "gen_b1": g.b1, "gen_w2": g.w2, "gen_b2": g.b2,
        }

    def polarity(self, text_enc, tau: float) -> PolarityEmbeddings:
        return encode_polarity(self.prompts, text_enc, self.W, tau)

    @classmethod
    def from_arrays(cls, arrays: dict, positives, negatives, use_text: bool = True) -> "DetectorParams":
        a = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        return cls(
            PromptHierarchy(list(positives), list(negatives), a["pos_tokens"], a["neg_tokens"], use_text),
            a["W"], Projections(a["proj_visual"], a["proj_audio"]),
            WeightGenerator(a["gen_w1"], a["gen_b1"], a["gen_w2"], a["gen_b2"]),
        )

    def copy(self) -> "DetectorParams":
        p = self.prompts
        return DetectorParams.from_arrays(self.arrays(), p.positives, p.negatives, p.use_text)


def total_loss_and_grads(batch: Sequence[RawFeatures], params: DetectorParams, cfg: TrainConfig,
                         text_enc, need_grads: bool = True):
    """((L, L_av, L_ft), grads-by-array-name or None)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    P_v, P_a = params.projections.visual, params.projections.audio
    faces = np.stack([r.face for r in batch])
    l_av = 0.0
    g_pv, g_pa = np.zeros_like(P_v), np.zeros_like(P_a)
    for raw in batch:
        v, a = raw.visual @ P_v.T, raw.audio @ P_a.T
        if need_grads:
            loss, g_v, g_a = av_loss_and_grads(v, a, cfg.tau_av, cfg.window)
            g_pv += g_v.T @ raw.visual
            g_pa += g_a.T @ raw.audio
        else:
            loss = av_alignment_loss(alignment_matrix(v, a, cfg.tau_av, cfg.window))
        l_av += loss
    l_av /= len(batch)
    if need_grads:
        l_ft, g_ft = ftca_loss_and_grads(faces, params.prompts, text_enc, params.W, cfg.tau)
    else:
        l_ft, g_ft = ftca_loss(faces, params.polarity(text_enc, cfg.tau)), None
    total = cfg.loss_coeff_av * l_av + cfg.loss_coeff_ft * l_ft
    if not need_grads:
        return (total, l_av, l_ft), None
    c_av, c_ft = cfg.loss_coeff_av, cfg.loss_coeff_ft
    grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    grads["proj_visual"] = c_av * g_pv / len(batch)
    grads["proj_audio"] = c_av * g_pa / len(batch)
    for key in ("pos_tokens", "neg_tokens", "W"):
        grads[key] = c_ft * g_ft[key]
    # the weight generator is outside the loss graph; its gradient stays zero
    return (total, l_av, l_ft), grads


def total_loss(batch: Sequence[RawFeatures], params: DetectorParams, cfg: TrainConfig, text_enc):
    """(L, L_av, L_ft) for one batch."""
    return total_loss_and_grads(batch, params, cfg, text_enc, need_grads=False)[0]


class Adam:
    """Adaptive-moment optimizer, updating arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict[str, str]
    positives: list[str]
    negatives: list[str]
    epoch: int = 0
    loss_history: list[list[float]] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return int(self.config.get("seed", 0))

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_mapping(self.config)

    def params(self) -> DetectorParams:
        return DetectorParams.from_arrays(self.arrays, self.positives, self.negatives,
                                          self.train_config().prompt_text)

    @classmethod
    def from_params(cls, params: DetectorParams, cfg: TrainConfig, epoch: int = 0,
                    loss_history=None) -> "Checkpoint":
        return cls(
            arrays={k: np.array(v, dtype=np.float64) for k, v in params.arrays().items()},
            config=cfg.to_mapping(),
            positives=list(params.prompts.positives),
            negatives=list(params.prompts.negatives),
            epoch=epoch,
            loss_history=[list(map(float, row)) for row in (loss_history or [])],
        )

    def meta(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config,
            "positives": self.positives,
            "negatives": self.negatives,
            "epoch": self.epoch,
            "seed": self.seed,
            "loss_history": self.loss_history,
        }

    def to_bytes(self) -> bytes:
        index, blobs, offset = [], [], 0
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header = json.dumps({"arrays": index, "meta": self.meta()}, sort_keys=True).encode("utf-8")
        return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(CHECKPOINT_MAGIC):
            raise ParseError("not a checkpoint file")
        start = len(CHECKPOINT_MAGIC)
        version, hlen = struct.unpack_from("<IQ", data, start)
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        start += struct.calcsize("<IQ")
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        body = start + hlen
        arrays = {}
        for item in header["arrays"]:
            lo = body + item["offset"]
            raw = np.frombuffer(data[lo:lo + item["nbytes"]], dtype="<f8")
            arrays[item["name"]] = raw.reshape(item["shape"]).astype(np.float64)
        meta = header["meta"]
        return cls(arrays, dict(meta["config"]), list(meta["positives"]), list(meta["negatives"]),
                   int(meta["epoch"]), [list(r) for r in meta["loss_history"]])

    def save(self, path: str | Path) -> Path:
        """Write the blob and a readable ``.json`` sidecar next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        sidecar = {k: v for k, v in self.meta().items() if k != "loss_history"}
        sidecar["steps"] = len(self.loss_history)
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def extract_all(manifest: DatasetManifest, encoders: Encoders, workers: int = 1) -> list[RawFeatures]:
    """Frozen-encoder features for every record, in manifest order."""
    def one(rec):
        return extract_raw(rec, encoders.face, encoders.av, manifest.resolve)
    if workers <= 1:
        return [one(r) for r in manifest.records]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, manifest.records))


def train(manifest: DatasetManifest, cfg: TrainConfig, encoders: Encoders | None = None,
          features: Sequence[RawFeatures] | None = None) -> Checkpoint:
    """Fit the trainable blocks on the real clips of the train split.

    Raises ValidationError if the train split holds any fake clip, before any
    work is done, and NonFinite if a step produces a non-finite loss.
    ``features`` may carry precomputed frozen-encoder outputs for the train
    split, in order.
    """
    manifest.check_real_only_training()
    encoders = encoders or Encoders.from_config(cfg)
    train_set = manifest.split("train")
    if len(train_set) == 0:
        raise ValidationError("train split is empty")
    feats = list(features) if features is not None else extract_all(train_set, encoders, cfg.workers)
    params = DetectorParams.init(cfg, encoders)
    opt = Adam(params.arrays(), cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 808])
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(feats))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [feats[i] for i in order[lo:lo + cfg.batch_size]]
            losses, grads = total_loss_and_grads(batch, params, cfg, encoders.text)
            if not all(np.isfinite(losses)):
                raise NonFinite(f"epoch {epoch} step {len(history)}: loss components {losses}")
            history.append([float(x) for x in losses])
            opt.step(grads)
        log.info("epoch %d: L=%.5f L_av=%.5f L_ft=%.5f", epoch, *history[-1])
    return Checkpoint.from_params(params, cfg, epoch=cfg.epochs, loss_history=history)

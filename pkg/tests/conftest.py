import numpy as np
import pytest
from PIL import Image
from scipy.io import wavfile

from avfd.data import AudioRef, DatasetManifest, SampleRecord, save_manifest
from avfd.synth import synthesize
from avfd.training import DetectorParams, Encoders, TrainConfig


def write_clip(root, cid, frames=4, label="real", split="train", scenario="talking", seed=0,
               sample_rate=16000, seconds=0.16, mask=False):
    """Random PNG frames/mouths and a noise wav under root/cid; returns the record."""
    rng = np.random.default_rng(seed)
    d = root / cid
    d.mkdir(parents=True, exist_ok=True)
    frame_refs, mouth_refs = [], []
    for t in range(frames):
        Image.fromarray(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)).save(d / f"f{t}.png")
        Image.fromarray(rng.integers(0, 256, (32, 32), dtype=np.uint8)).save(d / f"m{t}.png")
        frame_refs.append(f"{cid}/f{t}.png")
        mouth_refs.append(f"{cid}/m{t}.png")
    wave = (rng.standard_normal(int(sample_rate * seconds)) * 3000).astype(np.int16)
    wavfile.write(d / "a.wav", sample_rate, wave)
    mask_ref = None
    if mask:
        Image.fromarray(np.full((32, 32), 255, np.uint8)).save(d / "mask.png")
        mask_ref = f"{cid}/mask.png"
    return SampleRecord(cid, tuple(frame_refs), tuple(mouth_refs), AudioRef(f"{cid}/a.wav", sample_rate),
                        label, scenario, split, mask_ref)


@pytest.fixture
def clip_factory(tmp_path):
    def make(records, name="toy"):
        recs = [write_clip(tmp_path, **r) for r in records]
        manifest = DatasetManifest(tuple(recs), name, "1", {}, tmp_path)
        save_manifest(manifest, tmp_path / "manifest.avfd")
        return tmp_path / "manifest.avfd", manifest
    return make


@pytest.fixture(scope="session")
def toy_setup():
    cfg = TrainConfig(epochs=5)
    enc = Encoders.toy(cfg.encoder_seed, cfg.d)
    emb = DetectorParams.init(cfg, enc).polarity(enc.text, cfg.tau)
    return cfg, enc, emb


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory, toy_setup):
    """12 train/test clips plus a held-out 8-clip test mix."""
    cfg, enc, emb = toy_setup
    root = tmp_path_factory.mktemp("synth")
    train_m = synthesize(root / "train", 12, 3, enc, emb)
    test_m = synthesize(root / "test", 8, 4, enc, emb, test_only=True)
    return train_m, test_m

"""Score overlap and kernel two-sample distances between real and fake clips.

    python3 demos/diagnostics.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from avfd import DetectorParams, Encoders, TrainConfig, diagnose, evaluate, mmd2, train
from avfd.synth import synthesize

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="avfd-diag-"))
cfg = TrainConfig(epochs=10)
enc = Encoders.from_config(cfg)
emb = DetectorParams.init(cfg, enc).polarity(enc.text, cfg.tau)
ckpt = train(synthesize(work / "train", 40, 1, enc, emb), cfg, enc)
reports = evaluate(synthesize(work / "heldout", 30, 2, enc, emb, test_only=True), ckpt, enc).reports

real = [r for r in reports if r.label == "real"]
fake = [r for r in reports if r.label == "fake"]
fused = {"real": np.stack([r.fused_features() for r in real]),
         "fake": np.stack([r.fused_features() for r in fake])}
rep = diagnose([r.video_score for r in real], [r.video_score for r in fake], fused)
print(f"histogram overlap of video scores: {rep.overlap:.3f}  (0 = fully separated)")
print(f"MMD^2 real|fake on fused features: {rep.mmd2['real|fake']:.4f}")

# a null comparison: two halves of the real set should be close to zero
half = len(real) // 2
print(f"MMD^2 real|real split:             {mmd2(fused['real'][:half], fused['real'][half:]):.4f}")

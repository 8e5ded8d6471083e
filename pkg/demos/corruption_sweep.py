"""How ranking quality holds up when test frames are degraded.

    python3 demos/corruption_sweep.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

from avfd import DetectorParams, Encoders, TrainConfig, corrupt_dataset, evaluate, parse_spec, train
from avfd.synth import synthesize

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="avfd-sweep-"))
cfg = TrainConfig(epochs=10)
enc = Encoders.from_config(cfg)
emb = DetectorParams.init(cfg, enc).polarity(enc.text, cfg.tau)
ckpt = train(synthesize(work / "train", 40, 1, enc, emb), cfg, enc)
clean = synthesize(work / "heldout", 20, 2, enc, emb, test_only=True)

print(f"{'corruption':<28} AUC")
print(f"{'none':<28} {evaluate(clean, ckpt, enc).metrics['overall']['auc']:.3f}")
for text in ["blur", "resize", "compress", "noise:sigma=25,seed=7", "pixelation", "invert"]:
    spec = parse_spec(text)
    shifted = corrupt_dataset(clean, spec, work / "corrupt" / spec.kind)
    print(f"{text:<28} {evaluate(shifted, ckpt, enc).metrics['overall']['auc']:.3f}")
# invert flips the planted face polarity, so its AUC collapses by construction

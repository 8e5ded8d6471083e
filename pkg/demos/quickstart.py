"""Train on real clips only, then score a held-out mix of real and fake clips.

    python3 demos/quickstart.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

from avfd import DetectorParams, Encoders, TrainConfig, evaluate, train
from avfd.synth import synthesize

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="avfd-demo-"))

cfg = TrainConfig(epochs=10)
encoders = Encoders.from_config(cfg)
# faces are planted against the untrained polarity embeddings of the same seed
emb = DetectorParams.init(cfg, encoders).polarity(encoders.text, cfg.tau)

train_set = synthesize(work / "train", 40, seed=1, encoders=encoders, emb=emb)
heldout = synthesize(work / "heldout", 20, seed=2, encoders=encoders, emb=emb, test_only=True)
print(f"{len(train_set.split('train'))} real training clips, {len(heldout)} held-out clips in {work}")

ckpt = train(train_set, cfg, encoders)
steps = ckpt.loss_history
print(f"{len(steps)} steps, total loss {steps[0][0]:.3f} -> {steps[-1][0]:.3f}")

result = evaluate(heldout, ckpt, encoders)
overall = result.metrics["overall"]
print(f"held-out AUC {overall['auc']:.3f}  AP {overall['ap']:.3f}")
for r in result.reports[:4]:
    w = ", ".join(f"{x:.3f}" for x in r.weights)
    print(f"  {r.sample_id:<22} {r.label:<4} score {r.video_score:7.3f}  weights ({w})")

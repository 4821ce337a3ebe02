"""Does telling the queries where the box is help?

Builds a desk-scale base once, then trains the ``img_region`` adapters twice
from the same seed: with position-assisted feature extraction and without.
Without it the queries never see the box, so the captioner can only guess
which of the 2-4 objects is meant. Takes about 15 minutes on a laptop CPU.

    python demos/pafe_ablation.py /tmp/ablation
"""
import json
import sys
from pathlib import Path

from regionblip import data
from regionblip.checkpoint import save_checkpoint
from regionblip.model import ModelConfig, RegionBLIP
from regionblip.pipeline import evaluate, pretrain_base, pretrain_lm
from regionblip.trainer import ModalitySource, TrainConfig, Trainer, extend_incremental

work = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/ablation")
root = work / "data"
data.generate_all(root, n_train=400, n_test=50, modalities=["img_text", "img_region"])
data.generate_split(root, "img_region", "train", 1500)

model = RegionBLIP(ModelConfig())
pretrain_lm(model, TrainConfig(peak_lr=2e-3, min_lr=1e-4, warmup_steps=100, total_steps=1500, batch_size=32))
pretrain_base(model, ModalitySource.from_split(model, root, "img_text", "train"),
              TrainConfig(peak_lr=1e-3, min_lr=1e-4, warmup_steps=100, total_steps=1000,
                          modality_order=("img_text",)))
save_checkpoint(model, work / "base.ckpt")

cfg = TrainConfig(peak_lr=3e-3, min_lr=3e-4, warmup_steps=200, total_steps=2000, modality_order=("img_region",))
results = {}
for pafe in (True, False):
    m = extend_incremental(work / "base.ckpt", "img_region", use_pafe=pafe)
    Trainer(m, cfg).fit({"img_region": ModalitySource.from_split(m, root, "img_region", "train")})
    test = ModalitySource.from_split(m, root, "img_region", "test")
    report, captions = evaluate(m, test, "img_region")
    results["pafe" if pafe else "no_pafe"] = report
    print("with PaFE" if pafe else "without PaFE")
    for sid, cap in list(zip(test.ids, captions))[:4]:
        print(f"  {test.samples[sid].caption!r:>24} -> {cap!r}")

print(json.dumps(results, indent=2))

"""End-to-end miniature: meta-train briefly, fine-tune on 5 shots, evaluate.

This is a scaled-down taste of the full protocol (the real schedules live in
the config defaults); expect modest AP from the short run.  Takes a few
minutes on a laptop CPU.

Run:  python demos/05_train_and_evaluate.py
"""

import numpy as np

from fewdet.detector import DetectorConfig, FewShotDetector
from fewdet.episodes import build_shot_pool, make_split
from fewdet.train import evaluate_model, fine_tune, meta_train

split = make_split(0)
model = FewShotDetector(DetectorConfig(), seed=0, dtype=np.float32)

print("meta-training on the 8 base classes (shortened to 600 steps)...")
losses = meta_train(model, split, seed=0, schedule=((600, 0.005),), progress=150)
print(f"loss: first-100 avg {np.mean(losses[:100]):.3f} -> last-100 avg {np.mean(losses[-100:]):.3f}")

print("\nfine-tuning on a balanced 5-shot pool (base + novel, 120 steps)...")
budget = build_shot_pool(1234, split, k=5, run_index=0)
fine_tune(model, split, budget, seed=1, schedule=((120, 0.005),))

print("\nevaluating on 60 fresh test images...")
metrics = evaluate_model(model, split, budget, dataset_seed=1234, n_images=60)
print(f"base-class mean AP50 : {metrics.mean_base_ap50:.3f}")
print(f"novel-class mean AP50: {metrics.mean_novel_ap50:.3f}")
print("per-class AP50:", {c: None if v is None else round(v, 2) for c, v in metrics.ap_per_class.items()})
print("\n(the full protocol meta-trains 6000 steps and averages multiple runs;")
print(" see `fewdet meta-train`, `fewdet eval` and `fewdet ablate`)")

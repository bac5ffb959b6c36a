"""Five labelled target images: adapted training vs. a source-only baseline.

Run: python demos/05_few_shot_adaptation.py [epochs] [seed]
A few minutes per run on one CPU core with the defaults.
"""
import sys
import time

from treeadapt import data as D
from treeadapt.evaluation import evaluate
from treeadapt.trainer import TrainConfig, Trainer, sample_few_shot

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

source = D.generate_synthetic(D.SOURCE_PROFILE, 200, 64, seed=1000 + seed)
target = D.generate_synthetic(D.TARGET_PROFILE, 100, 64, seed=2000 + seed)
few, test = sample_few_shot(target[:50], 5, seed), target[50:]
print(f"source: 200 labelled images; target: {len(few)} labelled, {len(test)} held out")

for mode in ("source_only", "adapt"):
    t0 = time.time()
    tr = Trainer(TrainConfig(profile="toy", mode=mode, epochs=epochs, lr=1e-3,
                             lr_schedule="cosine", seed=seed))
    tr.fit(source, few)
    r = evaluate(tr.model, test)
    print(f"{mode:12s} target MAE {r.mae:6.2f}  RMSE {r.rmse:6.2f}  F1 {r.f1:.2f}  ({time.time() - t0:.0f}s)")

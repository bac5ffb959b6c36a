"""From density maps to counts, peaks, matches and the six reported metrics.

Run: python demos/04_matching_metrics.py
"""
import numpy as np

from treeadapt import data as D
from treeadapt.evaluation import EvalConfig, evaluate_predictions, extract_peaks, match_points

gt = [(12, 12), (40, 15), (30, 45)]
pred_map = D.points_to_density([(14, 12), (40, 18), (55, 55)], 64, 64)
peaks = extract_peaks(pred_map)
print("detected peaks:", peaks.tolist())
m = match_points(peaks, gt, radius=15)
print(f"tp {m.tp}, fp {m.fp}, fn {m.fn}; pairs {[(p, g, round(d, 2)) for p, g, d in m.pairs]}")

sample = D.make_sample(np.zeros((64, 64, 3)), gt)
report = evaluate_predictions([pred_map], [sample], EvalConfig(match_radius=15))
print({k: report.to_dict()[k] for k in ("mae", "rmse", "r2", "precision", "recall", "f1")})
print("r2 is null here: one image has no count variance to explain")

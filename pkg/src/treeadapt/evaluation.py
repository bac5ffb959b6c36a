"""Counting and localisation metrics for predicted density maps."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

REPORT_SCHEMA = "treeadapt.metrics/1"


@dataclass
class EvalConfig:
    match_radius: float = 15.0
    peak_threshold: float = 0.25
    peak_min_distance: int = 8
    r2_variant: str = "standard"

    def __post_init__(self):
        if self.match_radius <= 0:
            raise ValueError("match_radius must be positive")
        if self.r2_variant not in ("standard", "paper"):
            raise ValueError(f"unknown r2_variant {self.r2_variant!r}")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list = field(default_factory=list)  # (pred index, gt index, distance)


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    r2: float
    precision: float
    recall: float
    f1: float
    n_images: int
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rmse < self.mae - 1e-9 * max(1.0, self.mae):
            raise AssertionError(f"rmse {self.rmse} < mae {self.mae}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = REPORT_SCHEMA
        if isinstance(d["r2"], float) and math.isnan(d["r2"]):
            d["r2"] = None
        return d

    def save(self, path) -> Path:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        return Path(path)

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path) as fh:
            d = json.load(fh)
        if d.pop("schema", None) != REPORT_SCHEMA:
            raise ValueError(f"{path}: unexpected report schema")
        if d["r2"] is None:
            d["r2"] = math.nan
        return cls(**d)


def extract_peaks(density, cfg: EvalConfig | None = None) -> np.ndarray:
    """Local maxima above ``peak_threshold * max``, thinned so no two lie within ``peak_min_distance``.

    Returns an N x 2 array of (x, y) pixel coordinates, strongest first.
    """
    cfg = cfg or EvalConfig()
    d = np.asarray(density, dtype=np.float64)
    top = d.max() if d.size else 0.0
    if top <= 0:
        return np.zeros((0, 2))
    size = 2 * cfg.peak_min_distance + 1
    is_max = (d == ndimage.maximum_filter(d, size=size, mode="constant", cval=-np.inf))
    cand = np.argwhere(is_max & (d >= cfg.peak_threshold * top) & (d > 0))
    order = np.argsort(-d[cand[:, 0], cand[:, 1]], kind="stable")
    kept = []
    r2 = cfg.peak_min_distance**2
    for y, x in cand[order]:
        if all((x - kx) ** 2 + (y - ky) ** 2 > r2 for kx, ky in kept):
            kept.append((x, y))
    return np.array(kept, dtype=np.float64).reshape(-1, 2)


def match_points(pred, gt, radius: float = 15.0) -> MatchResult:
    """One-to-one greedy matching, closest pairs first, within ``radius``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(pred) and len(gt):
        dist = np.sqrt(((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
        pi, gi = np.nonzero(dist <= radius)
        order = np.lexsort((gi, pi, dist[pi, gi]))
    else:
        pi = gi = order = np.zeros(0, dtype=int)
    used_p, used_g, pairs = set(), set(), []
    for o in order:
        p, g = int(pi[o]), int(gi[o])
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((p, g, float(dist[p, g])))
    tp = len(pairs)
    return MatchResult(tp, len(pred) - tp, len(gt) - tp, pairs)


def count_metrics(pairs, cfg: EvalConfig | None = None):
    """(mae, rmse, r2) from (estimated, ground-truth) count pairs; r2 is NaN when undefined."""
    cfg = cfg or EvalConfig()
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if len(arr) == 0:
        raise ValueError("need at least one image")
    est, gt = arr[:, 0], arr[:, 1]
    err = est - gt
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    ref = est if cfg.r2_variant == "paper" else gt
    denom = float(np.sum((ref - gt.mean()) ** 2))
    r2 = math.nan if len(arr) < 2 or denom == 0 else 1.0 - float(np.sum(err**2)) / denom
    return mae, rmse, r2


def localization_metrics(m: MatchResult):
    p = m.tp / (m.tp + m.fp) if m.tp + m.fp else 0.0
    r = m.tp / (m.tp + m.fn) if m.tp + m.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def evaluate_predictions(densities, samples, cfg: EvalConfig | None = None, meta=None) -> MetricsReport:
    """Score predicted density maps against the samples' point annotations."""
    cfg = cfg or EvalConfig()
    if len(densities) != len(samples) or not samples:
        raise ValueError("need one predicted map per sample, and at least one sample")
    rows, counts = [], []
    tp = fp = fn = 0
    for dens, s in zip(densities, samples):
        dens = np.asarray(dens)
        if dens.shape != s.shape:
            raise ValueError(f"{s.name}: predicted map {dens.shape} vs image {s.shape}")
        est = float(np.sum(dens, dtype=np.float64))
        m = match_points(extract_peaks(dens, cfg), s.points, cfg.match_radius)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        counts.append((est, s.count))
        rows.append({"image": s.name, "gt_count": s.count, "pred_count": est, "tp": m.tp, "fp": m.fp, "fn": m.fn})
    mae, rmse, r2 = count_metrics(counts, cfg)
    p, r, f1 = localization_metrics(MatchResult(tp, fp, fn))
    info = {"eval_config": asdict(cfg), "localization_pooling": "micro",
            "r2_note": "standard: deviations of ground truth from its mean; "
                       "paper: deviations of estimates from the ground-truth mean"}
    info.update(meta or {})
    return MetricsReport(mae, rmse, r2, p, r, f1, len(samples), rows, info)


@torch.no_grad()
def predict_density(model, image: np.ndarray) -> np.ndarray:
    """Target-subnet density for one H x W x 3 image, tiled in model-sized windows."""
    model.eval()
    size = model.cfg.img_size
    dtype = next(model.parameters()).dtype
    h, w = image.shape[:2]
    ph, pw = -(-h // size) * size, -(-w // size) * size
    canvas = np.zeros((ph, pw, 3), dtype=np.float32)
    canvas[:h, :w] = image
    tiles, where = [], []
    for y in range(0, ph, size):
        for x in range(0, pw, size):
            tiles.append(canvas[y:y + size, x:x + size])
            where.append((y, x))
    batch = torch.from_numpy(np.stack(tiles)).permute(0, 3, 1, 2).to(dtype)
    out = model.predict(batch)[:, 0].double().numpy()
    full = np.zeros((ph, pw))
    for (y, x), d in zip(where, out):
        full[y:y + size, x:x + size] = d
    return full[:h, :w]


def evaluate(checkpoint, dataset, cfg: EvalConfig | None = None, report_path=None) -> MetricsReport:
    """Run the target subnet over ``dataset``; ``checkpoint`` is a path or a model."""
    from .trainer import load_model

    model = load_model(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    dens = [predict_density(model, s.image) for s in dataset]
    meta = {"checkpoint": str(checkpoint) if isinstance(checkpoint, (str, Path)) else None}
    report = evaluate_predictions(dens, dataset, cfg, meta)
    if report_path:
        report.save(report_path)
    return report

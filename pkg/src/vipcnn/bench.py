"""Triplet NMS benchmark: survivor counts across thresholds and the cost of
placing NMS before vs. after the detector."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import triplet_nms_arrays
from .model import ViPModel, preprocess
from .pipeline import records_from_arrays
from .proposal import ProposalSet, clustered_proposals, pair_into_triplets


@dataclass
class BenchConfig:
    n_proposals: int = 250
    n_clusters: int = 10
    threshold: float = 0.25
    sweep: tuple[float, ...] = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0)
    image_size: int = 64
    repeats: int = 1
    seed: int = 0


@dataclass
class BenchReport:
    n_triplets: int
    n_survivors: int
    reduction: float
    pre_seconds: float
    post_seconds: float
    speedup: float
    series: list[tuple[float, int]] = field(default_factory=list)  # (threshold, survivors)

    def as_dict(self) -> dict:
        return {"n_triplets": self.n_triplets, "n_survivors": self.n_survivors, "reduction": self.reduction,
                "pre_seconds": self.pre_seconds, "post_seconds": self.post_seconds, "speedup": self.speedup}


def _scene_image(size: int, props: ProposalSet, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    img = rng.integers(90, 140, size=(size, size, 3)).astype(np.uint8)
    for b in props.boxes[:: max(1, len(props) // 10)]:
        x1, y1, x2, y2 = (int(v) for v in b)
        img[y1:y2, x1:x2] = rng.integers(0, 256, size=3)
    return img


def detect_pre(model: ViPModel, image, triplets, threshold: float):
    keep = triplet_nms_arrays(triplets.subjects, triplets.objects, triplets.scores, threshold)
    kept = triplets.take(keep)
    tensor, scale = preprocess(image, model.cfg.image_size)
    res = model.predict_arrays(tensor, kept, scale)
    return records_from_arrays("bench", kept, res, image.shape[1::-1])[0]


def detect_post(model: ViPModel, image, triplets, threshold: float):
    tensor, scale = preprocess(image, model.cfg.image_size)
    res = model.predict_arrays(tensor, triplets, scale)
    recs, scores = records_from_arrays("bench", triplets, res, image.shape[1::-1])
    keep = triplet_nms_arrays(triplets.subjects, triplets.objects, scores, threshold)
    return [recs[i] for i in keep]


def survivor_series(triplets, thresholds) -> list[tuple[float, int]]:
    return [(float(t), len(triplet_nms_arrays(triplets.subjects, triplets.objects, triplets.scores, t)))
            for t in thresholds]


def run_benchmark(model: ViPModel, cfg: BenchConfig) -> BenchReport:
    size = float(cfg.image_size)
    props = clustered_proposals(cfg.n_proposals, cfg.n_clusters, (size, size), seed=cfg.seed)
    triplets = pair_into_triplets(props, include_self_pairs=True)
    image = _scene_image(cfg.image_size, props, cfg.seed)
    n_keep = len(triplet_nms_arrays(triplets.subjects, triplets.objects, triplets.scores, cfg.threshold))
    timings = {}
    for name, fn in (("pre", detect_pre), ("post", detect_post)):
        best = np.inf
        for _ in range(cfg.repeats):
            t0 = time.perf_counter()
            fn(model, image, triplets, cfg.threshold)
            best = min(best, time.perf_counter() - t0)
        timings[name] = best
    return BenchReport(len(triplets), n_keep, len(triplets) / max(n_keep, 1), timings["pre"], timings["post"],
                       timings["post"] / timings["pre"], survivor_series(triplets, cfg.sweep))

"""End-to-end detection over scenes: proposals, pairing, triplet filtering,
the three-branch model, top-1 phrase labels and box refinement."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import GroundTruth, Scene, Vocabulary
from .errors import ConfigError
from .evaluation import DetectionRecord, recall_at_n
from .geometry import TripletArrays, decode_array, triplet_nms_arrays
from .model import ViPModel, best_phrase_arrays, preprocess
from .proposal import ProposalConfig, filter_triplets, pair_into_triplets, propose_boxes

NMS_MODES = ("pre", "post", "off", "random-k")


def eval_proposals() -> ProposalConfig:
    return ProposalConfig(top_n=40, copies_per_box=4, center_std=0.08, scale_std=0.08, n_random=8)


@dataclass
class EvalConfig:
    ns: tuple[int, ...] = (50, 100)
    iou_thr: float = 0.5
    nms: str = "pre"
    random_k: int = 2000
    seed: int = 1234
    proposals: ProposalConfig = field(default_factory=eval_proposals)

    def __post_init__(self):
        self.ns = tuple(self.ns)
        if self.nms not in NMS_MODES:
            raise ConfigError(f"nms must be one of {NMS_MODES}, got {self.nms!r}")
        if self.random_k < 1:
            raise ConfigError("random_k must be >= 1")


@dataclass
class DetectionRun:
    detections: dict[str, list[DetectionRecord]]
    gts: dict[str, GroundTruth]
    n_triplets: dict[str, int]  # triplets scored by the model, per image
    seconds: float


def records_from_arrays(image_id: str, triplets: TripletArrays, res: dict[str, np.ndarray],
                        image_size: tuple[float, float]) -> tuple[list[DetectionRecord], np.ndarray]:
    """Top-1 labels and class-specific refined boxes for each scored triplet."""
    n = len(triplets)
    if n == 0:
        return [], np.zeros(0)
    s, p, o, logscore = best_phrase_arrays(res["subject_probs"], res["predicate_probs"], res["object_probs"])
    r = np.arange(n)
    sb, _ = decode_array(triplets.subjects, res["subject_offsets"][r, s - 1], image_size)
    pb, _ = decode_array(triplets.predicates, res["predicate_offsets"][r, p - 1], image_size)
    ob, _ = decode_array(triplets.objects, res["object_offsets"][r, o - 1], image_size)
    scores = np.exp(logscore)
    recs = [DetectionRecord(image_id, int(s[i]), int(p[i]), int(o[i]), pb[i], sb[i], ob[i], float(scores[i]))
            for i in range(n)]
    return recs, scores


def detect_scene(model: ViPModel, image: np.ndarray, image_id: str, triplets: TripletArrays,
                 cfg: EvalConfig, rng: np.random.Generator) -> tuple[list[DetectionRecord], int]:
    h, w = image.shape[:2]
    tensor, scale = preprocess(image, model.cfg.image_size)
    if cfg.nms == "pre":
        triplets = filter_triplets(triplets, cfg.proposals)
    elif cfg.nms == "random-k" and len(triplets) > cfg.random_k:
        triplets = triplets.take(np.sort(rng.choice(len(triplets), cfg.random_k, replace=False)))
    res = model.predict_arrays(tensor, triplets, scale)
    recs, scores = records_from_arrays(image_id, triplets, res, (w, h))
    if cfg.nms == "post" and recs:
        keep = triplet_nms_arrays(triplets.subjects, triplets.objects, scores, cfg.proposals.nms_threshold)
        recs = [recs[i] for i in keep]
    top = max(cfg.ns)
    order = sorted(range(len(recs)), key=lambda i: (-recs[i].score, i))[:top]
    return [recs[i] for i in order], len(triplets)


def run_detection(model: ViPModel, scenes: Sequence[Scene], vocab: Vocabulary, cfg: EvalConfig,
                  proposals: dict | None = None) -> DetectionRun:
    """Detect relationships in every scene.  ``proposals`` may supply a
    precomputed :class:`ProposalSet` per image id."""
    rng = np.random.default_rng(cfg.seed)
    dets, gts, counts = {}, {}, {}
    t0 = time.perf_counter()
    for k, sc in enumerate(scenes):
        gt = GroundTruth.from_annotations(sc.relationships, vocab)
        gts[sc.image_id] = gt
        h, w = sc.image.shape[:2]
        if proposals is not None and sc.image_id in proposals:
            props = proposals[sc.image_id]
        elif len(gt) == 0 and cfg.proposals.source == "oracle-jitter":
            dets[sc.image_id], counts[sc.image_id] = [], 0
            continue
        else:
            props = propose_boxes((w, h), cfg.proposals, gt.object_boxes(), seed=[cfg.seed, k], image=sc.image)
        trips = pair_into_triplets(props, cfg.proposals.include_self_pairs)
        dets[sc.image_id], counts[sc.image_id] = detect_scene(model, sc.image, sc.image_id, trips, cfg, rng)
    return DetectionRun(dets, gts, counts, time.perf_counter() - t0)


def score_run(run: DetectionRun, cfg: EvalConfig) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    for mode, tag in (("phrase", "phrase"), ("relationship", "rel")):
        res = recall_at_n(run.detections, run.gts, cfg.ns, mode, cfg.iou_thr)
        for n in cfg.ns:
            out[f"{tag}_rec{n}"] = res.rec_at[n]
    return out


def evaluate(model: ViPModel, scenes: Sequence[Scene], vocab: Vocabulary,
             cfg: EvalConfig | None = None) -> dict[str, float | None]:
    """Phrase and relationship Rec@N over ``scenes``."""
    cfg = cfg or EvalConfig()
    return score_run(run_detection(model, scenes, vocab, cfg), cfg)

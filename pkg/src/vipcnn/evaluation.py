"""Recall@N for phrase and relationship detection, and per-class AP.

Matching is greedy in score order: each detection claims the unmatched
ground truth with the same labels that it overlaps best (at least
``iou_thr``); every ground truth is claimed at most once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import GroundTruth
from .errors import InvalidInput
from .geometry import iou_matrix


@dataclass
class DetectionRecord:
    image_id: str
    subject: int
    predicate: int
    object: int
    phrase_box: np.ndarray
    subject_box: np.ndarray
    object_box: np.ndarray
    score: float

    @property
    def labels(self) -> tuple[int, int, int]:
        return (self.subject, self.predicate, self.object)


@dataclass
class EvalResult:
    rec_at: dict[int, float | None]
    matches: dict[str, dict[int, list[bool]]] = field(default_factory=dict)
    n_gt: int = 0
    n_det: int = 0


def sort_detections(dets: Sequence[DetectionRecord]) -> list[DetectionRecord]:
    """Descending score; equal scores keep their original order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in order]


def _overlaps(dets: Sequence[DetectionRecord], gt: GroundTruth, mode: str) -> np.ndarray:
    if not dets or not len(gt):
        return np.zeros((len(dets), len(gt)))
    if mode == "phrase":
        return iou_matrix(np.array([d.phrase_box for d in dets]), gt.unions)
    if mode == "relationship":
        s = iou_matrix(np.array([d.subject_box for d in dets]), gt.subjects)
        o = iou_matrix(np.array([d.object_box for d in dets]), gt.objects)
        return np.minimum(s, o)
    raise InvalidInput(f"unknown matching mode {mode!r}")


def _greedy(dets: Sequence[DetectionRecord], gt: GroundTruth, iou_thr: float, mode: str) -> list[bool]:
    ov = _overlaps(dets, gt, mode)
    taken = np.zeros(len(gt), dtype=bool)
    flags = []
    for i, d in enumerate(dets):
        ok = ~taken & np.all(gt.labels == np.array(d.labels), axis=1) & (ov[i] >= iou_thr)
        if ok.any():
            cand = np.flatnonzero(ok)
            j = cand[np.argmax(ov[i, cand])]  # first index among equal overlaps
            taken[j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def match_phrase(dets: Sequence[DetectionRecord], gt: GroundTruth, iou_thr: float = 0.5) -> list[bool]:
    """Flags for ``dets`` (already score sorted) against the union boxes of ``gt``."""
    return _greedy(dets, gt, iou_thr, "phrase")


def match_relationship(dets: Sequence[DetectionRecord], gt: GroundTruth, iou_thr: float = 0.5) -> list[bool]:
    """Like :func:`match_phrase` but both subject and object boxes must overlap."""
    return _greedy(dets, gt, iou_thr, "relationship")


def recall_at_n(detections: Mapping[str, Sequence[DetectionRecord]], gts: Mapping[str, GroundTruth],
                ns: Sequence[int] = (50, 100), mode: str = "phrase", iou_thr: float = 0.5) -> EvalResult:
    """Dataset recall after truncating each image to its top ``n`` detections.

    Recall is ``None`` when the dataset has no ground truth.
    """
    if mode not in ("phrase", "relationship"):
        raise InvalidInput(f"unknown matching mode {mode!r}")
    n_gt = sum(len(g) for g in gts.values())
    result = EvalResult({}, {}, n_gt, sum(len(d) for d in detections.values()))
    matcher = match_phrase if mode == "phrase" else match_relationship
    for n in ns:
        hits = 0
        per_image = {}
        for image_id, gt in gts.items():
            dets = sort_detections(detections.get(image_id, []))[:n]
            flags = matcher(dets, gt, iou_thr)
            per_image[image_id] = flags
            hits += sum(flags)
        result.rec_at[n] = hits / n_gt if n_gt else None
        result.matches[n] = per_image
    return result


def average_precision(dets: Sequence[tuple[str, np.ndarray, float]], gt_boxes: Mapping[str, np.ndarray],
                      iou_thr: float = 0.5) -> float | None:
    """All-points interpolated AP for one class.

    ``dets`` are ``(image_id, box, score)``; ``gt_boxes`` maps image id to an
    ``(n, 4)`` array of that class's boxes.  ``None`` when there is no gt.
    """
    n_gt = sum(len(np.asarray(b).reshape(-1, 4)) for b in gt_boxes.values())
    if n_gt == 0:
        return None
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    taken = {k: np.zeros(len(np.asarray(v).reshape(-1, 4)), dtype=bool) for k, v in gt_boxes.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        image_id, box, _ = dets[i]
        gts = np.asarray(gt_boxes.get(image_id, np.zeros((0, 4)))).reshape(-1, 4)
        if len(gts) == 0:
            continue
        ov = iou_matrix(np.asarray(box, dtype=np.float64).reshape(1, 4), gts)[0]
        ov[taken[image_id]] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= iou_thr:
            taken[image_id][j] = True
            tp[rank] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1) if len(order) else np.zeros(0)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


# ----------------------------------------------------------------- file I/O

def _fmt(box) -> str:
    return ",".join(repr(float(v)) for v in box)


def write_detections(path, detections: Mapping[str, Sequence[DetectionRecord]]) -> None:
    """One line per detection: id, s, p, o, phrase box, subject box, object box, score."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in sorted(detections):
            for d in detections[image_id]:
                fh.write("\t".join([d.image_id, str(d.subject), str(d.predicate), str(d.object),
                                    _fmt(d.phrase_box), _fmt(d.subject_box), _fmt(d.object_box),
                                    repr(float(d.score))]) + "\n")


def read_detections(path) -> dict[str, list[DetectionRecord]]:
    out: dict[str, list[DetectionRecord]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 8:
                raise InvalidInput(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            boxes = [np.array([float(v) for v in p.split(",")]) for p in parts[4:7]]
            rec = DetectionRecord(parts[0], int(parts[1]), int(parts[2]), int(parts[3]), *boxes, float(parts[7]))
            out.setdefault(rec.image_id, []).append(rec)
    return out


def write_results(path, results: Mapping[str, float | None]) -> None:
    """``metric<TAB>value`` lines; absent values are written as ``nan``."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in results.items():
            fh.write(f"{k}\t{'nan' if v is None else repr(float(v))}\n")


def read_results(path) -> dict[str, float | None]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                k, v = line.rstrip("\n").split("\t")
                val = float(v)
                out[k] = None if np.isnan(val) else val
    return out

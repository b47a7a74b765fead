"""Box algebra, offset coding and greedy suppression for boxes and triplets.

Coordinates are continuous: a box ``(x1, y1, x2, y2)`` has area
``(x2 - x1) * (y2 - y1)`` with no +1 pixel convention.  Scalar helpers work
on :class:`Box` values; the ``*_array`` variants work on ``[n, 4]`` arrays and
are what the pipeline uses internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInput

# exp() of a log-size shift is capped here; ln(1000 / 16) as in the usual R-CNN coder
MAX_LOG_SCALE = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInput(f"non-finite box coordinates {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidInput(f"degenerate box {vals}: need x2 > x1 and y2 > y1")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def contains(self, other: "Box") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)

    @classmethod
    def from_array(cls, arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class BoxOffsets:
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "BoxOffsets":
        tx, ty, tw, th = (float(v) for v in arr)
        return cls(tx, ty, tw, th)


ZERO_OFFSETS = BoxOffsets(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Triplet:
    """Subject/object ROI pair; the predicate ROI is always their union."""

    subject: Box
    object: Box
    subject_score: float = 1.0
    object_score: float = 1.0
    predicate: Box = field(init=False)

    def __post_init__(self):
        for s in (self.subject_score, self.object_score):
            if not 0.0 <= s <= 1.0:
                raise InvalidInput(f"objectness {s} outside [0, 1]")
        object.__setattr__(self, "predicate", union_box(self.subject, self.object))

    @property
    def score(self) -> float:
        return triplet_score(self)


class Decoded(NamedTuple):
    box: Box
    clamped: bool


# ---------------------------------------------------------------- scalar ops

def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def union_box(a: Box, b: Box) -> Box:
    return Box(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def encode_offsets(anchor: Box, target: Box) -> BoxOffsets:
    return BoxOffsets.from_array(encode_array(anchor.as_array()[None], target.as_array()[None])[0])


def decode_offsets(anchor: Box, off: BoxOffsets, image_size: tuple[float, float] | None = None,
                   max_log_scale: float = MAX_LOG_SCALE) -> Decoded:
    """Apply ``off`` to ``anchor``; ``image_size`` is ``(width, height)``."""
    deltas = off.as_array()
    if not np.all(np.isfinite(deltas)):
        raise InvalidInput(f"non-finite offsets {off}")
    boxes, clamped = decode_array(anchor.as_array()[None], deltas[None], image_size, max_log_scale)
    return Decoded(Box.from_array(boxes[0]), bool(clamped[0]))


def triplet_overlap(t1: Triplet, t2: Triplet) -> float:
    return iou(t1.subject, t2.subject) * iou(t1.object, t2.object)


def triplet_score(t: Triplet) -> float:
    return t.subject_score * t.object_score


# ----------------------------------------------------------------- array ops

def as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False).reshape(-1, 4)
    else:
        arr = np.array([b.as_array() if isinstance(b, Box) else b for b in boxes],
                       dtype=np.float64).reshape(-1, 4)
    return arr


def validate_box_array(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("non-finite box coordinates")
    bad = ~((arr[:, 2] > arr[:, 0]) & (arr[:, 3] > arr[:, 1]))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise InvalidInput(f"degenerate box at index {i}: {arr[i].tolist()}")


def box_areas(arr: np.ndarray) -> np.ndarray:
    return (arr[..., 2] - arr[..., 0]) * (arr[..., 3] - arr[..., 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``[n, 4]`` and ``[m, 4]`` arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    return inter / union


def iou_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two equally shaped ``[n, 4]`` arrays (``b`` may broadcast)."""
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    return inter / (box_areas(a) + box_areas(b) - inter)


def union_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([np.minimum(a[..., :2], b[..., :2]), np.maximum(a[..., 2:], b[..., 2:])], axis=-1)


def encode_array(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise InvalidInput("degenerate anchor box")
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    if np.any(tw <= 0) or np.any(th <= 0):
        raise InvalidInput("degenerate target box")
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    tcx = targets[:, 0] + 0.5 * tw
    tcy = targets[:, 1] + 0.5 * th
    return np.stack([(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_array(anchors: np.ndarray, deltas: np.ndarray, image_size: tuple[float, float] | None = None,
                 max_log_scale: float = MAX_LOG_SCALE) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`encode_array`; returns ``(boxes, clamped_mask)``."""
    deltas = np.asarray(deltas, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    dwh = deltas[:, 2:4]
    clamped = np.any(dwh > max_log_scale, axis=1)
    dwh = np.minimum(dwh, max_log_scale)
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(dwh[:, 0])
    h = ah * np.exp(dwh[:, 1])
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if image_size is not None:
        out = clip_array(out, image_size)
    return out, clamped


def clip_array(boxes: np.ndarray, image_size: tuple[float, float], min_size: float = 1e-3) -> np.ndarray:
    """Clip to ``[0, width] x [0, height]`` keeping at least ``min_size`` extent."""
    w, h = image_size
    out = boxes.copy()
    out[:, 0] = np.clip(out[:, 0], 0, w - min_size)
    out[:, 1] = np.clip(out[:, 1], 0, h - min_size)
    out[:, 2] = np.clip(out[:, 2], out[:, 0] + min_size, w)
    out[:, 3] = np.clip(out[:, 3], out[:, 1] + min_size, h)
    return out


# ----------------------------------------------------------------------- NMS

def _descending_order(scores: np.ndarray) -> np.ndarray:
    # stable sort on -score keeps lower original index first among ties
    return np.argsort(-scores, kind="stable")


def greedy_nms(boxes, scores, threshold: float) -> list[int]:
    """Greedy NMS; suppresses boxes whose IoU with a kept box is ``> threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInput(f"threshold {threshold} outside [0, 1]")
    arr = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(arr) != len(scores):
        raise InvalidInput(f"{len(arr)} boxes but {len(scores)} scores")
    if len(arr) == 0:
        return []
    validate_box_array(arr)
    order = _descending_order(scores)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        ov = iou_pairs(arr[rest], arr[i])
        order = rest[ov <= threshold]
    return keep


# above this many distinct boxes the pairwise IoU tables get too large
_TABLE_LIMIT = 2048


def triplet_nms_arrays(subjects: np.ndarray, objects: np.ndarray, scores: np.ndarray,
                       threshold: float) -> np.ndarray:
    """Triplet NMS over ``[n, 4]`` subject/object arrays; returns kept indices."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInput(f"threshold {threshold} outside [0, 1]")
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = _descending_order(np.asarray(scores, dtype=np.float64))
    s_uniq, s_idx = np.unique(subjects, axis=0, return_inverse=True)
    o_uniq, o_idx = np.unique(objects, axis=0, return_inverse=True)
    s_idx = s_idx.reshape(-1)
    o_idx = o_idx.reshape(-1)
    keep = []
    if len(s_uniq) <= _TABLE_LIMIT and len(o_uniq) <= _TABLE_LIMIT:
        s_tab = iou_matrix(s_uniq, s_uniq)
        o_tab = iou_matrix(o_uniq, o_uniq)
        si = s_idx[order]
        oi = o_idx[order]
        while order.size:
            keep.append(order[0])
            ov = s_tab[si[0], si[1:]] * o_tab[oi[0], oi[1:]]
            alive = ov <= threshold
            order, si, oi = order[1:][alive], si[1:][alive], oi[1:][alive]
    else:
        while order.size:
            i = order[0]
            keep.append(i)
            rest = order[1:]
            ov = iou_pairs(subjects[rest], subjects[i]) * iou_pairs(objects[rest], objects[i])
            order = rest[ov <= threshold]
    return np.asarray(keep, dtype=np.int64)


def triplet_nms(triplets, threshold: float) -> list[int]:
    """Greedy NMS over triplets ranked by :func:`triplet_score`.

    A triplet is dropped when its :func:`triplet_overlap` with an already kept
    triplet is strictly greater than ``threshold``.
    """
    if hasattr(triplets, "subjects"):
        subj, obj, scores = triplets.subjects, triplets.objects, triplets.scores
    else:
        triplets = list(triplets)
        if not triplets:
            if not 0.0 <= threshold <= 1.0:
                raise InvalidInput(f"threshold {threshold} outside [0, 1]")
            return []
        subj = as_box_array([t.subject for t in triplets])
        obj = as_box_array([t.object for t in triplets])
        scores = np.array([triplet_score(t) for t in triplets])
    return triplet_nms_arrays(subj, obj, scores, threshold).tolist()


@dataclass
class TripletArrays(Sequence):
    """Array-backed sequence of triplets; indexing yields :class:`Triplet`.

    ``subject_index``/``object_index`` refer back to the box list the triplets
    were paired from (``-1`` when unknown).
    """

    subjects: np.ndarray
    objects: np.ndarray
    subject_scores: np.ndarray
    object_scores: np.ndarray
    subject_index: np.ndarray | None = None
    object_index: np.ndarray | None = None

    def __post_init__(self):
        self.subjects = np.asarray(self.subjects, dtype=np.float64).reshape(-1, 4)
        self.objects = np.asarray(self.objects, dtype=np.float64).reshape(-1, 4)
        self.subject_scores = np.asarray(self.subject_scores, dtype=np.float64).reshape(-1)
        self.object_scores = np.asarray(self.object_scores, dtype=np.float64).reshape(-1)
        n = len(self.subjects)
        if self.subject_index is None:
            self.subject_index = np.full(n, -1, dtype=np.int64)
        if self.object_index is None:
            self.object_index = np.full(n, -1, dtype=np.int64)
        self.predicates = union_array(self.subjects, self.objects)

    @property
    def scores(self) -> np.ndarray:
        return self.subject_scores * self.object_scores

    def __len__(self) -> int:
        return len(self.subjects)

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray, list)):
            return self.take(np.arange(len(self))[i] if isinstance(i, slice) else np.asarray(i))
        return Triplet(Box.from_array(self.subjects[i]), Box.from_array(self.objects[i]),
                       float(self.subject_scores[i]), float(self.object_scores[i]))

    def take(self, idx) -> "TripletArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return TripletArrays(self.subjects[idx], self.objects[idx], self.subject_scores[idx],
                             self.object_scores[idx], self.subject_index[idx], self.object_index[idx])

    @classmethod
    def from_triplets(cls, triplets: Sequence[Triplet]) -> "TripletArrays":
        triplets = list(triplets)
        return cls(as_box_array([t.subject for t in triplets]), as_box_array([t.object for t in triplets]),
                   [t.subject_score for t in triplets], [t.object_score for t in triplets])

"""A hand-built three-image corpus with recall values worked out by hand.

Image A has two relationships: a duplicate detection and a phrase-only hit.
Image B has one relationship, found after a detection with the wrong predicate.
Image C has one relationship and no detections.
"""
import numpy as np

from vipcnn.data import GroundTruth
from vipcnn.evaluation import DetectionRecord


def _gt(rows):
    return GroundTruth(np.array([r[1] for r in rows], dtype=np.float64), np.array([r[2] for r in rows], dtype=np.float64),
                       np.array([r[0] for r in rows], dtype=np.int64))


def _det(image, labels, phrase, subj, obj, score):
    return DetectionRecord(image, *labels, np.array(phrase, float), np.array(subj, float), np.array(obj, float), score)


def hand_corpus():
    gts = {
        "A": _gt([((1, 1, 2), (0, 0, 10, 10), (20, 0, 30, 10)),
                  ((2, 3, 1), (0, 20, 10, 30), (0, 40, 10, 50))]),
        "B": _gt([((3, 2, 3), (5, 5, 15, 15), (30, 30, 40, 40))]),
        "C": _gt([((1, 2, 1), (0, 0, 8, 8), (10, 0, 18, 8))]),
    }
    dets = {
        "A": [_det("A", (1, 1, 2), (0, 0, 30, 10), (0, 0, 10, 10), (20, 0, 30, 10), 0.9),
              _det("A", (1, 1, 2), (0, 0, 30, 10), (0, 0, 10, 10), (20, 0, 30, 10), 0.8),
              # phrase IoU 0.8, object IoU 0.4
              _det("A", (2, 3, 1), (0, 20, 10, 44), (0, 20, 10, 30), (0, 40, 10, 44), 0.7)],
        "B": [_det("B", (3, 1, 3), (5, 5, 40, 40), (5, 5, 15, 15), (30, 30, 40, 40), 0.6),
              # phrase IoU 0.6
              _det("B", (3, 2, 3), (5, 5, 40, 26), (5, 5, 15, 15), (30, 30, 40, 40), 0.5)],
        "C": [],
    }
    # recall by N, worked out by hand
    expected = {
        "phrase": {1: 1 / 4, 2: 2 / 4, 3: 3 / 4, 100: 3 / 4},
        "relationship": {1: 1 / 4, 2: 2 / 4, 3: 2 / 4, 100: 2 / 4},
    }
    return dets, gts, expected


def as_oracle_input(dets, gts):
    flat = [(d.image_id, d.labels, tuple(d.phrase_box), tuple(d.subject_box), tuple(d.object_box), d.score)
            for ds in dets.values() for d in ds]
    rels = {k: [(tuple(g.labels[i]), tuple(g.subjects[i]), tuple(g.objects[i])) for i in range(len(g))]
            for k, g in gts.items()}
    return flat, rels

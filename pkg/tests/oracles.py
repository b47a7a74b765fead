"""Independent, deliberately naive reference implementations used as test oracles.

Nothing here imports the package's own geometry or matching code.
"""
from __future__ import annotations

import math


def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def brute_greedy(scores, overlap, threshold):
    """Greedy suppression with an explicit O(n^2) scan; ``overlap(i, j)`` is any symmetric measure."""
    n = len(scores)
    alive = [True] * n
    keep = []
    while True:
        best = -1
        for i in range(n):
            if alive[i] and (best < 0 or scores[i] > scores[best]):
                best = i
        if best < 0:
            return keep
        keep.append(best)
        alive[best] = False
        for j in range(n):
            if alive[j] and overlap(best, j) > threshold:
                alive[j] = False


def brute_triplet_nms(subjects, objects, scores, threshold):
    return brute_greedy(scores, lambda i, j: box_iou(subjects[i], subjects[j]) * box_iou(objects[i], objects[j]),
                        threshold)


def union(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def stage1_labels(subj, obj, gt_subj, gt_obj, gt_labels, thr=0.5):
    """Per-branch best match: for each of subject, predicate, object, the
    lowest-index gt with the maximal IoU, foreground when that IoU >= thr."""
    pred = union(subj, obj)
    gt_pred = [union(s, o) for s, o in zip(gt_subj, gt_obj)]
    out = []
    for k, (box, gts) in enumerate(((subj, gt_subj), (pred, gt_pred), (obj, gt_obj))):
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            v = box_iou(box, g)
            if v > best_iou:
                best, best_iou = j, v
        out.append((gt_labels[best][k], best) if best >= 0 and best_iou >= thr else (0, -1))
    return out


def stage2_labels(subj, obj, gt_subj, gt_obj, gt_labels, thr=0.5):
    """Exhaustive joint match: only gt relationships whose subject, union and
    object all reach ``thr``; among them the largest IoU sum, lowest index on ties."""
    pred = union(subj, obj)
    best, best_q = -1, -math.inf
    for j, (gs, go) in enumerate(zip(gt_subj, gt_obj)):
        ious = (box_iou(subj, gs), box_iou(pred, union(gs, go)), box_iou(obj, go))
        if all(v >= thr for v in ious):
            q = ious[0] + ious[1] + ious[2]
            if q > best_q:
                best, best_q = j, q
    if best < 0:
        return (0, 0, 0), -1
    return tuple(gt_labels[best]), best


def brute_recall(dets, gts, n, mode, thr=0.5):
    """dets: list of (image, labels, phrase, subj, obj, score); gts: image -> list of (labels, subj, obj).

    Per image: keep the top-n by score (stable), walk them in order, and let
    each claim the unclaimed same-label gt with the highest overlap >= thr.
    """
    hits, total = 0, 0
    for image, rels in gts.items():
        total += len(rels)
        mine = [d for d in dets if d[0] == image]
        mine = sorted(mine, key=lambda d: -d[5])[:n]
        claimed = set()
        for d in mine:
            best, best_v = None, -1.0
            for j, (labels, gs, go) in enumerate(rels):
                if j in claimed or tuple(labels) != tuple(d[1]):
                    continue
                if mode == "phrase":
                    v = box_iou(d[2], union(gs, go))
                else:
                    v = min(box_iou(d[3], gs), box_iou(d[4], go))
                if v >= thr and v > best_v:
                    best, best_v = j, v
            if best is not None:
                claimed.add(best)
                hits += 1
    return hits / total if total else None

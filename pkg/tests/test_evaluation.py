import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_boxes
from corpus import as_oracle_input, hand_corpus
from oracles import brute_recall
from vipcnn.data import GroundTruth
from vipcnn.errors import InvalidInput
from vipcnn.evaluation import (DetectionRecord, average_precision, match_phrase, match_relationship, read_detections,
                               read_results, recall_at_n, sort_detections, write_detections, write_results)

G = GroundTruth(np.array([[0, 0, 10, 10.0]]), np.array([[20, 0, 30, 10.0]]), np.array([[1, 2, 3]]))


def det(labels=(1, 2, 3), phrase=(0, 0, 30, 10), subj=(0, 0, 10, 10), obj=(20, 0, 30, 10), score=0.9, image="i"):
    return DetectionRecord(image, *labels, np.array(phrase, float), np.array(subj, float), np.array(obj, float), score)


# ---------------------------------------------------------------- matching

def test_match_phrase_examples():
    assert match_phrase([det(phrase=(0, 0, 18, 10))], G) == [True]  # IoU 0.6
    assert match_phrase([det(labels=(1, 1, 3))], G) == [False]
    assert match_phrase([det(phrase=(0, 0, 12, 10))], G) == [False]  # IoU 0.4


def test_match_relationship_examples():
    # subject IoU 0.7, object IoU 0.6
    assert match_relationship([det(subj=(0, 0, 10, 7), obj=(20, 0, 30, 6))], G) == [True]
    assert match_relationship([det(subj=(0, 0, 10, 7), obj=(20, 0, 30, 3))], G) == [False]
    assert match_relationship([det(score=0.9), det(score=0.8)], G) == [True, False]


def test_matching_threshold_is_inclusive():
    assert match_phrase([det(phrase=(0, 0, 15, 10))], G) == [True]  # IoU exactly 0.5


def test_sort_is_stable():
    ds = [det(score=0.5), det(score=0.9), det(score=0.5)]
    assert sort_detections(ds) == [ds[1], ds[0], ds[2]]


# ------------------------------------------------------------------ recall

def test_hand_corpus_recall():
    dets, gts, expected = hand_corpus()
    flat, rels = as_oracle_input(dets, gts)
    for mode, table in expected.items():
        res = recall_at_n(dets, gts, tuple(table), mode)
        for n, value in table.items():
            assert res.rec_at[n] == value
            assert brute_recall(flat, rels, n, mode) == value


def test_all_matched_gives_full_recall():
    assert recall_at_n({"i": [det()]}, {"i": G}).rec_at[50] == 1.0


def test_zero_gt_is_absent():
    empty = GroundTruth(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 3), int))
    assert recall_at_n({"i": [det()]}, {"i": empty}).rec_at[50] is None


def test_unknown_mode():
    with pytest.raises(InvalidInput):
        recall_at_n({"i": [det()]}, {"i": G}, mode="predicate")


def random_instance(rng, n_img=3, max_det=8):
    gts, dets = {}, {}
    for k in range(n_img):
        image = f"im{k}"
        g = int(rng.integers(0, 4))
        pool = random_boxes(rng, 5, size=40, min_side=6, max_side=20)
        gi = rng.integers(0, 5, (g, 2))
        gts[image] = GroundTruth(pool[gi[:, 0]].reshape(-1, 4), pool[gi[:, 1]].reshape(-1, 4),
                                 rng.integers(1, 3, (g, 3)))
        ds = []
        for _ in range(int(rng.integers(0, max_det + 1))):
            s, o = pool[rng.integers(0, 5, 2)] + rng.normal(0, 1.5, (2, 4))
            s[2:] = np.maximum(s[2:], s[:2] + 1)
            o[2:] = np.maximum(o[2:], o[:2] + 1)
            phrase = np.concatenate([np.minimum(s[:2], o[:2]), np.maximum(s[2:], o[2:])])
            ds.append(DetectionRecord(image, *rng.integers(1, 3, 3).tolist(), phrase, s, o,
                                      float(rng.integers(0, 4)) / 4))
        dets[image] = ds
    return dets, gts


@given(st.integers(0, 10**6))
def test_recall_matches_oracle_and_is_monotone(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_instance(rng)
    flat, rels = as_oracle_input(dets, gts)
    for mode in ("phrase", "relationship"):
        res = recall_at_n(dets, gts, (1, 2, 4, 8), mode)
        if res.rec_at[1] is None:
            assert brute_recall(flat, rels, 1, mode) is None
            continue
        for n in (1, 2, 4, 8):
            assert res.rec_at[n] == pytest.approx(brute_recall(flat, rels, n, mode), abs=1e-15)
            flags = res.matches[n]
            assert sum(map(sum, flags.values())) == round(res.rec_at[n] * res.n_gt)
        assert res.rec_at[1] <= res.rec_at[2] <= res.rec_at[4] <= res.rec_at[8] <= 1.0
        lower = recall_at_n(dets, gts, (8,), mode, iou_thr=0.3).rec_at[8]
        assert lower >= res.rec_at[8]


# ---------------------------------------------------------------------- AP

def test_ap_examples():
    box = np.array([0, 0, 10, 10.0])
    assert average_precision([("i", box, 0.9)], {"i": box[None]}) == 1.0
    assert average_precision([("i", box + 50, 0.9)], {"i": box[None]}) == 0.0
    assert average_precision([], {"i": np.zeros((0, 4))}) is None


def test_ap_hand_integrated():
    gts = {"i": np.array([[0, 0, 10, 10], [20, 0, 30, 10], [40, 0, 50, 10.0]])}
    dets = [("i", gts["i"][0], 0.9), ("i", np.array([60, 60, 70, 70.0]), 0.8), ("i", gts["i"][1], 0.7)]
    # precision 1, 1/2, 2/3 at recall 1/3, 1/3, 2/3
    assert average_precision(dets, gts) == pytest.approx(1 / 3 + (1 / 3) * (2 / 3), abs=1e-12)


# ------------------------------------------------------------------- files

def test_detection_and_result_files_roundtrip(tmp_path):
    dets, _, _ = hand_corpus()
    write_detections(tmp_path / "d.tsv", dets)
    back = read_detections(tmp_path / "d.tsv")
    for k in ("A", "B"):
        for a, b in zip(dets[k], back[k]):
            assert a.labels == b.labels and a.score == b.score
            assert np.array_equal(a.phrase_box, b.phrase_box)
    write_results(tmp_path / "r.tsv", {"phrase_rec50": 0.25, "rel_rec50": None})
    assert read_results(tmp_path / "r.tsv") == {"phrase_rec50": 0.25, "rel_rec50": None}
    (tmp_path / "bad.tsv").write_text("x\t1\n")
    with pytest.raises(InvalidInput):
        read_detections(tmp_path / "bad.tsv")

import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_boxes
from oracles import stage1_labels, stage2_labels
from vipcnn.data import GroundTruth, SynthConfig, Vocabulary, generate_dataset
from vipcnn.errors import ConfigError, DimensionError, InvalidInput, NonFiniteLoss
from vipcnn.geometry import Box, BoxOffsets, Triplet, TripletArrays
from vipcnn.model import BranchOutputs, ModelConfig, RoiBatch, ViPModel, preprocess
from vipcnn.numerics import LayerParams, Parameter, SGD, Tensor, grad_check, precision
from vipcnn.training import (LossConfig, TrainConfig, assign_labels_stage1, assign_labels_stage2, label_arrays,
                             load_embeddings, multi_task_loss, sample_batch, train, word_vector_loss)

TINY = dict(trunk=(4, 8), trunk_pool=(True, False), branch_convs=(8,), roi_size=2, fc_widths=(16, 16))


def gt_of(subjects, objects, labels):
    return GroundTruth(np.asarray(subjects, dtype=np.float64).reshape(-1, 4),
                       np.asarray(objects, dtype=np.float64).reshape(-1, 4), np.asarray(labels, dtype=np.int64))


GS, GO = (0, 0, 10, 10), (20, 0, 30, 10)
GT1 = gt_of([GS], [GO], [[1, 2, 3]])


# ------------------------------------------------------------------ config

def test_loss_config_validation():
    for bad in (dict(lam=-1), dict(fg_threshold=0.0), dict(stage=3), dict(target_mode="glove"),
                dict(fg_fraction=1.5)):
        with pytest.raises(ConfigError):
            LossConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig(stages="3")


# ---------------------------------------------------------------- labeling

def test_stage1_independent_branches():
    t = Triplet(Box(0, 0, 10, 6), Box(20, 0, 30, 4))  # subject IoU 0.6, object IoU 0.4
    lt = assign_labels_stage1(t, GT1, LossConfig(stage=1))
    assert lt.u_s == 1 and lt.u_o == 0
    assert lt.v_s is not None and lt.v_o is None


def test_stage1_all_below_threshold():
    t = Triplet(Box(40, 40, 50, 50), Box(50, 50, 60, 60))
    lt = assign_labels_stage1(t, GT1, LossConfig(stage=1))
    assert (lt.u_s, lt.u_p, lt.u_o) == (0, 0, 0)


def test_stage1_exact_box_has_zero_offsets():
    lt = assign_labels_stage1(Triplet(Box(*GS), Box(*GO)), GT1, LossConfig(stage=1))
    assert lt.v_s == BoxOffsets(0.0, 0.0, 0.0, 0.0)
    assert (lt.u_s, lt.u_p, lt.u_o) == (1, 2, 3)


def test_stage_mismatch_is_config_error():
    t = Triplet(Box(*GS), Box(*GO))
    with pytest.raises(ConfigError):
        assign_labels_stage1(t, GT1, LossConfig(stage=2))
    with pytest.raises(ConfigError):
        assign_labels_stage2(t, GT1, LossConfig(stage=1))


def test_stage2_all_or_nothing_examples():
    cfg = LossConfig(stage=2)
    partial = Triplet(Box(0, 0, 10, 6), Box(20, 0, 30, 4))
    assert (assign_labels_stage2(partial, GT1, cfg).u_s, assign_labels_stage2(partial, GT1, cfg).u_o) == (0, 0)
    good = Triplet(Box(0, 0, 10, 9), Box(20, 1, 30, 10))
    lt = assign_labels_stage2(good, GT1, cfg)
    assert (lt.u_s, lt.u_p, lt.u_o) == (1, 2, 3)
    assert None not in (lt.v_s, lt.v_p, lt.v_o)
    # subject matches relationship A, object matches relationship B, no single match
    gt = gt_of([GS, (40, 40, 50, 50)], [(60, 60, 70, 70), GO], [[1, 1, 1], [2, 2, 2]])
    lt = assign_labels_stage2(Triplet(Box(*GS), Box(*GO)), gt, cfg)
    assert (lt.u_s, lt.u_p, lt.u_o) == (0, 0, 0)


def test_empty_ground_truth_is_background():
    empty = gt_of(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 3)))
    for stage in (1, 2):
        u, v = label_arrays(TripletArrays.from_triplets([Triplet(Box(*GS), Box(*GO))]), empty, stage)
        assert not u.any() and not v.any()


def random_config(rng, n_trip, n_gt):
    pool = random_boxes(rng, 6, size=60, min_side=5, max_side=30)
    # proposals jittered around the gt pool so that foreground labels actually occur
    props = np.clip(pool[rng.integers(0, 6, (n_trip, 2))] + rng.normal(0, 2, (n_trip, 2, 4)), -5, 70)
    props[..., 2:] = np.maximum(props[..., 2:], props[..., :2] + 1)
    gi = rng.integers(0, 6, (n_gt, 2))
    labels = rng.integers(1, 4, (n_gt, 3))
    return props, pool[gi[:, 0]], pool[gi[:, 1]], labels


@given(st.integers(0, 10**6))
def test_labels_match_oracles(seed):
    rng = np.random.default_rng(seed)
    props, gs, go, labels = random_config(rng, 20, int(rng.integers(1, 5)))
    trips = TripletArrays(props[:, 0], props[:, 1], np.ones(20), np.ones(20))
    gt = gt_of(gs, go, labels)
    u1, _ = label_arrays(trips, gt, 1)
    u2, _ = label_arrays(trips, gt, 2)
    for i in range(20):
        s, o = tuple(props[i, 0]), tuple(props[i, 1])
        ref1 = stage1_labels(s, o, gs.tolist(), go.tolist(), labels.tolist())
        assert tuple(u1[i]) == tuple(r[0] for r in ref1)
        ref2, _ = stage2_labels(s, o, gs.tolist(), go.tolist(), labels.tolist())
        assert tuple(u2[i]) == ref2
        assert (u2[i] >= 1).all() or (u2[i] == 0).all()


# -------------------------------------------------------------------- loss

def outputs(logits, offsets):
    return BranchOutputs({k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in logits.items()},
                         {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in offsets.items()},
                         None)


def random_outputs(rng, n, k_obj=4, k_pred=3):
    ks = {"subject": k_obj, "predicate": k_pred, "object": k_obj}
    return outputs({b: rng.normal(size=(n, k)) for b, k in ks.items()},
                   {b: rng.normal(size=(n, 4 * (k - 1))) for b, k in ks.items()})


def test_three_ln2_case():
    with precision(np.float64):
        out = outputs({b: [[0.0, 0.0]] for b in ("subject", "predicate", "object")},
                      {b: [[0.1, -0.2, 0.3, 0.0]] for b in ("subject", "predicate", "object")})
        v = np.array([[[0.1, -0.2, 0.3, 0.0]] * 3])
        loss, terms = multi_task_loss(out, np.array([[1, 1, 1]]), v, LossConfig())
        assert abs(loss.item() - 3 * math.log(2)) <= 1e-9


def test_background_batch_has_zero_regression(rng):
    with precision(np.float64):
        out = random_outputs(rng, 5)
        loss, terms = multi_task_loss(out, np.zeros((5, 3), int), rng.normal(size=(5, 3, 4)), LossConfig())
        assert terms["reg_s"] == terms["reg_p"] == terms["reg_o"] == 0.0
        assert loss.item() == pytest.approx(terms["cls_s"] + terms["cls_p"] + terms["cls_o"], abs=1e-12)
        loss.backward()
        assert not out.offsets["subject"].grad.any()


def test_lambda_zero_is_pure_classification(rng):
    with precision(np.float64):
        out = random_outputs(rng, 6)
        u = np.array([[1, 2, 3]] * 3 + [[0, 1, 2]] * 3)
        loss, terms = multi_task_loss(out, u, rng.normal(size=(6, 3, 4)), LossConfig(lam=0.0))
        assert loss.item() == pytest.approx(terms["cls_s"] + terms["cls_p"] + terms["cls_o"], abs=1e-12)
        assert terms["reg_s"] > 0


def test_loss_shape_errors(rng):
    out = random_outputs(rng, 4)
    with pytest.raises(DimensionError):
        multi_task_loss(out, np.zeros((3, 3), int), np.zeros((3, 3, 4)), LossConfig())
    with pytest.raises(DimensionError):
        multi_task_loss(out, np.zeros((4, 2), int), np.zeros((4, 3, 4)), LossConfig())


def test_loss_gradient(rng):
    with precision(np.float64):
        out = random_outputs(rng, 5)
        u = np.array([[1, 2, 3], [0, 0, 0], [3, 1, 0], [2, 2, 2], [0, 1, 1]])
        v = rng.normal(size=(5, 3, 4))
        params = list(out.logits.values()) + list(out.offsets.values())
        assert grad_check(lambda: multi_task_loss(out, u, v, LossConfig(lam=0.7))[0], params) <= 1e-4


# -------------------------------------------------------------- word vectors

def test_word_vector_examples():
    with precision(np.float64):
        table = {1: [1.0, 2.0, 3.0, 4.0], 2: [0.0, 0.0, 0.0, 0.0]}
        feats = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
        assert word_vector_loss(feats, table, [1]).item() == 0.0
        off = Tensor(np.array([[1.5, 2.5, 3.5, 4.5]]))
        assert word_vector_loss(off, table, [1]).item() == pytest.approx(0.125, abs=1e-15)
        with pytest.raises(InvalidInput):
            word_vector_loss(feats, table, [7])
        with pytest.raises(DimensionError):
            word_vector_loss(Tensor(np.ones((1, 3))), table, [1])


def test_word_vector_gradient(rng):
    with precision(np.float64):
        head = LayerParams(Parameter(rng.normal(size=(4, 6)), name="w"), Parameter(rng.normal(size=4), name="b"), "h")
        feats = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
        table = rng.normal(size=(3, 4))
        labels = [0, 1, 2, 2, 1]
        f = lambda: word_vector_loss(feats, table, labels, head)
        assert grad_check(f, [head.weight, head.bias, feats]) <= 1e-4


def test_load_embeddings(tmp_path):
    p = tmp_path / "emb.tsv"
    p.write_text("cat\t1 2\ndog\t3 4\n")
    t = load_embeddings(p, ["dog", "cat"])
    np.testing.assert_array_equal(t, [[0, 0], [3, 4], [1, 2]])
    with pytest.raises(InvalidInput):
        load_embeddings(p, ["cow"])


# ---------------------------------------------------------------- sampling

def test_sample_batch_fg_fraction(rng):
    n = 200
    trips = TripletArrays(random_boxes(rng, n), random_boxes(rng, n), np.ones(n), np.ones(n))
    u = np.zeros((n, 3), int)
    u[:50] = [1, 1, 1]
    u[50:100, 0] = 1
    batch, ub, _ = sample_batch(trips, u, np.zeros((n, 3, 4)), 32, 0.25, 2, rng)
    assert len(batch) == 32 and (ub >= 1).all(axis=1).sum() == 8
    batch, ub, _ = sample_batch(trips, u, np.zeros((n, 3, 4)), 32, 0.25, 1, rng)
    assert (ub >= 1).any(axis=1).sum() == 8


# -------------------------------------------------------------- full model

@pytest.fixture(scope="module")
def tiny_data():
    cfg = SynthConfig()
    return generate_dataset(cfg, 8), Vocabulary.from_synth(cfg)


def tiny_model(vocab, **kw):
    return ViPModel(ModelConfig(n_obj=len(vocab.objects), n_pred=len(vocab.predicates), **{**TINY, **kw}))


def test_full_loss_gradient_on_tiny_model(rng, tiny_data):
    scenes, vocab = tiny_data
    with precision(np.float64):
        m = ViPModel(ModelConfig(n_obj=len(vocab.objects), n_pred=len(vocab.predicates), trunk=(3,),
                                 trunk_pool=(True,), branch_convs=(4,), roi_size=2, fc_widths=(6, 6)),
                     dtype=np.float64)
        for p in m.message_parameters():
            p.data[...] = rng.normal(scale=0.2, size=p.shape)
        x, s = preprocess(scenes[0].image[:24, :24], 24)
        gt = GroundTruth.from_annotations(scenes[0].relationships, vocab)
        b = np.array([[0, 0, 12, 12], [4, 6, 20, 22.0], [2, 2, 24, 16]])
        rois = RoiBatch(np.zeros(3, np.int64), b, b, b[::-1].copy())
        u = np.array([[1, 2, 3], [0, 0, 0], [4, 1, 2]])
        v = rng.normal(scale=0.3, size=(3, 3, 4))
        f = lambda: multi_task_loss(m.forward(x, rois), u, v, LossConfig())[0]
        assert grad_check(f, m.trainable_parameters(), max_coords=4) <= 1e-4
        del gt, s


def test_loss_decreases_on_fixed_batch(tiny_data):
    from vipcnn.training import _ImageCache, build_batch, training_proposals
    scenes, vocab = tiny_data
    m = tiny_model(vocab)
    cache = _ImageCache(scenes, vocab, 64)
    images, rois, u, v = build_batch(cache, [0], training_proposals(), LossConfig(), 8,
                                     np.random.default_rng(0), (0,))
    assert len(rois) == 8
    opt = SGD(m.trainable_parameters(), lr=0.001, momentum=0.0)  # momentum would overshoot on one batch
    losses = []
    for _ in range(20):
        opt.zero_grad()
        loss, _ = multi_task_loss(m.forward(images, rois), u, v, LossConfig())
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_training_is_deterministic(tiny_data, tmp_path):
    scenes, vocab = tiny_data
    cfg = TrainConfig(stage1_epochs=1, stage2_epochs=1, lr=0.01, seed=3)
    states, logs = [], []
    for k in range(2):
        m = tiny_model(vocab)
        train(scenes, vocab, m, cfg, val_scenes=scenes[:2], log_path=tmp_path / f"m{k}.jsonl")
        states.append(m.state_dict())
        logs.append([{a: b for a, b in json.loads(line).items() if a != "seconds"}
                     for line in (tmp_path / f"m{k}.jsonl").read_text().splitlines()])
    assert states[0].keys() == states[1].keys()
    for k in states[0]:
        assert np.array_equal(states[0][k], states[1][k]), k
    assert logs[0] == logs[1]
    assert [r["stage"] for r in logs[0]] == [1, 2]
    assert {"phrase_rec50", "phrase_rec100", "cls_s", "reg_p", "step"} <= logs[0][0].keys()


def test_stage1_equals_baseline(tiny_data):
    scenes, vocab = tiny_data
    cfg = TrainConfig(stages="1-only", stage1_epochs=1, lr=0.01)
    vip = tiny_model(vocab)
    base = tiny_model(vocab, pmps_conv=False, pmps_fc=False)
    r1 = train(scenes, vocab, vip, cfg)
    r2 = train(scenes, vocab, base, cfg)
    msg = {p.name for p in vip.message_parameters()}
    assert set(r2.stage1_state) == set(r1.stage1_state) - msg
    for k, arr in r2.stage1_state.items():
        assert np.array_equal(arr, r1.stage1_state[k]), k
    assert all(not r1.stage1_state[k].any() for k in msg)


def test_frozen_layers_do_not_move(tiny_data):
    scenes, vocab = tiny_data
    m = tiny_model(vocab)
    before = {k: v.copy() for k, v in m.state_dict().items()}
    train(scenes, vocab, m, TrainConfig(stage1_epochs=1, stage2_epochs=1, lr=0.01))
    after = m.state_dict()
    moved = {k for k in before if not np.array_equal(before[k], after[k])}
    assert not any(k.startswith("trunk.0.") for k in moved)
    assert any(k.startswith("trunk.1.") for k in moved)
    assert all(p.requires_grad for p in m.parameters())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_with_snapshot(tiny_data, tmp_path):
    scenes, vocab = tiny_data
    m = tiny_model(vocab)
    m.cls_head["subject"].weight.data[...] = np.inf
    with pytest.raises(NonFiniteLoss):
        train(scenes, vocab, m, TrainConfig(stage1_epochs=1, stage2_epochs=0), out_dir=tmp_path)
    assert (tmp_path / "nonfinite_snapshot.ckpt").is_file()

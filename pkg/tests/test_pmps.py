import numpy as np
import pytest
from hypothesis import given, strategies as st

from vipcnn import pmps
from vipcnn.errors import ConfigError, DimensionError
from vipcnn.numerics import LayerParams, Parameter, Tensor, grad_check, precision, total
from vipcnn.numerics.tensor import mul
from vipcnn.pmps import (BranchFeatures, PmpsLayerParams, broadcast_layer, gather_layer, init_layer, parallel_pmps,
                         plain_layer, sequential_pmps)


def feats(rng, shape, requires_grad=False):
    return BranchFeatures(*(Tensor(rng.normal(size=shape), requires_grad=requires_grad) for _ in range(3)))


def randomize_messages(layer, rng, scale=0.3):
    for p in layer.messages.values():
        p.data[...] = rng.normal(scale=scale, size=p.shape)


def proj(t, seed):
    w = np.random.default_rng(seed).normal(size=t.shape)
    return total(mul(t, Tensor(w)))


def loss_of(out: BranchFeatures):
    return proj(out.subject, 1) + proj(out.predicate, 2) + proj(out.object, 3)


# ------------------------------------------------------------ scalar cases

def scalar_layer(wp, ws, wo):
    def lp(name, w):
        return LayerParams(Parameter(np.array([[w]], dtype=np.float64), name=name),
                           Parameter(np.zeros(1), name=name + ".b"), name)
    shared = lp("so", 1.0)
    return PmpsLayerParams("fc", {"subject": shared, "predicate": lp("p", wp), "object": shared},
                           {"p<-s": Parameter(np.array([[ws]]), name="ps"),
                            "p<-o": Parameter(np.array([[wo]]), name="po")})


def test_gather_scalar_example():
    with precision(np.float64):
        layer = scalar_layer(2.0, 1.0, 1.0)
        x = BranchFeatures(Tensor([[0.0]]), Tensor([[1.0]]), Tensor([[0.0]]))
        out = gather_layer(x, Tensor([[3.0]]), Tensor([[4.0]]), layer)
        assert out.data.item() == 9.0


def test_gather_shape_error_names_path(rng):
    with precision(np.float64):
        layer = init_layer("l", "fc", 4, 5, rng, messages="gather")
        x = feats(rng, (2, 4))
        good = Tensor(rng.normal(size=(2, 5)))
        with pytest.raises(DimensionError, match=r"p<-o"):
            gather_layer(x, good, Tensor(rng.normal(size=(2, 3))), layer)


def test_parallel_bad_split_is_config_error(rng):
    with pytest.raises(ConfigError):
        init_layer("l", "fc", 4, 6, rng, messages="parallel", gather_width=6)
    layer = init_layer("l", "fc", 4, 6, rng, messages="parallel")
    layer.gather_width = 7
    with pytest.raises(ConfigError):
        parallel_pmps(feats(rng, (2, 4)), layer)


# ------------------------------------------------- zero-message reductions

@pytest.mark.parametrize("kind,shape", [("fc", (3, 5)), ("conv", (2, 3, 4, 4))])
def test_gather_zero_messages_is_plain(rng, kind, shape):
    with precision(np.float64):
        layer = init_layer("l", kind, shape[1], 6, rng, messages="gather")
        x = feats(rng, shape)
        plain = plain_layer(x, layer)
        out = gather_layer(x, plain.subject, plain.object, layer)
        assert np.array_equal(out.data, plain.predicate.data)


@pytest.mark.parametrize("kind,shape", [("fc", (3, 5)), ("conv", (2, 3, 4, 4))])
def test_broadcast_zero_messages_is_plain(rng, kind, shape):
    with precision(np.float64):
        layer = init_layer("l", kind, shape[1], 6, rng, messages="broadcast")
        x = feats(rng, shape)
        plain = plain_layer(x, layer)
        s, o = broadcast_layer(x, plain.predicate, layer)
        assert np.array_equal(s.data, plain.subject.data)
        assert np.array_equal(o.data, plain.object.data)


@pytest.mark.parametrize("kind,shape", [("fc", (3, 5)), ("conv", (2, 3, 4, 4))])
@pytest.mark.parametrize("tie", [True, False])
def test_sequential_zero_messages_is_two_plain_layers(rng, kind, shape, tie):
    with precision(np.float64):
        first = init_layer("a", kind, shape[1], 6, rng, tie=tie, messages="gather")
        second = init_layer("b", kind, 6, 4, rng, tie=tie, messages="broadcast")
        x = feats(rng, shape)
        out = sequential_pmps(x, first, second)
        ref = plain_layer(plain_layer(x, first), second)
        for b in pmps.BRANCHES:
            assert np.array_equal(getattr(out, b).data, getattr(ref, b).data)
        assert out.subject.shape[1] == 4


@pytest.mark.parametrize("kind,shape", [("fc", (3, 5)), ("conv", (2, 3, 4, 4))])
def test_parallel_zero_messages_is_plain(rng, kind, shape):
    with precision(np.float64):
        layer = init_layer("l", kind, shape[1], 6, rng, messages="parallel", gather_width=2)
        x = feats(rng, shape)
        out = parallel_pmps(x, layer)
        ref = plain_layer(x, layer)
        for b in pmps.BRANCHES:
            assert getattr(out, b).shape[1] == 6
            assert np.array_equal(getattr(out, b).data, getattr(ref, b).data)


# ----------------------------------------------------------- tying / locality

def test_tied_layer_shares_main_but_not_messages(rng):
    layer = init_layer("l", "fc", 4, 6, rng, tie=True, messages="parallel")
    assert layer.tied
    assert layer.main["subject"].weight is layer.main["object"].weight
    ids = {id(p) for p in layer.messages.values()}
    assert len(ids) == 4
    untied = init_layer("l", "fc", 4, 6, rng, tie=False, messages="gather")
    assert not untied.tied


def test_broadcast_symmetric_under_tying(rng):
    with precision(np.float64):
        layer = init_layer("l", "fc", 4, 5, rng, tie=True, messages="broadcast")
        layer.messages["o<-p"].data[...] = rng.normal(size=(5, 5))
        layer.messages["s<-p"].data[...] = layer.messages["o<-p"].data
        same = Tensor(rng.normal(size=(3, 4)))
        x = BranchFeatures(same, Tensor(rng.normal(size=(3, 4))), same)
        s, o = broadcast_layer(x, Tensor(rng.normal(size=(3, 5))), layer)
        assert np.array_equal(s.data, o.data)


@given(st.integers(0, 10**6))
def test_swap_symmetry_with_tying(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        first = init_layer("a", "fc", 4, 6, rng, tie=True, messages="gather")
        second = init_layer("b", "fc", 6, 5, rng, tie=True, messages="broadcast")
        # messages mirrored so that subject and object roles are interchangeable
        w = rng.normal(scale=0.5, size=(6, 6))
        first.messages["p<-s"].data[...] = w
        first.messages["p<-o"].data[...] = w
        w2 = rng.normal(scale=0.5, size=(5, 5))
        second.messages["s<-p"].data[...] = w2
        second.messages["o<-p"].data[...] = w2
        x = feats(rng, (3, 4))
        a = sequential_pmps(x, first, second)
        b = sequential_pmps(x.swap(), first, second)
        # the gather sum is taken in the other order after the swap, so allow rounding
        np.testing.assert_allclose(a.subject.data, b.object.data, rtol=0, atol=1e-12)
        np.testing.assert_allclose(a.object.data, b.subject.data, rtol=0, atol=1e-12)
        np.testing.assert_allclose(a.predicate.data, b.predicate.data, rtol=0, atol=1e-12)


def test_locality_subject_perturbation(rng):
    with precision(np.float64):
        layer = init_layer("l", "fc", 4, 6, rng, messages="gather")
        randomize_messages(layer, rng)
        x = feats(rng, (3, 4))
        plain = plain_layer(x, layer)
        before = gather_layer(x, plain.subject, plain.object, layer).data
        x2 = BranchFeatures(Tensor(x.subject.data + rng.normal(size=(3, 4))), x.predicate, x.object)
        plain2 = plain_layer(x2, layer)
        after = gather_layer(x2, plain2.subject, plain2.object, layer).data
        assert np.array_equal(plain.object.data, plain2.object.data)
        assert not np.array_equal(before, after)


def test_branch_batch_mismatch(rng):
    with pytest.raises(DimensionError):
        BranchFeatures(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), Tensor(np.ones((2, 3))))


# ------------------------------------------------------------- gradients

def _params(*layers):
    seen, out = set(), []
    for layer in layers:
        for p in layer.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


@pytest.mark.parametrize("kind,shape", [("fc", (3, 4)), ("conv", (2, 2, 4, 4))])
@pytest.mark.parametrize("tie", [True, False])
def test_gather_broadcast_gradients(rng, kind, shape, tie):
    with precision(np.float64):
        first = init_layer("a", kind, shape[1], 3, rng, tie=tie, messages="gather")
        second = init_layer("b", kind, 3, 3, rng, tie=tie, messages="broadcast")
        randomize_messages(first, rng)
        randomize_messages(second, rng)
        x = feats(rng, shape, requires_grad=True)

        def g():
            plain = plain_layer(x, first)
            return proj(gather_layer(x, plain.subject, plain.object, first), 4)

        def b():
            mid = plain_layer(x, first)
            hp = plain_layer(mid, second).predicate
            s, o = broadcast_layer(mid, hp, second)
            return proj(s, 5) + proj(o, 6)

        inputs = [x.subject, x.predicate, x.object]
        assert grad_check(g, _params(first) + inputs) <= 1e-4
        assert grad_check(b, _params(first, second) + inputs) <= 1e-4


@pytest.mark.parametrize("kind,shape", [("fc", (3, 4)), ("conv", (2, 2, 4, 4))])
@pytest.mark.parametrize("tie", [True, False])
def test_sequential_and_parallel_gradients(rng, kind, shape, tie):
    with precision(np.float64):
        first = init_layer("a", kind, shape[1], 4, rng, tie=tie, messages="gather")
        second = init_layer("b", kind, 4, 3, rng, tie=tie, messages="broadcast")
        par = init_layer("c", kind, shape[1], 4, rng, tie=tie, messages="parallel")
        for layer in (first, second, par):
            randomize_messages(layer, rng)
        x = feats(rng, shape, requires_grad=True)
        inputs = [x.subject, x.predicate, x.object]
        assert grad_check(lambda: loss_of(sequential_pmps(x, first, second)),
                          _params(first, second) + inputs) <= 1e-4
        assert grad_check(lambda: loss_of(parallel_pmps(x, par)), _params(par) + inputs) <= 1e-4


@pytest.mark.parametrize("tie", [True, False])
def test_branch_pre_fused_conv_matches_separate(rng, tie):
    with precision(np.float64):
        layer = init_layer("c", "conv", 3, 4, rng, tie=tie, messages="parallel")
        t = Tensor(rng.normal(size=(2, 3, 5, 5)))
        pre = pmps.branch_pre(BranchFeatures(t, t, t), layer)
        for b in pmps.BRANCHES:
            ref = pmps.main_term(t, layer.main[b], "conv", layer.pad)
            np.testing.assert_allclose(pre[b].data, ref.data, rtol=0, atol=1e-12)
        assert (pre["subject"] is pre["object"]) == tie

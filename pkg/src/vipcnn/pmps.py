"""Phrase-guided message passing between the subject, predicate and object branches.

Two message flows couple the branches:

* gather: ``h_p[l] = f(W_p * h_p[l-1] + W_ps * h_s[l] + W_po * h_o[l] + b_p)``
* broadcast: ``h_s[l+1] = f(W_s * h_s[l] + W_sp * h_p[l+1] + b_s)`` (same for the object)

``*`` is a matrix product for fc layers and a convolution for conv layers
(message kernels are 1x1).  ``f`` is ReLU.  The sequential form spends two
layers on gather-then-broadcast; the parallel form splits one layer's width
into a gather half and a broadcast half and concatenates them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import LayerParams, Parameter, Tensor, concat, conv2d, linear, relu
from .numerics.tensor import default_dtype

BRANCHES = ("subject", "predicate", "object")
MESSAGE_PATHS = ("p<-s", "p<-o", "s<-p", "o<-p")


@dataclass
class BranchFeatures:
    subject: Tensor
    predicate: Tensor
    object: Tensor

    def __post_init__(self):
        n = {t.shape[0] for t in (self.subject, self.predicate, self.object)}
        if len(n) != 1:
            raise DimensionError(f"branch batch extents differ: {sorted(n)}")

    def swap(self) -> "BranchFeatures":
        return BranchFeatures(self.object, self.predicate, self.subject)


@dataclass
class PmpsLayerParams:
    """Main and message parameters of one layer of the three branches.

    With tying, ``main["subject"] is main["object"]``; the four message
    matrices are always separate.  ``messages`` may be empty (no PMPS).
    """

    kind: str  # "fc" or "conv"
    main: dict[str, LayerParams]
    messages: dict[str, Parameter] = field(default_factory=dict)
    pad: int = 1
    gather_width: int | None = None  # parallel form only

    @property
    def tied(self) -> bool:
        return self.main["subject"] is self.main["object"]

    @property
    def out_width(self) -> int:
        return self.main["predicate"].weight.shape[0]

    def parameters(self) -> list[Parameter]:
        seen, out = set(), []
        for lp in self.main.values():
            for p in lp.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        out.extend(self.messages.values())
        return out

    def message_parameters(self) -> list[Parameter]:
        return list(self.messages.values())


def init_layer(prefix: str, kind: str, n_in: int, n_out: int, rng: np.random.Generator, *,
               tie: bool = True, messages: str | None = None, gather_width: int | None = None,
               kernel: int = 3, dtype=None) -> PmpsLayerParams:
    """Fresh layer parameters.

    ``messages`` selects which message matrices exist: ``"gather"``,
    ``"broadcast"``, ``"parallel"`` or ``None``.  Message matrices start at
    zero so the layer initially computes three independent branches.
    """
    dtype = dtype or default_dtype()

    def main(tag):
        if kind == "fc":
            return LayerParams.init_fc(f"{prefix}.{tag}", n_in, n_out, rng, dtype=dtype)
        return LayerParams.init_conv(f"{prefix}.{tag}", n_in, n_out, kernel, rng, dtype=dtype)

    subject = main("so" if tie else "s")
    predicate = main("p")
    obj = subject if tie else main("o")
    if messages == "parallel":
        if gather_width is None:
            gather_width = n_out // 2
        check_split(gather_width, n_out - gather_width, n_out)
    widths = {
        "gather": {"p<-s": (n_out, n_out), "p<-o": (n_out, n_out)},
        "broadcast": {"s<-p": (n_out, n_out), "o<-p": (n_out, n_out)},
        "parallel": {} if messages != "parallel" else {
            "p<-s": (gather_width, gather_width), "p<-o": (gather_width, gather_width),
            "s<-p": (n_out - gather_width,) * 2, "o<-p": (n_out - gather_width,) * 2},
        None: {},
    }[messages]
    msgs = {}
    for path, (dst, src) in widths.items():
        shape = (dst, src) if kind == "fc" else (dst, src, 1, 1)
        msgs[path] = Parameter(np.zeros(shape, dtype=dtype), name=f"{prefix}.msg[{path}]")
    return PmpsLayerParams(kind, {"subject": subject, "predicate": predicate, "object": obj}, msgs,
                           pad=kernel // 2, gather_width=gather_width)


def check_split(gather_width: int, broadcast_width: int, total: int) -> None:
    if gather_width + broadcast_width != total or gather_width <= 0 or broadcast_width <= 0:
        raise ConfigError(f"parallel split {gather_width}+{broadcast_width} does not partition width {total}")


# -------------------------------------------------------------- primitives

def main_term(x: Tensor, lp: LayerParams, kind: str, pad: int) -> Tensor:
    """Pre-activation ``W x + b`` of a plain branch layer."""
    if kind == "fc":
        return linear(x, lp.weight, lp.bias, label=lp.identifier)
    return conv2d(x, lp.weight, lp.bias, stride=1, pad=pad, label=lp.identifier)


def branch_pre(x: BranchFeatures, params: PmpsLayerParams) -> dict[str, Tensor]:
    """Main terms for all three branches, computing each distinct (input, weights) pair once.

    Branch convs all read the same trunk map, so their unique kernels are
    stacked into a single convolution and the output split by channel.
    """
    k, pad = params.kind, params.pad
    inputs = {b: getattr(x, b) for b in BRANCHES}
    shared = k == "conv" and x.subject is x.predicate is x.object
    if shared:
        layers = list({id(params.main[b]): params.main[b] for b in BRANCHES}.values())
        if len(layers) > 1:
            w = concat([lp.weight for lp in layers], axis=0)
            bias = concat([lp.bias for lp in layers], axis=0)
            y = conv2d(x.subject, w, bias, stride=1, pad=pad, label=params.main["predicate"].identifier)
            bounds = np.cumsum([0] + [lp.weight.shape[0] for lp in layers])
            split = {id(lp): y[:, lo:hi] for lp, lo, hi in zip(layers, bounds[:-1], bounds[1:])}
            return {b: split[id(params.main[b])] for b in BRANCHES}
    cache: dict[tuple[int, int], Tensor] = {}
    out = {}
    for b in BRANCHES:
        key = (id(inputs[b]), id(params.main[b]))
        if key not in cache:
            cache[key] = main_term(inputs[b], params.main[b], k, pad)
        out[b] = cache[key]
    return out


def message_term(h: Tensor, w: Parameter, kind: str, path: str) -> Tensor:
    src = h.shape[1]
    if w.shape[1] != src:
        raise DimensionError(f"message {path}: source width {src} does not match matrix {w.shape}")
    if kind == "fc":
        return linear(h, w, None, label=f"msg[{path}]")
    return conv2d(h, w, None, label=f"msg[{path}]")


def plain_layer(x: BranchFeatures, params: PmpsLayerParams) -> BranchFeatures:
    """Three independent branches, no messages."""
    pre = branch_pre(x, params)
    acts: dict[int, Tensor] = {}
    for b in BRANCHES:
        if id(pre[b]) not in acts:
            acts[id(pre[b])] = relu(pre[b])
    return BranchFeatures(*(acts[id(pre[b])] for b in BRANCHES))


def _check_dst(term: Tensor, msg: Tensor, path: str):
    if term.shape != msg.shape:
        raise DimensionError(f"message {path}: output {msg.shape} does not match destination {term.shape}")


def gather_layer(x: BranchFeatures, h_subject: Tensor, h_object: Tensor, params: PmpsLayerParams) -> Tensor:
    """Predicate features at layer ``l`` from its own input plus subject/object messages."""
    k = params.kind
    pre = main_term(x.predicate, params.main["predicate"], k, params.pad)
    from_s = message_term(h_subject, params.messages["p<-s"], k, "p<-s")
    from_o = message_term(h_object, params.messages["p<-o"], k, "p<-o")
    _check_dst(pre, from_s, "p<-s")
    _check_dst(pre, from_o, "p<-o")
    return relu(pre + from_s + from_o)


def broadcast_layer(x: BranchFeatures, h_predicate: Tensor, params: PmpsLayerParams) -> tuple[Tensor, Tensor]:
    """Subject and object features at layer ``l+1`` with the predicate's message."""
    k = params.kind
    outs = []
    for branch, path in (("subject", "s<-p"), ("object", "o<-p")):
        pre = main_term(getattr(x, branch), params.main[branch], k, params.pad)
        msg = message_term(h_predicate, params.messages[path], k, path)
        _check_dst(pre, msg, path)
        outs.append(relu(pre + msg))
    return outs[0], outs[1]


# ------------------------------------------------------------------- forms

def sequential_pmps(x: BranchFeatures, first: PmpsLayerParams, second: PmpsLayerParams) -> BranchFeatures:
    """Gather at ``first`` then broadcast at ``second``."""
    k, pad = first.kind, first.pad
    h_s = relu(main_term(x.subject, first.main["subject"], k, pad))
    h_o = relu(main_term(x.object, first.main["object"], k, pad))
    h_p = gather_layer(x, h_s, h_o, first)
    mid = BranchFeatures(h_s, h_p, h_o)
    h_p2 = relu(main_term(h_p, second.main["predicate"], second.kind, second.pad))
    h_s2, h_o2 = broadcast_layer(mid, h_p2, second)
    return BranchFeatures(h_s2, h_p2, h_o2)


def parallel_pmps(x: BranchFeatures, params: PmpsLayerParams) -> BranchFeatures:
    """One layer split into a gather sub-branch and a broadcast sub-branch."""
    g = params.gather_width
    width = params.out_width
    if g is None:
        raise ConfigError("parallel PMPS needs a gather_width")
    check_split(g, width - g, width)
    k = params.kind
    pre = branch_pre(x, params)
    part = (slice(None), slice(0, g))
    rest = (slice(None), slice(g, width))
    # gather sub-branch
    hs_g = relu(pre["subject"][part])
    ho_g = relu(pre["object"][part])
    from_s = message_term(hs_g, params.messages["p<-s"], k, "p<-s")
    from_o = message_term(ho_g, params.messages["p<-o"], k, "p<-o")
    hp_g = relu(pre["predicate"][part] + from_s + from_o)
    # broadcast sub-branch
    hp_b = relu(pre["predicate"][rest])
    hs_b = relu(pre["subject"][rest] + message_term(hp_b, params.messages["s<-p"], k, "s<-p"))
    ho_b = relu(pre["object"][rest] + message_term(hp_b, params.messages["o<-p"], k, "o<-p"))
    return BranchFeatures(concat([hs_g, hs_b], axis=1), concat([hp_g, hp_b], axis=1),
                          concat([ho_g, ho_b], axis=1))

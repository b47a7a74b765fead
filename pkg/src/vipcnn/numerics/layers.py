"""Differentiable layers: fc, conv, ReLU, max/ROI pooling and the two losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, InvalidInput
from .tensor import Parameter, Tensor, as_tensor, default_dtype, make_result


@dataclass
class LayerParams:
    """Weight/bias pair of one fc or conv layer.

    fc weights are ``(out, in)``; conv weights are ``(out_ch, in_ch, kh, kw)``.
    """

    weight: Parameter
    bias: Parameter
    identifier: str

    @classmethod
    def init_fc(cls, identifier: str, n_in: int, n_out: int, rng: np.random.Generator,
                zero: bool = False, dtype=None) -> "LayerParams":
        return cls._init(identifier, (n_out, n_in), n_in, rng, zero, dtype)

    @classmethod
    def init_conv(cls, identifier: str, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                  zero: bool = False, dtype=None) -> "LayerParams":
        return cls._init(identifier, (c_out, c_in, k, k), c_in * k * k, rng, zero, dtype)

    @classmethod
    def _init(cls, identifier, shape, fan_in, rng, zero, dtype):
        dtype = dtype or default_dtype()
        if zero:
            w = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=shape)
        return cls(Parameter(w.astype(dtype), name=f"{identifier}.weight"),
                   Parameter(np.zeros(shape[0], dtype=dtype), name=f"{identifier}.bias"),
                   identifier)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


# ----------------------------------------------------------------- fc / conv

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, label: str = "fc") -> Tensor:
    """``y = x W^T + b`` for ``x`` of shape ``(batch, in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"{label}: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"{label}: bias {bias.shape} does not match weight {weight.shape}")
    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return make_result(data, parents, backward)


def fc_forward(x: Tensor, p: LayerParams) -> Tensor:
    return linear(x, p.weight, p.bias, label=p.identifier)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
           label: str = "conv") -> Tensor:
    """Cross-correlation of ``x`` ``(b, c, h, w)`` with ``weight`` ``(o, c, kh, kw)``."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"{label}: input {x.shape} incompatible with weight {weight.shape}")
    b, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise DimensionError(f"{label}: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        data = np.einsum("bchw,oc->bohw", cols, weight.data[:, :, 0, 0], optimize=True)
    else:
        # im2col: rows are output positions, columns (c, kh, kw) taps
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * kh * kw)
        wmat = weight.data.reshape(o, -1)
        data = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        data = data + bias.data[None, :, None, None]
    data = np.ascontiguousarray(data)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if kh == 1 and kw == 1:
            if weight.requires_grad:
                weight._accumulate(np.einsum("bohw,bchw->oc", g, cols, optimize=True)[:, :, None, None])
        else:
            gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
            if weight.requires_grad:
                weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            if kh == 1 and kw == 1:
                contrib = np.einsum("bohw,oc->bchw", g, weight.data[:, :, 0, 0], optimize=True)
                gxp[:, :, :stride * ho:stride, :stride * wo:stride] += contrib
            else:
                gcols = (gmat @ weight.data.reshape(o, -1)).reshape(b, ho, wo, c, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accumulate(gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp)

    return make_result(data, parents, backward)


def conv2d_forward(x: Tensor, p: LayerParams, stride: int = 1, pad: int = 0) -> Tensor:
    return conv2d(x, p.weight, p.bias, stride, pad, label=p.identifier)


# ------------------------------------------------------------ nonlinearities

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        x._accumulate(g * mask)

    return make_result(data, (x,), backward)


def max_pool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or k
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects (b, c, h, w), got {x.shape}")
    b, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"pooling window {k} exceeds input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                sel = arg == (i * k + j)
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * sel
        x._accumulate(gx)

    return make_result(data, (x,), backward)


# --------------------------------------------------------------- ROI pooling

def _round_half_up(v):
    return np.floor(v + 0.5).astype(np.int64)


def roi_grid(rois: np.ndarray, spatial_scale: float, fh: int, fw: int) -> np.ndarray:
    """Snap image-space ROIs to integer feature cells ``[x1, y1, x2, y2)``.

    ``x1, y1`` are floored and ``x2, y2`` ceiled after scaling, then clipped
    to the map.  Raises if a ROI ends up with no cells.
    """
    r = np.asarray(rois, dtype=np.float64).reshape(-1, 4) * spatial_scale
    g = np.empty(r.shape, dtype=np.int64)
    g[:, 0] = np.clip(np.floor(r[:, 0]), 0, fw)
    g[:, 1] = np.clip(np.floor(r[:, 1]), 0, fh)
    g[:, 2] = np.clip(np.ceil(r[:, 2]), 0, fw)
    g[:, 3] = np.clip(np.ceil(r[:, 3]), 0, fh)
    bad = (g[:, 2] <= g[:, 0]) | (g[:, 3] <= g[:, 1])
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise InvalidInput(f"ROI {i} {np.asarray(rois).reshape(-1, 4)[i].tolist()} lies outside the feature map")
    return g


def _bin_of(start, length, n_bins, positions):
    # edges start + round(i * length / n_bins); a position's bin counts the inner edges at or below it
    inner = start[:, None] + _round_half_up(np.arange(1, n_bins)[None, :] * length[:, None] / n_bins)
    return (inner[:, :, None] <= positions[None, None, :]).sum(axis=1)


def roi_pool(feat: Tensor, rois: np.ndarray, spatial_scale: float, out_h: int, out_w: int,
             batch_index: np.ndarray | None = None) -> Tensor:
    """Max ROI pooling to ``(R, C, out_h, out_w)``.

    ``feat`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``batch_index`` picks the
    image of each ROI.  Bins whose rounded edges coincide are empty and
    yield 0 with no gradient.
    """
    squeeze = feat.ndim == 3
    fdata = feat.data[None] if squeeze else feat.data
    if fdata.ndim != 4:
        raise DimensionError(f"roi_pool expects (C, H, W) or (B, C, H, W), got {feat.shape}")
    nb_img, c, fh, fw = fdata.shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    n = len(rois)
    bidx = np.zeros(n, dtype=np.int64) if batch_index is None else np.asarray(batch_index, dtype=np.int64)
    grid = roi_grid(rois, spatial_scale, fh, fw)
    nbins = out_h * out_w
    ys = np.arange(fh)
    xs = np.arange(fw)
    rowbin = _bin_of(grid[:, 1], grid[:, 3] - grid[:, 1], out_h, ys)
    colbin = _bin_of(grid[:, 0], grid[:, 2] - grid[:, 0], out_w, xs)
    rowin = (ys[None] >= grid[:, 1:2]) & (ys[None] < grid[:, 3:4])
    colin = (xs[None] >= grid[:, 0:1]) & (xs[None] < grid[:, 2:3])
    inside = (rowin[:, :, None] & colin[:, None, :]).reshape(n, -1)
    cellbin = (rowbin[:, :, None] * out_w + colbin[:, None, :]).reshape(n, -1)
    r_id, cell = np.nonzero(inside)
    key = r_id * nbins + cellbin[r_id, cell]
    order = np.argsort(key, kind="stable")
    key, cell, r_id = key[order], cell[order], r_id[order]
    counts = np.bincount(key, minlength=n * nbins)
    nonempty = np.flatnonzero(counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])[nonempty]

    flat = fdata.reshape(nb_img, c, fh * fw)
    vals = flat[bidx[r_id], :, cell]  # (M, C)
    seg_max = np.maximum.reduceat(vals, starts, axis=0)
    out = np.zeros((n * nbins, c), dtype=fdata.dtype)
    out[nonempty] = seg_max
    data = out.reshape(n, out_h, out_w, c).transpose(0, 3, 1, 2)
    data = np.ascontiguousarray(data)

    def backward(g):
        m = len(vals)
        rep = np.repeat(seg_max, counts[nonempty], axis=0)
        pos = np.where(vals == rep, np.arange(m)[:, None], m)
        first = np.minimum.reduceat(pos, starts, axis=0)  # (S, C) positions of first argmax
        src_cell = cell[first]
        src_img = bidx[r_id[first]]
        chan = np.arange(c)[None, :]
        lin = (src_img * c + chan) * (fh * fw) + src_cell
        gseg = g.transpose(0, 2, 3, 1).reshape(n * nbins, c)[nonempty]
        gf = np.bincount(lin.ravel(), weights=gseg.ravel().astype(np.float64),
                         minlength=nb_img * c * fh * fw).astype(fdata.dtype)
        gf = gf.reshape(nb_img, c, fh, fw)
        feat._accumulate(gf[0] if squeeze else gf)

    return make_result(data, (feat,), backward)


# --------------------------------------------------------------------- losses

def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_np(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise DimensionError(f"logits {logits.shape} vs {len(labels)} labels")
    k = logits.shape[1]
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise InvalidInput(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    n = len(labels)
    if n == 0:
        return make_result(np.zeros((), dtype=logits.dtype), (logits,), lambda g: None)
    logp = log_softmax_np(logits.data)
    data = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(g * p / n)

    return make_result(data, (logits,), backward)


def smooth_l1(pred: Tensor, target, mask=None) -> Tensor:
    """Smooth-L1 (transition at 1) averaged over unmasked elements; 0 if none."""
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise DimensionError(f"smooth_l1: pred {pred.shape} vs target {target.shape}")
    m = np.ones(pred.shape, dtype=pred.dtype) if mask is None else np.broadcast_to(
        np.asarray(mask, dtype=pred.dtype), pred.shape)
    count = float(m.sum())
    d = pred.data - target.data
    ad = np.abs(d)
    elt = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    scale = 1.0 / count if count > 0 else 0.0
    data = np.asarray((elt * m).sum() * scale, dtype=pred.dtype)

    def backward(g):
        gd = np.where(ad < 1.0, d, np.sign(d)) * m * (g * scale)
        if pred.requires_grad:
            pred._accumulate(gd)
        if target.requires_grad:
            target._accumulate(-gd)

    return make_result(data, (pred, target), backward)


def select_class_offsets(offsets: Tensor, classes) -> Tensor:
    """Pick the 4 offsets of ``classes[i]`` from ``(R, K * 4)`` class-specific outputs."""
    classes = np.asarray(classes, dtype=np.int64)
    r = offsets.shape[0]
    return offsets.reshape(r, -1, 4)[np.arange(r), classes]

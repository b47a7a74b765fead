"""The desk-scale three-branch detector.

Topology: shared conv trunk -> per-branch conv stack (parallel PMPS at the
last conv layer) -> per-branch ROI pooling -> two fc layers (sequential PMPS)
-> per-branch classification and class-specific box regression heads.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from PIL import Image

from . import pmps
from .errors import ConfigError, DimensionError, InvalidInput
from .geometry import Box, Triplet, TripletArrays, decode_array, encode_array
from .numerics import LayerParams, Parameter, Tensor, conv2d_forward, fc_forward, max_pool2d, no_grad, relu, \
    roi_pool, softmax_np
from .numerics.layers import log_softmax_np, roi_grid
from .pmps import BranchFeatures

log = logging.getLogger(__name__)

PIXEL_MEAN = 127.5
PIXEL_SCALE = 1.0 / 64.0


@dataclass
class ModelConfig:
    n_obj: int = 6
    n_pred: int = 6
    image_size: int = 64  # shorter side after preprocessing
    trunk: tuple[int, ...] = (16, 32, 32)
    trunk_pool: tuple[bool, ...] = (True, True, False)
    branch_convs: tuple[int, ...] = (32,)
    roi_size: int = 4
    fc_widths: tuple[int, int] = (128, 128)
    pmps_conv: bool = True  # parallel form at the last branch conv layer
    pmps_fc: bool = True  # sequential form across fc1/fc2
    gather_fraction: float = 0.5
    tie_subject_object: bool = True
    tie_scope: str = "all"  # "all" or "fc"
    word_vector_dim: int = 0
    seed: int = 0

    def __post_init__(self):
        self.trunk = tuple(self.trunk)
        self.trunk_pool = tuple(self.trunk_pool)
        self.branch_convs = tuple(self.branch_convs)
        self.fc_widths = tuple(self.fc_widths)
        if len(self.trunk) != len(self.trunk_pool):
            raise ConfigError("trunk and trunk_pool must have equal length")
        if not self.branch_convs:
            raise ConfigError("at least one branch conv layer is required")
        if len(self.fc_widths) != 2:
            raise ConfigError("exactly two fc layers are supported")
        if self.n_obj < 1 or self.n_pred < 1:
            raise ConfigError("need at least one object and one predicate class")
        if self.tie_scope not in ("all", "fc"):
            raise ConfigError(f"unknown tie_scope {self.tie_scope!r}")
        if not 0.0 < self.gather_fraction < 1.0:
            raise ConfigError("gather_fraction must lie in (0, 1)")

    @property
    def stride(self) -> int:
        return 2 ** sum(self.trunk_pool)

    @property
    def has_messages(self) -> bool:
        return self.pmps_conv or self.pmps_fc


class RoiBatch(NamedTuple):
    """Triplet ROIs in preprocessed-image coordinates."""

    batch_index: np.ndarray
    subjects: np.ndarray
    predicates: np.ndarray
    objects: np.ndarray

    def __len__(self):
        return len(self.batch_index)


@dataclass
class BranchOutputs:
    logits: dict[str, Tensor]
    offsets: dict[str, Tensor]
    features: BranchFeatures


@dataclass
class Detection:
    """Model output for one triplet.  Class 0 is background in every distribution.

    ``*_offsets`` have one row per foreground class: row ``c - 1`` belongs to
    class ``c``.
    """

    triplet: Triplet
    subject_probs: np.ndarray
    predicate_probs: np.ndarray
    object_probs: np.ndarray
    subject_offsets: np.ndarray
    predicate_offsets: np.ndarray
    object_offsets: np.ndarray
    image_size: tuple[float, float] | None = None

    def phrase_score(self, s: int, p: int, o: int) -> float:
        return float(self.subject_probs[s] * self.predicate_probs[p] * self.object_probs[o])


class PhrasePrediction(NamedTuple):
    subject: int
    predicate: int
    object: int
    score: float


class RefinedBoxes(NamedTuple):
    subject: Box
    predicate: Box
    object: Box


# --------------------------------------------------------------- preprocess

def preprocess(image: np.ndarray, target: int = 64) -> tuple[Tensor, float]:
    """Resize so the shorter side is ``target`` and normalize; returns ``(tensor, scale)``.

    ``scale`` maps original pixel coordinates onto the resized image.
    """
    arr = np.asarray(image)
    if arr.size == 0 or arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidInput(f"empty or malformed image with shape {arr.shape}")
    h, w = arr.shape[:2]
    scale = target / min(h, w)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    if (nh, nw) != (h, w):
        arr = np.asarray(Image.fromarray(arr.astype(np.uint8)).resize((nw, nh), Image.BILINEAR))
    x = (arr.astype(np.float32) - PIXEL_MEAN) * PIXEL_SCALE
    return Tensor(x.transpose(2, 0, 1)[None].copy()), scale


# -------------------------------------------------------------------- model

class ViPModel:
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        self.messages_enabled = cfg.has_messages
        rng = np.random.default_rng(cfg.seed)
        dt = self.dtype
        self.trunk: list[LayerParams] = []
        c_in = 3
        for i, c in enumerate(cfg.trunk):
            self.trunk.append(LayerParams.init_conv(f"trunk.{i}", c_in, c, 3, rng, dtype=dt))
            c_in = c
        tie_conv = cfg.tie_subject_object and cfg.tie_scope == "all"
        self.branch_conv: list[pmps.PmpsLayerParams] = []
        n = len(cfg.branch_convs)
        for i, c in enumerate(cfg.branch_convs):
            last = i == n - 1
            msgs = "parallel" if (last and cfg.pmps_conv) else None
            gw = max(1, int(round(c * cfg.gather_fraction))) if msgs else None
            self.branch_conv.append(pmps.init_layer(f"conv{i}", "conv", c_in, c, rng, tie=tie_conv,
                                                    messages=msgs, gather_width=gw, dtype=dt))
            c_in = c
        tie_fc = cfg.tie_subject_object
        flat = c_in * cfg.roi_size * cfg.roi_size
        w1, w2 = cfg.fc_widths
        self.fc1 = pmps.init_layer("fc1", "fc", flat, w1, rng, tie=tie_fc,
                                   messages="gather" if cfg.pmps_fc else None, dtype=dt)
        self.fc2 = pmps.init_layer("fc2", "fc", w1, w2, rng, tie=tie_fc,
                                   messages="broadcast" if cfg.pmps_fc else None, dtype=dt)
        n_classes = {"subject": cfg.n_obj + 1, "predicate": cfg.n_pred + 1, "object": cfg.n_obj + 1}
        self.cls_head: dict[str, LayerParams] = {}
        self.reg_head: dict[str, LayerParams] = {}
        self.wv_head: dict[str, LayerParams] = {}
        for b in ("subject", "predicate", "object"):
            if b == "object" and tie_fc:
                for heads in (self.cls_head, self.reg_head):
                    heads["object"] = heads["subject"]
                continue
            tag = {"subject": "so" if tie_fc else "s", "predicate": "p", "object": "o"}[b]
            self.cls_head[b] = self._head(f"cls.{tag}", w2, n_classes[b], rng)
            self.reg_head[b] = self._head(f"reg.{tag}", w2, 4 * (n_classes[b] - 1), rng, std=0.001)
        if cfg.word_vector_dim:
            for b in ("subject", "predicate", "object"):
                if b == "object" and tie_fc:
                    self.wv_head["object"] = self.wv_head["subject"]
                    continue
                tag = {"subject": "so" if tie_fc else "s", "predicate": "p", "object": "o"}[b]
                self.wv_head[b] = self._head(f"wv.{tag}", w2, cfg.word_vector_dim, rng)

    def _head(self, name, n_in, n_out, rng, std=0.01):
        w = rng.normal(0.0, std, size=(n_out, n_in)).astype(self.dtype)
        return LayerParams(Parameter(w, name=f"{name}.weight"),
                           Parameter(np.zeros(n_out, dtype=self.dtype), name=f"{name}.bias"), name)

    # -- parameter bookkeeping
    def _all_layers(self):
        yield from self.trunk
        for layer in (*self.branch_conv, self.fc1, self.fc2):
            yield from layer.main.values()
        for heads in (self.cls_head, self.reg_head, self.wv_head):
            yield from heads.values()

    def named_parameters(self) -> dict[str, Parameter]:
        """Unique parameters by name; tied subject/object tensors appear once."""
        out: dict[str, Parameter] = {}
        seen = set()
        params = [p for lp in self._all_layers() for p in lp.parameters()]
        for layer in (*self.branch_conv, self.fc1, self.fc2):
            params.extend(layer.message_parameters())
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                out[p.name] = p
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def message_parameters(self) -> list[Parameter]:
        return [p for layer in (*self.branch_conv, self.fc1, self.fc2) for p in layer.message_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        """Parameters that receive updates in the current mode (messages only when enabled)."""
        msg = {id(p) for p in self.message_parameters()}
        return [p for p in self.parameters() if self.messages_enabled or id(p) not in msg]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if strict and missing:
            raise InvalidInput(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, arr in state.items():
            if k not in params:
                if strict:
                    raise InvalidInput(f"unexpected parameter {k!r} in checkpoint")
                continue
            if params[k].shape != tuple(arr.shape):
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} vs model {params[k].shape}")
            params[k].data[...] = arr

    def zero_messages(self):
        for p in self.message_parameters():
            p.data[...] = 0

    # -- forward
    def feature_maps(self, images: Tensor) -> BranchFeatures:
        x = images
        for lp, pool in zip(self.trunk, self.cfg.trunk_pool):
            x = relu(conv2d_forward(x, lp, pad=1))
            if pool:
                x = max_pool2d(x, 2)
        feats = BranchFeatures(x, x, x)
        n = len(self.branch_conv)
        for i, layer in enumerate(self.branch_conv):
            if i == n - 1 and layer.messages and self.messages_enabled:
                feats = pmps.parallel_pmps(feats, layer)
            else:
                feats = pmps.plain_layer(feats, layer)
        return feats

    def forward(self, images: Tensor, rois: RoiBatch, maps: BranchFeatures | None = None) -> BranchOutputs:
        cfg = self.cfg
        if maps is None:
            maps = self.feature_maps(images)
        scale = 1.0 / cfg.stride
        k = cfg.roi_size
        pooled = {}
        for b, boxes in (("subject", rois.subjects), ("predicate", rois.predicates), ("object", rois.objects)):
            p = roi_pool(getattr(maps, b), boxes, scale, k, k, batch_index=rois.batch_index)
            pooled[b] = p.reshape(len(rois), -1)
        x = BranchFeatures(pooled["subject"], pooled["predicate"], pooled["object"])
        if self.fc1.messages and self.messages_enabled:
            h = pmps.sequential_pmps(x, self.fc1, self.fc2)
        else:
            h = pmps.plain_layer(pmps.plain_layer(x, self.fc1), self.fc2)
        logits = {b: fc_forward(getattr(h, b), self.cls_head[b]) for b in pmps.BRANCHES}
        offsets = {b: fc_forward(getattr(h, b), self.reg_head[b]) for b in pmps.BRANCHES}
        return BranchOutputs(logits, offsets, h)

    # -- inference
    def predict_arrays(self, image: Tensor, triplets: TripletArrays, scale: float = 1.0,
                       chunk: int = 4096) -> dict[str, np.ndarray]:
        """Probabilities and per-class offsets for every triplet of one image.

        Triplet boxes are in original image coordinates; ``scale`` maps them
        onto ``image``.  Returns arrays keyed ``{branch}_probs`` ``(n, K)`` and
        ``{branch}_offsets`` ``(n, K - 1, 4)``.
        """
        n = len(triplets)
        out = {f"{b}_{kind}": [] for b in pmps.BRANCHES for kind in ("probs", "offsets")}
        with no_grad():
            maps = self.feature_maps(image)
            for lo in range(0, n, chunk):
                sl = slice(lo, min(n, lo + chunk))
                m = sl.stop - sl.start
                rois = RoiBatch(np.zeros(m, dtype=np.int64), triplets.subjects[sl] * scale,
                                triplets.predicates[sl] * scale, triplets.objects[sl] * scale)
                res = self.forward(image, rois, maps)
                for b in pmps.BRANCHES:
                    out[f"{b}_probs"].append(softmax_np(res.logits[b].data.astype(np.float64)))
                    out[f"{b}_offsets"].append(res.offsets[b].data.astype(np.float64).reshape(m, -1, 4))
        n_cls = {"subject": self.cfg.n_obj + 1, "predicate": self.cfg.n_pred + 1, "object": self.cfg.n_obj + 1}
        final = {}
        for b in pmps.BRANCHES:
            k = n_cls[b]
            final[f"{b}_probs"] = np.concatenate(out[f"{b}_probs"]) if n else np.zeros((0, k))
            final[f"{b}_offsets"] = np.concatenate(out[f"{b}_offsets"]) if n else np.zeros((0, k - 1, 4))
        return final

    def detect(self, image: np.ndarray, triplets) -> list[Detection | None]:
        """One :class:`Detection` per input triplet; triplets that fall outside
        the image after scaling are logged and returned as ``None``."""
        tensor, scale = preprocess(image, self.cfg.image_size)
        arr = triplets if isinstance(triplets, TripletArrays) else TripletArrays.from_triplets(triplets)
        fh = tensor.shape[2] // self.cfg.stride
        fw = tensor.shape[3] // self.cfg.stride
        valid = np.ones(len(arr), dtype=bool)
        for i in range(len(arr)):
            try:
                roi_grid(np.stack([arr.subjects[i], arr.predicates[i], arr.objects[i]]) * scale,
                         1.0 / self.cfg.stride, fh, fw)
            except InvalidInput:
                valid[i] = False
        if not valid.all():
            log.warning("skipping %d triplet(s) outside the image: %s", (~valid).sum(),
                        np.flatnonzero(~valid).tolist()[:10])
        keep = np.flatnonzero(valid)
        res = self.predict_arrays(tensor, arr.take(keep), scale)
        h, w = np.asarray(image).shape[:2]
        dets: list[Detection | None] = [None] * len(arr)
        for j, i in enumerate(keep):
            dets[i] = Detection(arr[int(i)], res["subject_probs"][j], res["predicate_probs"][j],
                                res["object_probs"][j], res["subject_offsets"][j], res["predicate_offsets"][j],
                                res["object_offsets"][j], image_size=(float(w), float(h)))
        return dets


# --------------------------------------------------------- phrase scoring

def top_phrase_predictions(d: Detection, k: int) -> list[PhrasePrediction]:
    """The ``k`` best foreground ``(s, p, o)`` triples by product score.

    Scores are combined in log space; equal scores keep lexicographic label
    order.  Returns every triple when ``k`` exceeds the label space.
    """
    if k < 1:
        raise InvalidInput("k must be >= 1")
    with np.errstate(divide="ignore"):
        ls = np.log(np.asarray(d.subject_probs, dtype=np.float64)[1:])
        lp = np.log(np.asarray(d.predicate_probs, dtype=np.float64)[1:])
        lo = np.log(np.asarray(d.object_probs, dtype=np.float64)[1:])
    total = ls[:, None, None] + lp[None, :, None] + lo[None, None, :]
    flat = total.reshape(-1)
    order = np.argsort(-flat, kind="stable")[:k]  # C-order flattening is lexicographic in (s, p, o)
    out = []
    for idx in order:
        s, p, o = np.unravel_index(idx, total.shape)
        out.append(PhrasePrediction(int(s) + 1, int(p) + 1, int(o) + 1, float(np.exp(flat[idx]))))
    return out


def best_phrase_arrays(probs_s: np.ndarray, probs_p: np.ndarray, probs_o: np.ndarray):
    """Top-1 foreground triple per row; returns ``(s, p, o, log_score)`` arrays."""
    with np.errstate(divide="ignore"):
        ls, lp, lo = (np.log(a[:, 1:]) for a in (probs_s, probs_p, probs_o))
    s = ls.argmax(axis=1)
    p = lp.argmax(axis=1)
    o = lo.argmax(axis=1)
    r = np.arange(len(s))
    return s + 1, p + 1, o + 1, ls[r, s] + lp[r, p] + lo[r, o]


def regress_boxes(d: Detection, labels: tuple[int, int, int],
                  image_size: tuple[float, float] | None = None) -> RefinedBoxes:
    """Apply each branch's class-specific offsets for ``labels = (s, p, o)``."""
    s, p, o = labels
    if min(s, p, o) < 1:
        raise InvalidInput(f"cannot regress background labels {labels}")
    size = image_size or d.image_size
    out = []
    for box, offs, c in ((d.triplet.subject, d.subject_offsets, s), (d.triplet.predicate, d.predicate_offsets, p),
                         (d.triplet.object, d.object_offsets, o)):
        if c > len(offs):
            raise InvalidInput(f"label {c} beyond {len(offs)} foreground classes")
        boxes, _ = decode_array(box.as_array()[None], offs[c - 1][None], size)
        out.append(Box.from_array(boxes[0]))
    return RefinedBoxes(out[0], out[1], out[2])


def regression_targets(proposals: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return encode_array(proposals, gt)


def copy_main_parameters(src: ViPModel, dst: ViPModel):
    """Copy every non-message parameter present in both models by name."""
    sp = src.named_parameters()
    msg = {p.name for p in src.message_parameters()}
    for k, p in dst.named_parameters().items():
        if k in sp and k not in msg:
            p.data[...] = sp[k].data

"""Object proposals, pairing into triplets, and triplet NMS ahead of detection.

Two proposal sources exist: ``oracle-jitter`` perturbs ground-truth boxes
(isolating relationship detection from proposal quality), and
``anchor-scorer`` runs a small learned anchor classifier/regressor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, InvalidInput
from .geometry import (Box, TripletArrays, clip_array, decode_array, encode_array, greedy_nms, iou_matrix,
                       triplet_nms_arrays)
from .numerics import (SGD, LayerParams, Tensor, conv2d_forward, load_checkpoint, max_pool2d, no_grad, relu,
                       save_checkpoint, smooth_l1, softmax_cross_entropy, softmax_np)

log = logging.getLogger(__name__)


class ScoredBox(NamedTuple):
    box: Box
    objectness: float


@dataclass
class ProposalConfig:
    source: str = "oracle-jitter"
    top_n: int = 200
    nms_threshold: float = 0.25
    include_self_pairs: bool = True
    copies_per_box: int = 4
    center_std: float = 0.08  # fraction of box size
    scale_std: float = 0.08  # log-size noise
    n_random: int = 8
    box_nms: float | None = None  # optional greedy NMS over single boxes (anchor-scorer)

    def __post_init__(self):
        if self.source not in ("oracle-jitter", "anchor-scorer"):
            raise ConfigError(f"unknown proposal source {self.source!r}")
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1")
        if not 0.0 <= self.nms_threshold <= 1.0:
            raise ConfigError("nms_threshold must lie in [0, 1]")


class ProposalSet(NamedTuple):
    boxes: np.ndarray  # (n, 4), sorted by objectness, descending
    objectness: np.ndarray

    def __len__(self):
        return len(self.boxes)

    def scored(self) -> list[ScoredBox]:
        return [ScoredBox(Box.from_array(b), float(s)) for b, s in zip(self.boxes, self.objectness)]


def _rank(boxes: np.ndarray, scores: np.ndarray, top_n: int) -> ProposalSet:
    order = np.argsort(-scores, kind="stable")[:top_n]
    return ProposalSet(boxes[order], scores[order])


def oracle_jitter(gt_boxes: np.ndarray, image_size: tuple[float, float], cfg: ProposalConfig,
                  rng: np.random.Generator) -> ProposalSet:
    """Jittered copies of ground-truth boxes plus random boxes.

    Objectness is the best IoU with any ground-truth box, so an unperturbed
    copy scores exactly 1.  Identical boxes are merged.
    """
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt) == 0:
        raise InvalidInput("oracle-jitter proposals need ground-truth boxes")
    w, h = image_size
    cands = [gt]
    if cfg.copies_per_box > 1:
        rep = np.repeat(gt, cfg.copies_per_box - 1, axis=0)
        bw = rep[:, 2] - rep[:, 0]
        bh = rep[:, 3] - rep[:, 1]
        noise = rng.normal(size=(len(rep), 4))
        cx = 0.5 * (rep[:, 0] + rep[:, 2]) + cfg.center_std * bw * noise[:, 0]
        cy = 0.5 * (rep[:, 1] + rep[:, 3]) + cfg.center_std * bh * noise[:, 1]
        nw = bw * np.exp(cfg.scale_std * noise[:, 2])
        nh = bh * np.exp(cfg.scale_std * noise[:, 3])
        cands.append(np.stack([cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2], axis=1))
    if cfg.n_random:
        rw = rng.uniform(0.1, 0.5, size=cfg.n_random) * w
        rh = rng.uniform(0.1, 0.5, size=cfg.n_random) * h
        rx = rng.uniform(0, 1, size=cfg.n_random) * (w - rw)
        ry = rng.uniform(0, 1, size=cfg.n_random) * (h - rh)
        cands.append(np.stack([rx, ry, rx + rw, ry + rh], axis=1))
    boxes = clip_array(np.concatenate(cands), (w, h), min_size=1.0)
    _, first = np.unique(boxes, axis=0, return_index=True)
    boxes = boxes[np.sort(first)]
    scores = np.clip(iou_matrix(boxes, gt).max(axis=1), 0.0, 1.0)
    return _rank(boxes, scores, cfg.top_n)


def propose_boxes(image_size: tuple[float, float], cfg: ProposalConfig, gt_boxes=None, seed: int = 0,
                  image: np.ndarray | None = None, scorer: "AnchorScorer | None" = None) -> ProposalSet:
    """Scored object boxes, sorted by objectness and truncated to ``top_n``."""
    rng = np.random.default_rng(seed)
    if cfg.source == "oracle-jitter":
        if gt_boxes is None or len(gt_boxes) == 0:
            raise InvalidInput("oracle-jitter proposals need ground-truth boxes")
        return oracle_jitter(np.asarray(gt_boxes, dtype=np.float64), image_size, cfg, rng)
    if scorer is None or image is None:
        raise InvalidInput("anchor-scorer proposals need an image and a trained scorer")
    return scorer.propose(image, cfg)


def pair_into_triplets(boxes, include_self_pairs: bool = True) -> TripletArrays:
    """All ordered ``(subject, object)`` pairs; ``N**2`` of them with self-pairs."""
    if isinstance(boxes, ProposalSet):
        arr, scores = boxes.boxes, boxes.objectness
    else:
        boxes = list(boxes)
        arr = np.array([b.box.as_array() for b in boxes]).reshape(-1, 4)
        scores = np.array([b.objectness for b in boxes], dtype=np.float64)
    n = len(arr)
    if n == 0:
        raise InvalidInput("cannot pair an empty proposal list")
    si, oi = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    si, oi = si.reshape(-1), oi.reshape(-1)
    if not include_self_pairs:
        keep = si != oi
        si, oi = si[keep], oi[keep]
    return TripletArrays(arr[si], arr[oi], scores[si], scores[oi], si, oi)


def filter_triplets(triplets: TripletArrays, cfg: ProposalConfig) -> TripletArrays:
    """Triplet NMS at ``cfg.nms_threshold``; survivors ordered by score."""
    keep = triplet_nms_arrays(triplets.subjects, triplets.objects, triplets.scores, cfg.nms_threshold)
    return triplets.take(keep)


def write_proposals(path, records: Sequence[tuple[str, ProposalSet]]) -> None:
    """One line per box: ``image_id x1 y1 x2 y2 objectness`` (tab separated)."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, props in records:
            for b, s in zip(props.boxes, props.objectness):
                fh.write("\t".join([image_id, *(repr(float(v)) for v in b), repr(float(s))]) + "\n")


def read_proposals(path) -> dict[str, ProposalSet]:
    rows: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 6:
                raise InvalidInput(f"{path}:{lineno}: expected 6 fields")
            rows.setdefault(parts[0], []).append([float(v) for v in parts[1:]])
    return {k: ProposalSet(np.array(v)[:, :4], np.array(v)[:, 4]) for k, v in rows.items()}


# --------------------------------------------------------- anchor scorer

@dataclass
class AnchorConfig:
    size: float = 16.0
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    channels: tuple[int, int] = (8, 16)
    fg_iou: float = 0.5
    bg_iou: float = 0.3
    samples_per_image: int = 64
    pre_nms: int = 600
    nms: float = 0.7
    seed: int = 0


class AnchorScorer:
    """Single-scale anchors on a stride-4 grid with a tiny conv objectness/box head."""

    stride = 4

    def __init__(self, cfg: AnchorConfig | None = None):
        self.cfg = cfg or AnchorConfig()
        rng = np.random.default_rng(self.cfg.seed)
        c1, c2 = self.cfg.channels
        a = len(self.cfg.ratios)
        self.conv1 = LayerParams.init_conv("rpn.conv1", 3, c1, 3, rng)
        self.conv2 = LayerParams.init_conv("rpn.conv2", c1, c2, 3, rng)
        self.conv3 = LayerParams.init_conv("rpn.conv3", c2, c2, 3, rng)
        self.cls = LayerParams.init_conv("rpn.cls", c2, 2 * a, 1, rng)
        self.reg = LayerParams.init_conv("rpn.reg", c2, 4 * a, 1, rng)
        self.reg.weight.data *= 0.01

    def layers(self):
        return [self.conv1, self.conv2, self.conv3, self.cls, self.reg]

    def parameters(self):
        return [p for lp in self.layers() for p in lp.parameters()]

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def save(self, path):
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path, cfg: AnchorConfig | None = None) -> "AnchorScorer":
        scorer = cls(cfg)
        state = load_checkpoint(path)
        for p in scorer.parameters():
            if p.name not in state:
                raise InvalidInput(f"{path}: missing {p.name}")
            p.data[...] = state[p.name]
        return scorer

    def anchors(self, fh: int, fw: int) -> np.ndarray:
        """``(fh * fw * A, 4)`` anchors ordered (row, col, ratio)."""
        s = self.stride
        base = []
        for r in self.cfg.ratios:
            w = self.cfg.size / np.sqrt(r)
            h = self.cfg.size * np.sqrt(r)
            base.append([-w / 2, -h / 2, w / 2, h / 2])
        base = np.array(base)
        cy, cx = np.meshgrid((np.arange(fh) + 0.5) * s, (np.arange(fw) + 0.5) * s, indexing="ij")
        centers = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
        return (centers + base[None]).reshape(-1, 4)

    def _heads(self, x: Tensor):
        h = relu(conv2d_forward(x, self.conv1, pad=1))
        h = max_pool2d(h, 2)
        h = relu(conv2d_forward(h, self.conv2, pad=1))
        h = max_pool2d(h, 2)
        h = relu(conv2d_forward(h, self.conv3, pad=1))
        a = len(self.cfg.ratios)
        cls = conv2d_forward(h, self.cls)  # (1, 2A, fh, fw)
        reg = conv2d_forward(h, self.reg)  # (1, 4A, fh, fw)
        fh, fw = cls.shape[2], cls.shape[3]
        # to (fh * fw * A, 2) and (fh * fw * A, 4), matching anchors()
        cls = _to_rows(cls, a, 2)
        reg = _to_rows(reg, a, 4)
        return cls, reg, fh, fw

    def loss(self, image: np.ndarray, gt_boxes: np.ndarray, rng: np.random.Generator) -> Tensor:
        from .model import preprocess
        x, scale = preprocess(image, image.shape[0] if image.shape[0] <= image.shape[1] else image.shape[1])
        cls, reg, fh, fw = self._heads(x)
        anchors = self.anchors(fh, fw)
        ov = iou_matrix(anchors, gt_boxes)
        best = ov.argmax(axis=1)
        best_iou = ov.max(axis=1)
        labels = np.full(len(anchors), -1)
        labels[best_iou < self.cfg.bg_iou] = 0
        labels[best_iou >= self.cfg.fg_iou] = 1
        labels[ov.argmax(axis=0)] = 1
        fg = np.flatnonzero(labels == 1)
        bg = np.flatnonzero(labels == 0)
        n = self.cfg.samples_per_image
        fg = rng.permutation(fg)[: n // 2]
        bg = rng.permutation(bg)[: n - len(fg)]
        idx = np.concatenate([fg, bg])
        cls_loss = softmax_cross_entropy(cls[idx], labels[idx])
        if len(fg):
            targets = encode_array(anchors[fg], gt_boxes[best[fg]])
            reg_loss = smooth_l1(reg[fg], targets.astype(reg.dtype))
            return cls_loss + reg_loss
        return cls_loss

    def propose(self, image: np.ndarray, cfg: ProposalConfig) -> ProposalSet:
        from .model import preprocess
        h, w = image.shape[:2]
        x, scale = preprocess(image, min(h, w))
        with no_grad():
            cls, reg, fh, fw = self._heads(x)
        anchors = self.anchors(fh, fw)
        scores = softmax_np(cls.data.astype(np.float64))[:, 1]
        boxes, _ = decode_array(anchors, reg.data.astype(np.float64), (w, h))
        order = np.argsort(-scores, kind="stable")[: self.cfg.pre_nms]
        boxes, scores = boxes[order], scores[order]
        keep = greedy_nms(boxes, scores, cfg.box_nms if cfg.box_nms is not None else self.cfg.nms)
        return _rank(boxes[keep], scores[keep], cfg.top_n)


def _to_rows(t: Tensor, a: int, k: int) -> Tensor:
    # (1, A*k, fh, fw) -> (fh*fw*A, k) via a differentiable transpose
    from .numerics.tensor import make_result
    _, _, fh, fw = t.shape
    data = t.data[0].reshape(a, k, fh, fw).transpose(2, 3, 0, 1).reshape(-1, k)

    def backward(g):
        t._accumulate(g.reshape(fh, fw, a, k).transpose(2, 3, 0, 1).reshape(1, a * k, fh, fw))

    return make_result(np.ascontiguousarray(data), (t,), backward)


def train_anchor_scorer(images: Sequence[np.ndarray], gt_boxes: Sequence[np.ndarray], epochs: int = 3,
                        lr: float = 0.01, cfg: AnchorConfig | None = None, seed: int = 0) -> AnchorScorer:
    scorer = AnchorScorer(cfg)
    opt = SGD(scorer.parameters(), lr=lr, momentum=0.9)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        total = 0.0
        for i in rng.permutation(len(images)):
            opt.zero_grad()
            loss = scorer.loss(images[i], np.asarray(gt_boxes[i], dtype=np.float64), rng)
            loss.backward()
            opt.step()
            total += loss.item()
        log.info("anchor scorer epoch %d: mean loss %.4f", epoch, total / max(1, len(images)))
    return scorer


def clustered_proposals(n: int = 250, n_clusters: int = 10, image_size: tuple[float, float] = (64.0, 64.0),
                        spread: float = 0.1, seed: int = 0) -> ProposalSet:
    """``n`` proposals jittered around ``n_clusters`` object boxes, with random
    objectness; mimics the redundancy of a detector's raw proposals."""
    if n < 1 or n_clusters < 1:
        raise ConfigError("n and n_clusters must be >= 1")
    rng = np.random.default_rng(seed)
    w, h = image_size
    bw = rng.uniform(0.12, 0.4, n_clusters) * w
    bh = rng.uniform(0.12, 0.4, n_clusters) * h
    cx = rng.uniform(bw / 2, w - bw / 2)
    cy = rng.uniform(bh / 2, h - bh / 2)
    k = rng.integers(n_clusters, size=n)
    noise = rng.normal(size=(n, 4))
    x = cx[k] + spread * bw[k] * noise[:, 0]
    y = cy[k] + spread * bh[k] * noise[:, 1]
    nw = bw[k] * np.exp(spread * noise[:, 2])
    nh = bh[k] * np.exp(spread * noise[:, 3])
    boxes = clip_array(np.stack([x - nw / 2, y - nh / 2, x + nw / 2, y + nh / 2], axis=1), (w, h), min_size=1.0)
    return _rank(boxes, rng.uniform(0.05, 1.0, n), n)

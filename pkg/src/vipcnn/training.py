"""Label assignment, the multi-task loss and the two-stage training loop.

Stage 1 trains the three branches as independent detectors: each ROI of a
triplet is labeled by its own best ground-truth match.  Stage 2 switches on
message passing and labels a triplet foreground only when its subject,
predicate and object ROIs all overlap one ground-truth relationship.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import GroundTruth, Scene, Vocabulary
from .errors import ConfigError, DimensionError, InvalidInput, NonFiniteLoss
from .geometry import Box, BoxOffsets, Triplet, TripletArrays, encode_array, iou_matrix
from .model import BranchOutputs, RoiBatch, ViPModel, preprocess
from .numerics import (SGD, LayerParams, Tensor, fc_forward, save_checkpoint, select_class_offsets, smooth_l1,
                       softmax_cross_entropy)
from .numerics.tensor import as_tensor
from .proposal import ProposalConfig, pair_into_triplets, propose_boxes

log = logging.getLogger(__name__)

BRANCH_KEYS = ("subject", "predicate", "object")


@dataclass
class LossConfig:
    lam: float = 1.0
    fg_threshold: float = 0.5
    stage: int = 1
    target_mode: str = "class"  # or "word-vector"
    fg_fraction: float = 0.25

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0.0 < self.fg_threshold < 1.0:
            raise ConfigError("fg_threshold must lie in (0, 1)")
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.target_mode not in ("class", "word-vector"):
            raise ConfigError(f"unknown target_mode {self.target_mode!r}")
        if not 0.0 <= self.fg_fraction <= 1.0:
            raise ConfigError("fg_fraction must lie in [0, 1]")


@dataclass
class LabeledTriplet:
    triplet: Triplet
    u_s: int
    u_p: int
    u_o: int
    v_s: BoxOffsets | None
    v_p: BoxOffsets | None
    v_o: BoxOffsets | None


# ------------------------------------------------------------------- labels

def label_arrays(triplets: TripletArrays, gt: GroundTruth, stage: int,
                 fg_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Class targets ``u`` ``(n, 3)`` and regression targets ``v`` ``(n, 3, 4)``.

    Column order is subject, predicate, object; ``v`` rows are zero where
    the matching ``u`` is background.
    """
    n = len(triplets)
    u = np.zeros((n, 3), dtype=np.int64)
    v = np.zeros((n, 3, 4))
    if n == 0 or len(gt) == 0:
        return u, v
    props = (triplets.subjects, triplets.predicates, triplets.objects)
    gts = (gt.subjects, gt.unions, gt.objects)
    ovs = [iou_matrix(p, g) for p, g in zip(props, gts)]
    if stage == 1:
        for k in range(3):
            best = ovs[k].argmax(axis=1)
            fg = ovs[k][np.arange(n), best] >= fg_threshold
            u[fg, k] = gt.labels[best[fg], k]
            if fg.any():
                v[fg, k] = encode_array(props[k][fg], gts[k][best[fg]])
    elif stage == 2:
        ok = (ovs[0] >= fg_threshold) & (ovs[1] >= fg_threshold) & (ovs[2] >= fg_threshold)
        quality = np.where(ok, ovs[0] + ovs[1] + ovs[2], -np.inf)
        best = quality.argmax(axis=1)
        fg = ok.any(axis=1)
        u[fg] = gt.labels[best[fg]]
        for k in range(3):
            if fg.any():
                v[fg, k] = encode_array(props[k][fg], gts[k][best[fg]])
    else:
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    return u, v


def _single(triplet: Triplet, gt: GroundTruth, stage: int, cfg: LossConfig) -> LabeledTriplet:
    u, v = label_arrays(TripletArrays.from_triplets([triplet]), gt, stage, cfg.fg_threshold)
    offs = [BoxOffsets.from_array(v[0, k]) if u[0, k] >= 1 else None for k in range(3)]
    return LabeledTriplet(triplet, int(u[0, 0]), int(u[0, 1]), int(u[0, 2]), *offs)


def assign_labels_stage1(triplet: Triplet, gt: GroundTruth, cfg: LossConfig) -> LabeledTriplet:
    if cfg.stage != 1:
        raise ConfigError("assign_labels_stage1 needs a stage-1 LossConfig")
    return _single(triplet, gt, 1, cfg)


def assign_labels_stage2(triplet: Triplet, gt: GroundTruth, cfg: LossConfig) -> LabeledTriplet:
    if cfg.stage != 2:
        raise ConfigError("assign_labels_stage2 needs a stage-2 LossConfig")
    return _single(triplet, gt, 2, cfg)


# --------------------------------------------------------------------- loss

def multi_task_loss(outputs: BranchOutputs, u: np.ndarray, v: np.ndarray,
                    cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Sum over branches of softmax loss plus ``lam`` times gated smooth-L1.

    Only rows with ``u >= 1`` contribute to a branch's regression term, using
    the offsets predicted for class ``u``.
    """
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v)
    n = u.shape[0]
    if u.shape != (n, 3) or v.shape != (n, 3, 4):
        raise DimensionError(f"labels {u.shape} / targets {v.shape} do not form an (n, 3) batch")
    total = None
    terms = {}
    for k, b in enumerate(BRANCH_KEYS):
        logits = outputs.logits[b]
        if logits.shape[0] != n:
            raise DimensionError(f"{b}: {logits.shape[0]} predictions for {n} labels")
        cls = softmax_cross_entropy(logits, u[:, k])
        fg = u[:, k] >= 1
        sel = select_class_offsets(outputs.offsets[b], np.maximum(u[:, k] - 1, 0))
        mask = np.repeat(fg[:, None], 4, axis=1)
        reg = smooth_l1(sel, v[:, k].astype(sel.dtype), mask)
        part = cls + reg * cfg.lam
        total = part if total is None else total + part
        terms[f"cls_{b[0]}"] = cls.item()
        terms[f"reg_{b[0]}"] = reg.item()
    return total, terms


def word_vector_loss(features: Tensor, table, labels, head: LayerParams | None = None) -> Tensor:
    """Smooth-L1 between a linear projection of ``features`` and label embeddings.

    ``table`` maps label id to vector (mapping or 2-d array).  Without a
    ``head`` the features are compared directly.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = features if head is None else fc_forward(features, head)
    rows = []
    for lab in labels:
        if isinstance(table, Mapping):
            if int(lab) not in table:
                raise InvalidInput(f"no embedding for label {int(lab)}")
            rows.append(np.asarray(table[int(lab)], dtype=np.float64))
        else:
            if not 0 <= lab < len(table):
                raise InvalidInput(f"no embedding for label {int(lab)}")
            rows.append(np.asarray(table[lab], dtype=np.float64))
    target = np.array(rows).reshape(len(labels), -1) if rows else np.zeros((0, out.shape[1]))
    if target.shape != out.shape:
        raise DimensionError(f"embedding width {target.shape} vs head output {out.shape}")
    return smooth_l1(out, target.astype(out.dtype))


def load_embeddings(path, labels: Sequence[str]) -> np.ndarray:
    """``label<TAB>v1 v2 ...`` file -> ``(len(labels) + 1, d)`` table with a zero background row."""
    vecs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            name, _, rest = line.rstrip("\n").partition("\t")
            vecs[name] = np.array([float(x) for x in rest.split()])
    missing = [x for x in labels if x not in vecs]
    if missing:
        raise InvalidInput(f"{path}: no embedding for {missing}")
    dim = len(vecs[labels[0]])
    return np.vstack([np.zeros(dim)] + [vecs[x] for x in labels])


def word_vector_objective(model: ViPModel, outputs: BranchOutputs, u: np.ndarray, v: np.ndarray,
                          tables: Mapping[str, np.ndarray], cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Embedding regression in place of classification, plus the gated box term."""
    total = None
    terms = {}
    for k, b in enumerate(BRANCH_KEYS):
        table = tables["predicate" if b == "predicate" else "object"]
        wv = word_vector_loss(getattr(outputs.features, b), table, u[:, k], model.wv_head[b])
        fg = u[:, k] >= 1
        sel = select_class_offsets(outputs.offsets[b], np.maximum(u[:, k] - 1, 0))
        reg = smooth_l1(sel, v[:, k].astype(sel.dtype), np.repeat(fg[:, None], 4, axis=1))
        part = wv + reg * cfg.lam
        total = part if total is None else total + part
        terms[f"wv_{b[0]}"] = wv.item()
        terms[f"reg_{b[0]}"] = reg.item()
    return total, terms


# ------------------------------------------------------------ training loop

@dataclass
class TrainConfig:
    stage1_epochs: int = 6
    stage2_epochs: int = 6
    stages: str = "1"  # "1": stage 1 then 2; "2": stage 2 only; "1-only"
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_step: int = 0  # epochs between x0.1 decays (0 = constant)
    batch_images: int = 8
    triplets_per_image: int = 32
    frozen: tuple[str, ...] = ("trunk.0.*",)
    eval_every: int = 0  # epochs; 0 = end of each stage only
    max_val_images: int = 100
    seed: int = 0

    def __post_init__(self):
        self.frozen = tuple(self.frozen)
        if self.stages not in ("1", "2", "1-only"):
            raise ConfigError(f"stages must be '1', '2' or '1-only', got {self.stages!r}")
        if self.batch_images < 1 or self.triplets_per_image < 1:
            raise ConfigError("batch sizes must be >= 1")


@dataclass
class TrainResult:
    model: ViPModel
    metrics: list[dict] = field(default_factory=list)
    stage1_state: dict[str, np.ndarray] | None = None


def training_proposals() -> ProposalConfig:
    return ProposalConfig(top_n=24, copies_per_box=4, center_std=0.12, scale_std=0.12, n_random=4,
                          include_self_pairs=True)


class _ImageCache:
    def __init__(self, scenes: Sequence[Scene], vocab: Vocabulary, target: int):
        self.tensors = []
        self.scales = []
        self.gts = []
        for sc in scenes:
            t, s = preprocess(sc.image, target)
            self.tensors.append(t.data[0])
            self.scales.append(s)
            self.gts.append(GroundTruth.from_annotations(sc.relationships, vocab))
        self.sizes = [(sc.image.shape[1], sc.image.shape[0]) for sc in scenes]


def sample_batch(triplets: TripletArrays, u: np.ndarray, v: np.ndarray, n: int, fg_fraction: float,
                 stage: int, rng: np.random.Generator):
    fg_mask = (u >= 1).any(axis=1) if stage == 1 else (u >= 1).all(axis=1)
    fg = np.flatnonzero(fg_mask)
    bg = np.flatnonzero(~fg_mask)
    n_fg = min(len(fg), int(round(n * fg_fraction)))
    pick = np.concatenate([rng.permutation(fg)[:n_fg], rng.permutation(bg)[: n - n_fg]])
    if len(pick) < n and len(fg) > n_fg:
        pick = np.concatenate([pick, rng.permutation(fg)[n_fg: n_fg + n - len(pick)]])
    pick = np.sort(pick)
    return triplets.take(pick), u[pick], v[pick]


def build_batch(cache: _ImageCache, indices: Sequence[int], prop_cfg: ProposalConfig, loss_cfg: LossConfig,
                n_per_image: int, rng: np.random.Generator, epoch_seed):
    images, bidx, subj, pred, obj, us, vs = [], [], [], [], [], [], []
    for i in indices:
        gt = cache.gts[i]
        if len(gt) == 0:
            continue
        j = len(images)
        props = propose_boxes(cache.sizes[i], prop_cfg, gt.object_boxes(), seed=[*epoch_seed, int(i)])
        trips = pair_into_triplets(props, prop_cfg.include_self_pairs)
        u, v = label_arrays(trips, gt, loss_cfg.stage, loss_cfg.fg_threshold)
        trips, u, v = sample_batch(trips, u, v, n_per_image, loss_cfg.fg_fraction, loss_cfg.stage, rng)
        s = cache.scales[i]
        images.append(cache.tensors[i])
        bidx.append(np.full(len(trips), j))
        subj.append(trips.subjects * s)
        pred.append(trips.predicates * s)
        obj.append(trips.objects * s)
        us.append(u)
        vs.append(v)
    if not images:
        return None
    rois = RoiBatch(np.concatenate(bidx), np.concatenate(subj), np.concatenate(pred), np.concatenate(obj))
    return Tensor(np.stack(images)), rois, np.concatenate(us), np.concatenate(vs)


def _set_frozen(model: ViPModel, patterns: Sequence[str]) -> list:
    import fnmatch
    frozen = []
    for p in model.parameters():
        if any(fnmatch.fnmatchcase(p.name, pat) for pat in patterns):
            p.requires_grad = False
            frozen.append(p)
    return frozen


def run_stage(model: ViPModel, cache: _ImageCache, stage: int, epochs: int, cfg: TrainConfig,
              loss_cfg: LossConfig, prop_cfg: ProposalConfig, metrics: list, *, val=None,
              tables=None, log_fh=None, out_dir: Path | None = None, step0: int = 0) -> int:
    loss_cfg = LossConfig(**{**asdict(loss_cfg), "stage": stage})
    model.messages_enabled = stage == 2 and model.cfg.has_messages
    params = model.trainable_parameters()
    frozen = _set_frozen(model, cfg.frozen)
    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, frozen=cfg.frozen)
    rng = np.random.default_rng([cfg.seed, stage])
    n = len(cache.tensors)
    step = step0
    try:
        for epoch in range(epochs):
            if cfg.lr_step:
                opt.lr = cfg.lr * (0.1 ** (epoch // cfg.lr_step))
            order = rng.permutation(n)
            sums: dict[str, float] = {}
            count = 0
            t0 = time.perf_counter()
            for lo in range(0, n, cfg.batch_images):
                idx = order[lo: lo + cfg.batch_images]
                batch = build_batch(cache, idx, prop_cfg, loss_cfg, cfg.triplets_per_image, rng,
                                    (cfg.seed, stage, epoch))
                if batch is None:
                    continue
                images, rois, u, v = batch
                opt.zero_grad()
                out = model.forward(images, rois)
                if loss_cfg.target_mode == "word-vector":
                    loss, terms = word_vector_objective(model, out, u, v, tables, loss_cfg)
                else:
                    loss, terms = multi_task_loss(out, u, v, loss_cfg)
                value = loss.item()
                if not np.isfinite(value):
                    snap = None
                    if out_dir is not None:
                        snap = out_dir / "nonfinite_snapshot.ckpt"
                        save_checkpoint(snap, model.state_dict())
                    raise NonFiniteLoss(f"stage {stage} epoch {epoch} step {step}: loss {value} "
                                        f"terms {terms}; snapshot {snap}")
                loss.backward()
                opt.step()
                step += 1
                count += 1
                sums["loss"] = sums.get("loss", 0.0) + value
                for k2, x in terms.items():
                    sums[k2] = sums.get(k2, 0.0) + x
            last = epoch == epochs - 1
            point = last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)
            rec = {"step": step, "stage": stage, "epoch": epoch, "lr": opt.lr,
                   **{k2: x / max(count, 1) for k2, x in sums.items()},
                   "seconds": round(time.perf_counter() - t0, 3)}
            if point:
                if val is not None:
                    from .pipeline import evaluate
                    rec.update(evaluate(model, *val))
                metrics.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    log_fh.flush()
            log.info("stage %d epoch %d loss %.4f (%.1fs)", stage, epoch, rec.get("loss", float("nan")),
                     rec["seconds"])
    finally:
        for p in frozen:
            p.requires_grad = True
    return step


def train(scenes: Sequence[Scene], vocab: Vocabulary, model: ViPModel, cfg: TrainConfig,
          loss_cfg: LossConfig | None = None, prop_cfg: ProposalConfig | None = None, *,
          val_scenes: Sequence[Scene] | None = None, eval_cfg=None, tables=None,
          log_path=None, out_dir=None) -> TrainResult:
    """Two-stage schedule.  Message passing is off in stage 1 and, with message
    matrices reset to zero, switched on in stage 2."""
    from .pipeline import EvalConfig
    loss_cfg = loss_cfg or LossConfig()
    prop_cfg = prop_cfg or training_proposals()
    out_dir = Path(out_dir) if out_dir is not None else None
    cache = _ImageCache(scenes, vocab, model.cfg.image_size)
    val = None
    if val_scenes:
        val = (list(val_scenes)[: cfg.max_val_images], vocab, eval_cfg or EvalConfig())
    result = TrainResult(model)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        step = 0
        if cfg.stages in ("1", "1-only"):
            model.zero_messages()
            step = run_stage(model, cache, 1, cfg.stage1_epochs, cfg, loss_cfg, prop_cfg, result.metrics,
                             val=val, tables=tables, log_fh=log_fh, out_dir=out_dir, step0=step)
            result.stage1_state = model.state_dict()
        if cfg.stages in ("1", "2"):
            model.zero_messages()
            run_stage(model, cache, 2, cfg.stage2_epochs, cfg, loss_cfg, prop_cfg, result.metrics,
                      val=val, tables=tables, log_fh=log_fh, out_dir=out_dir, step0=step)
    finally:
        if log_fh is not None:
            log_fh.close()
        model.messages_enabled = model.cfg.has_messages
    return result

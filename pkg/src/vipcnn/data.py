"""Synthetic relationship scenes, annotation files and label cleansing.

Annotation files hold one relationship per line, tab separated::

    image_id  subject  predicate  object  sx1,sy1,sx2,sy2  ox1,oy1,ox2,oy2

Synonym tables hold ``raw<TAB>canonical`` per line.
"""
from __future__ import annotations

import logging
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, InvalidInput
from .geometry import Box, iou

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelationshipAnnotation:
    image_id: str
    subject_label: str
    predicate_label: str
    object_label: str
    subject_box: Box
    object_box: Box

    def with_labels(self, s: str, p: str, o: str) -> "RelationshipAnnotation":
        return RelationshipAnnotation(self.image_id, s, p, o, self.subject_box, self.object_box)


# ---------------------------------------------------------------- predicates

def _disjoint(s: Box, o: Box) -> bool:
    return iou(s, o) == 0.0


def _horizontal(s: Box, o: Box) -> bool:
    (sx, sy), (ox, oy) = s.center, o.center
    return abs(sx - ox) >= abs(sy - oy)


PREDICATE_CHECKS: dict[str, Callable[[Box, Box], bool]] = {
    "inside": lambda s, o: o.contains(s),
    "overlapping": lambda s, o: not _disjoint(s, o) and not o.contains(s),
    "left-of": lambda s, o: _disjoint(s, o) and _horizontal(s, o) and s.center[0] < o.center[0],
    "right-of": lambda s, o: _disjoint(s, o) and _horizontal(s, o) and s.center[0] > o.center[0],
    "above": lambda s, o: _disjoint(s, o) and not _horizontal(s, o) and s.center[1] < o.center[1],
    "below": lambda s, o: _disjoint(s, o) and not _horizontal(s, o) and s.center[1] > o.center[1],
    "larger-than": lambda s, o: s.area > 1.5 * o.area,
    "near": lambda s, o: _disjoint(s, o) and _gap(s, o) < 0.5 * min(s.width, s.height, o.width, o.height),
}


def _gap(s: Box, o: Box) -> float:
    dx = max(o.x1 - s.x2, s.x1 - o.x2, 0.0)
    dy = max(o.y1 - s.y2, s.y1 - o.y2, 0.0)
    return math.hypot(dx, dy)


def relation_of(s: Box, o: Box, predicates: Sequence[str]) -> str | None:
    """First predicate in ``predicates`` whose geometric check holds."""
    for p in predicates:
        if PREDICATE_CHECKS[p](s, o):
            return p
    return None


# ----------------------------------------------------------------- synthesis

SHAPES = ("square", "circle", "triangle")
COLORS = {"red": (200, 50, 40), "blue": (40, 70, 210), "green": (40, 170, 60), "yellow": (210, 190, 40)}


@dataclass
class SynthConfig:
    image_size: tuple[int, int] = (64, 64)  # (width, height)
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = ("red", "blue")
    predicates: tuple[str, ...] = ("inside", "overlapping", "left-of", "right-of", "above", "below")
    objects_per_image: tuple[int, int] = (2, 4)
    relationships_per_image: tuple[int, int] = (12, 12)
    object_size: tuple[int, int] = (10, 22)
    nest_prob: float = 0.2
    max_overlap: float = 0.25
    color_jitter: int = 30
    pixel_noise: float = 12.0
    retry_budget: int = 200
    seed: int = 0

    def __post_init__(self):
        for p in self.predicates:
            if p not in PREDICATE_CHECKS:
                raise ConfigError(f"unknown predicate {p!r}")
        for s in self.shapes:
            if s not in SHAPES:
                raise ConfigError(f"unknown shape {s!r}")
        lo, hi = self.objects_per_image
        if not 2 <= lo <= hi:
            raise ConfigError("objects_per_image must satisfy 2 <= lo <= hi")

    @property
    def object_classes(self) -> list[str]:
        return [f"{c}-{s}" for c in self.colors for s in self.shapes]


@dataclass
class Scene:
    image_id: str
    image: np.ndarray  # (h, w, 3) uint8
    relationships: list[RelationshipAnnotation]
    objects: list[tuple[str, Box]] = field(default_factory=list)


def _place(rng, cfg: SynthConfig, placed: list[Box]) -> Box:
    w, h = cfg.image_size
    lo, hi = cfg.object_size
    for _ in range(cfg.retry_budget):
        if placed and rng.random() < cfg.nest_prob:
            host = placed[int(rng.integers(len(placed)))]
            if host.width >= 14 and host.height >= 14:
                bw = rng.uniform(0.35, 0.6) * host.width
                bh = rng.uniform(0.35, 0.6) * host.height
                x1 = rng.uniform(host.x1 + 1, host.x2 - bw - 1)
                y1 = rng.uniform(host.y1 + 1, host.y2 - bh - 1)
                cand = Box(round(x1), round(y1), round(x1 + bw), round(y1 + bh))
                if cand.width >= 4 and cand.height >= 4 and host.contains(cand) and all(
                        b is host or iou(b, cand) == 0.0 for b in placed):
                    return cand
                continue
        bw = rng.integers(lo, hi + 1)
        bh = rng.integers(lo, hi + 1)
        x1 = rng.integers(0, w - bw + 1)
        y1 = rng.integers(0, h - bh + 1)
        cand = Box(float(x1), float(y1), float(x1 + bw), float(y1 + bh))
        if all(iou(b, cand) <= cfg.max_overlap and not b.contains(cand) and not cand.contains(b)
               for b in placed):
            return cand
    raise InvalidInput(f"could not place an object within {cfg.retry_budget} tries; "
                       "reduce objects_per_image or object_size")


def _draw(draw: ImageDraw.ImageDraw, shape: str, box: Box, color):
    xy = [box.x1, box.y1, box.x2 - 1, box.y2 - 1]
    if shape == "square":
        draw.rectangle(xy, fill=color, outline=(0, 0, 0))
    elif shape == "circle":
        draw.ellipse(xy, fill=color, outline=(0, 0, 0))
    else:
        draw.polygon([(box.x1, box.y2 - 1), ((box.x1 + box.x2 - 1) / 2, box.y1), (box.x2 - 1, box.y2 - 1)],
                     fill=color, outline=(0, 0, 0))


def generate_scene(cfg: SynthConfig, index: int = 0) -> Scene:
    """Render one scene; deterministic in ``(cfg.seed, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    w, h = cfg.image_size
    n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    boxes: list[Box] = []
    labels: list[str] = []
    classes = cfg.object_classes
    for _ in range(n_obj):
        box = _place(rng, cfg, boxes)
        label = classes[int(rng.integers(len(classes)))]
        host = next((b for b in boxes if b.contains(box)), None)
        if host is not None:
            # a nested shape must differ in color from its host to stay visible
            host_color = labels[boxes.index(host)].split("-")[0]
            while label.split("-")[0] == host_color and len(cfg.colors) > 1:
                label = classes[int(rng.integers(len(classes)))]
        boxes.append(box)
        labels.append(label)

    base = rng.integers(90, 140)
    img = Image.new("RGB", (w, h), (int(base), int(base), int(base)))
    draw = ImageDraw.Draw(img)
    for i in sorted(range(n_obj), key=lambda i: -boxes[i].area):
        color_name, shape = labels[i].split("-")
        jitter = rng.integers(-cfg.color_jitter, cfg.color_jitter + 1, size=3)
        color = tuple(int(np.clip(c + j, 0, 255)) for c, j in zip(COLORS[color_name], jitter))
        _draw(draw, shape, boxes[i], color)
    arr = np.asarray(img, dtype=np.float64)
    if cfg.pixel_noise:
        arr = arr + rng.normal(0.0, cfg.pixel_noise, size=arr.shape)
    arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)

    image_id = f"{cfg.seed:04d}_{index:06d}"
    pairs = []
    for i in range(n_obj):
        for j in range(n_obj):
            if i != j:
                pred = relation_of(boxes[i], boxes[j], cfg.predicates)
                if pred is not None:
                    pairs.append((i, j, pred))
    lo, hi = cfg.relationships_per_image
    n_rel = min(len(pairs), int(rng.integers(lo, hi + 1)))
    chosen = sorted(rng.choice(len(pairs), size=n_rel, replace=False).tolist()) if pairs else []
    rels = [RelationshipAnnotation(image_id, labels[i], pred, labels[j], boxes[i], boxes[j])
            for i, j, pred in (pairs[k] for k in chosen)]
    return Scene(image_id, arr, rels, list(zip(labels, boxes)))


def generate_dataset(cfg: SynthConfig, n_images: int, start: int = 0) -> list[Scene]:
    return [generate_scene(cfg, start + i) for i in range(n_images)]


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(image).save(path, format="PPM")


def read_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


# ------------------------------------------------------------------ file I/O

def _fmt_box(b: Box) -> str:
    return ",".join(repr(float(v)) for v in (b.x1, b.y1, b.x2, b.y2))


def format_annotation(a: RelationshipAnnotation) -> str:
    return "\t".join([a.image_id, a.subject_label, a.predicate_label, a.object_label,
                      _fmt_box(a.subject_box), _fmt_box(a.object_box)])


def parse_annotation(line: str) -> RelationshipAnnotation:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 6:
        raise InvalidInput(f"expected 6 tab-separated fields, got {len(parts)}")
    image_id, s, p, o, sb, ob = parts
    if not all((image_id, s, p, o)):
        raise InvalidInput("empty id or label field")
    boxes = []
    for text in (sb, ob):
        coords = text.split(",")
        if len(coords) != 4:
            raise InvalidInput(f"box {text!r} needs 4 comma-separated numbers")
        try:
            boxes.append(Box(*(float(c) for c in coords)))
        except ValueError as exc:
            raise InvalidInput(f"bad box {text!r}: {exc}") from exc
    return RelationshipAnnotation(image_id, s, p, o, boxes[0], boxes[1])


def write_annotations(path, annotations: Iterable[RelationshipAnnotation]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a in annotations:
            fh.write(format_annotation(a) + "\n")


def read_annotations(path, strict: bool = True, stats: dict | None = None) -> list[RelationshipAnnotation]:
    """Read an annotation file.

    In strict mode the first malformed line raises :class:`InvalidInput`
    naming its line number; otherwise bad lines are skipped, logged and
    counted in ``stats["skipped"]``.
    """
    out = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse_annotation(line))
            except InvalidInput as exc:
                if strict:
                    raise InvalidInput(f"{path}:{lineno}: {exc}") from exc
                log.warning("%s:%d: skipped (%s)", path, lineno, exc)
                skipped += 1
    if stats is not None:
        stats["skipped"] = skipped
    return out


# ------------------------------------------------------------------ cleansing

_PUNCT = re.compile(f"[{re.escape(string.punctuation.replace('-', ''))}]")
_SPACE = re.compile(r"\s+")


def normalize_label(raw: str) -> str:
    text = _PUNCT.sub(" ", raw.lower())
    return _SPACE.sub(" ", text).strip()


def load_synonym_table(path) -> dict[str, str]:
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise InvalidInput(f"{path}:{lineno}: expected 'raw<TAB>canonical'")
            table[parts[0]] = parts[1]
    return table


def resolve_table(table: dict[str, str]) -> dict[str, str]:
    """Normalize both sides and follow chains so one lookup reaches the fixed point."""
    norm = {normalize_label(k): normalize_label(v) for k, v in table.items()}
    out = {}
    for k in norm:
        seen = [k]
        cur = norm[k]
        while cur in norm and norm[cur] != cur:
            if cur in seen:
                raise InvalidInput(f"synonym cycle through {seen + [cur]}")
            seen.append(cur)
            cur = norm[cur]
        out[k] = cur
    return out


def cleanse_label(raw: str, table: dict[str, str]) -> str:
    text = normalize_label(raw)
    return table.get(text, text)


def cleanse_labels(annotations: Iterable[RelationshipAnnotation],
                   table: dict[str, str] | None = None) -> list[RelationshipAnnotation]:
    """Lowercase, strip punctuation and map through the synonym table.

    Relationships with a label that cleanses to nothing are dropped.
    """
    resolved = resolve_table(table or {})
    out = []
    for a in annotations:
        labels = [cleanse_label(x, resolved) for x in (a.subject_label, a.predicate_label, a.object_label)]
        if all(labels):
            out.append(a.with_labels(*labels))
    return out


FREQ_OBJECT_MIN = 200
FREQ_PREDICATE_MIN = 400


def category_counts(annotations: Sequence[RelationshipAnnotation]) -> tuple[Counter, Counter]:
    objects: Counter = Counter()
    predicates: Counter = Counter()
    for a in annotations:
        objects[a.subject_label] += 1
        objects[a.object_label] += 1
        predicates[a.predicate_label] += 1
    return objects, predicates


def frequency_filter(annotations: Sequence[RelationshipAnnotation], obj_min: int = FREQ_OBJECT_MIN,
                     pred_min: int = FREQ_PREDICATE_MIN) -> list[RelationshipAnnotation]:
    """Drop relationships touching rare categories, counted once on the input."""
    if obj_min < 0 or pred_min < 0:
        raise ConfigError("frequency thresholds must be >= 0")
    objects, predicates = category_counts(annotations)
    return [a for a in annotations
            if objects[a.subject_label] >= obj_min and objects[a.object_label] >= obj_min
            and predicates[a.predicate_label] >= pred_min]


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(annotations: Sequence[RelationshipAnnotation], fractions=(0.7, 0.1, 0.2),
                  seed: int = 0) -> tuple[list[RelationshipAnnotation], ...]:
    """Split by image id so no image spans two subsets."""
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions {tuple(fractions)} must be non-negative and sum to 1")
    ids = sorted({a.image_id for a in annotations})
    perm = np.random.default_rng(seed).permutation(len(ids))
    counts = split_counts(len(ids), fractions)
    bounds = np.cumsum([0] + counts)
    subset_of = {}
    for k, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        for i in perm[lo:hi]:
            subset_of[ids[i]] = k
    parts: list[list[RelationshipAnnotation]] = [[] for _ in fractions]
    for a in annotations:
        parts[subset_of[a.image_id]].append(a)
    return tuple(parts)


# ----------------------------------------------------------------- vocabulary

@dataclass
class Vocabulary:
    """Label strings to class ids; id 0 is reserved for background."""

    objects: list[str]
    predicates: list[str]

    def object_id(self, label: str) -> int:
        return self.objects.index(label) + 1

    def predicate_id(self, label: str) -> int:
        return self.predicates.index(label) + 1

    @classmethod
    def from_synth(cls, cfg: SynthConfig) -> "Vocabulary":
        return cls(cfg.object_classes, list(cfg.predicates))

    @classmethod
    def from_annotations(cls, annotations: Sequence[RelationshipAnnotation]) -> "Vocabulary":
        objects, predicates = category_counts(annotations)
        return cls(sorted(objects), sorted(predicates))

    def save(self, directory) -> None:
        d = Path(directory)
        (d / "objects.txt").write_text("".join(f"{x}\n" for x in self.objects), encoding="utf-8")
        (d / "predicates.txt").write_text("".join(f"{x}\n" for x in self.predicates), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "Vocabulary":
        d = Path(directory)
        read = lambda name: [x for x in (d / name).read_text(encoding="utf-8").splitlines() if x]
        return cls(read("objects.txt"), read("predicates.txt"))


@dataclass
class GroundTruth:
    """Per-image relationship arrays with integer labels."""

    subjects: np.ndarray  # (G, 4)
    objects: np.ndarray  # (G, 4)
    labels: np.ndarray  # (G, 3) subject, predicate, object ids

    @property
    def unions(self) -> np.ndarray:
        from .geometry import union_array
        return union_array(self.subjects, self.objects)

    def __len__(self):
        return len(self.labels)

    def object_boxes(self) -> np.ndarray:
        """Distinct subject/object boxes in first-seen order."""
        boxes = np.concatenate([self.subjects, self.objects]) if len(self) else np.zeros((0, 4))
        _, first = np.unique(boxes, axis=0, return_index=True)
        return boxes[np.sort(first)]

    @classmethod
    def from_annotations(cls, rels: Sequence[RelationshipAnnotation], vocab: Vocabulary) -> "GroundTruth":
        if not rels:
            return cls(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 3), dtype=np.int64))
        return cls(np.array([r.subject_box.as_array() for r in rels]),
                   np.array([r.object_box.as_array() for r in rels]),
                   np.array([[vocab.object_id(r.subject_label), vocab.predicate_id(r.predicate_label),
                              vocab.object_id(r.object_label)] for r in rels], dtype=np.int64))


# ------------------------------------------------------------ dataset dirs

IMAGE_DIR = "images"


def save_scenes(scenes: Sequence[Scene], directory) -> None:
    """Images as ``images/<id>.ppm`` plus ``annotations.tsv``."""
    d = Path(directory)
    (d / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    for sc in scenes:
        write_image(d / IMAGE_DIR / f"{sc.image_id}.ppm", sc.image)
    write_annotations(d / "annotations.tsv", [a for sc in scenes for a in sc.relationships])


def load_scenes(directory, annotation_file, strict: bool = True) -> list[Scene]:
    """Scenes for every image id named in ``annotation_file``, in first-seen order."""
    d = Path(directory)
    grouped: dict[str, list[RelationshipAnnotation]] = {}
    for a in read_annotations(annotation_file, strict=strict):
        grouped.setdefault(a.image_id, []).append(a)
    scenes = []
    for image_id, rels in grouped.items():
        path = d / IMAGE_DIR / f"{image_id}.ppm"
        if not path.is_file():
            raise InvalidInput(f"missing image {path}")
        scenes.append(Scene(image_id, read_image(path), rels))
    return scenes

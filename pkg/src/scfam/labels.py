"""Semantic-vector labeling of feature positions from box annotations.

A feature position is tagged with class ``c`` when some box of class ``c``
covers at least a fraction ``zeta`` of the smaller of (box area, field area).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .rf import ConvStackSpec, FieldRect, field_grid

logger = logging.getLogger(__name__)

DEFAULT_ZETA = 0.6


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float
    class_id: int

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    def clipped(self, height: int, width: int) -> "Box":
        return Box(
            min(max(self.x0, 0), width),
            min(max(self.y0, 0), height),
            min(max(self.x1, 0), width),
            min(max(self.y1, 0), height),
            self.class_id,
        )

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1, "class": self.class_id}


@dataclass
class AnnotatedScene:
    """Image of shape (H, W, C) in [0, 1] plus its boxes."""

    image: np.ndarray
    boxes: list[Box] = field(default_factory=list)

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        h, w = self.image.shape[:2]
        kept = []
        for b in self.boxes:
            c = b.clipped(h, w)
            if c.area <= 0:
                warnings.warn(f"dropping degenerate box {b}", stacklevel=2)
                continue
            kept.append(c)
        self.boxes = kept

    @property
    def image_size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    @property
    def classes(self) -> list[int]:
        return [b.class_id for b in self.boxes]


@dataclass
class SemanticLabelMaps:
    local: np.ndarray  # (H1, W1)
    mid: np.ndarray  # (K, H2, W2)
    global_vec: np.ndarray  # (K,)

    def to_dict(self) -> dict:
        return {
            "local": self.local.astype(int).tolist(),
            "mid": self.mid.astype(int).tolist(),
            "global": self.global_vec.astype(int).tolist(),
        }


@dataclass(frozen=True)
class LabelingConfig:
    zeta: float = DEFAULT_ZETA
    num_classes: int = 3

    def __post_init__(self):
        if not 0 < self.zeta <= 1:
            raise ValueError(f"zeta must lie in (0, 1], got {self.zeta}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")


def _as_rect(b) -> tuple[float, float, float, float]:
    if isinstance(b, (Box, FieldRect)):
        return b.x0, b.y0, b.x1, b.y1
    x0, y0, x1, y1 = b
    return x0, y0, x1, y1


def label_semantic_vector(
    boxes: Sequence, classes: Sequence[int], num_classes: int, zeta: float, field: FieldRect
) -> np.ndarray:
    """Binary K-vector of classes present in ``field``.

    ``boxes`` are ``(x0, y0, x1, y1)`` tuples or :class:`Box` objects.
    """
    if len(boxes) != len(classes):
        raise ValueError(f"{len(boxes)} boxes but {len(classes)} class ids")
    fx0, fy0, fx1, fy1 = _as_rect(field)
    s_w = max(0, fx1 - fx0) * max(0, fy1 - fy0)
    if s_w <= 0:
        raise ValueError(f"field {field} has zero area")
    out = np.zeros(num_classes, dtype=np.int8)
    for b, c in zip(boxes, classes):
        x0, y0, x1, y1 = _as_rect(b)
        s_g = max(0, x1 - x0) * max(0, y1 - y0)
        if s_g <= 0:
            continue
        iw = min(x1, fx1) - max(x0, fx0)
        ih = min(y1, fy1) - max(y0, fy0)
        if iw <= 0 or ih <= 0:
            continue
        if (iw * ih) / min(s_w, s_g) >= zeta:
            out[c] = 1
    return out


def _presence_grid(boxes: Sequence[Box], stack: ConvStackSpec, k: int, image_size, num_classes, zeta):
    """(K, H_k, W_k) presence map, vectorised over positions."""
    y0, y1, x0, x1 = field_grid(stack, k, image_size)
    out = np.zeros((num_classes, len(y0), len(x0)), dtype=np.int8)
    s_w = np.outer(y1 - y0, x1 - x0).astype(np.float64)
    for b in boxes:
        s_g = b.area
        if s_g <= 0:
            continue
        ih = np.clip(np.minimum(y1, b.y1) - np.maximum(y0, b.y0), 0, None)
        iw = np.clip(np.minimum(x1, b.x1) - np.maximum(x0, b.x0), 0, None)
        inter = np.outer(ih, iw).astype(np.float64)
        ratio = inter / np.minimum(s_w, s_g)
        hit = (inter > 0) & (ratio >= zeta)
        out[b.class_id] |= hit.astype(np.int8)
    return out


def label_map_mid(
    scene: AnnotatedScene, stack: ConvStackSpec, k2: int, num_classes: int, zeta: float = DEFAULT_ZETA
) -> np.ndarray:
    return _presence_grid(scene.boxes, stack, k2, scene.image_size, num_classes, zeta)


def label_map_local(
    scene: AnnotatedScene, stack: ConvStackSpec, k1: int, zeta: float = DEFAULT_ZETA
) -> np.ndarray:
    n = max([b.class_id for b in scene.boxes], default=0) + 1
    grid = _presence_grid(scene.boxes, stack, k1, scene.image_size, n, zeta)
    return grid.max(axis=0)


def label_global(scene: AnnotatedScene, num_classes: int) -> np.ndarray:
    out = np.zeros(num_classes, dtype=np.int8)
    for c in scene.classes:
        out[c] = 1
    return out


def label_scene(
    scene: AnnotatedScene, stack: ConvStackSpec, config: LabelingConfig, local_tap="F1", mid_tap="F2"
) -> SemanticLabelMaps:
    return SemanticLabelMaps(
        local=label_map_local(scene, stack, stack.tap(local_tap), config.zeta),
        mid=label_map_mid(scene, stack, stack.tap(mid_tap), config.num_classes, config.zeta),
        global_vec=label_global(scene, config.num_classes),
    )


class SemanticLabeler(BaseEstimator, TransformerMixin):
    """Turns annotated scenes into per-granularity target maps.

    Stateless apart from validation: ``fit`` only checks that every class id
    is below ``num_classes``.
    """

    def __init__(self, stack=None, zeta=DEFAULT_ZETA, num_classes=3, local_tap="F1", mid_tap="F2"):
        self.stack = stack
        self.zeta = zeta
        self.num_classes = num_classes
        self.local_tap = local_tap
        self.mid_tap = mid_tap

    def fit(self, scenes, y=None):
        self.config_ = LabelingConfig(self.zeta, self.num_classes)
        if self.stack is None:
            raise ValueError("SemanticLabeler needs a ConvStackSpec")
        for s in scenes:
            for c in s.classes:
                if not 0 <= c < self.num_classes:
                    raise ValueError(f"class id {c} outside [0, {self.num_classes})")
        return self

    def transform(self, scenes) -> list[SemanticLabelMaps]:
        if not hasattr(self, "config_"):
            self.fit(scenes)
        return [label_scene(s, self.stack, self.config_, self.local_tap, self.mid_tap) for s in scenes]


# -- annotation files ------------------------------------------------------


def read_annotations(path: str | Path) -> list[dict]:
    """Line-delimited JSON records ``{image, boxes: [{x0, y0, x1, y1, class}]}``."""
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def boxes_from_record(record: dict) -> list[Box]:
    return [Box(b["x0"], b["y0"], b["x1"], b["y1"], int(b["class"])) for b in record.get("boxes", [])]


def write_annotations(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def load_scene(record: dict, root: str | Path | None = None, image_size=None) -> AnnotatedScene:
    """Build a scene from an annotation record, reading the image when present."""
    image_ref = record.get("image")
    image = None
    if image_ref is not None:
        p = Path(image_ref)
        if root is not None and not p.is_absolute():
            p = Path(root) / p
        if p.exists():
            from .synthdata import read_image

            image = read_image(p)
    if image is None:
        h, w = image_size or record.get("size", (None, None))
        if h is None:
            raise FileNotFoundError(f"cannot find image {image_ref!r} and no size given")
        image = np.zeros((h, w, 3))
    return AnnotatedScene(image, boxes_from_record(record))

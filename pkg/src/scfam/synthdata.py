"""Two-domain toy detection scenes.

Source scenes are flat-shaded geometric shapes on a plain background; one
shape per class. Target scenes are the same renderer followed by a
geometry-preserving pixel shift (blur, haze, colour cast, sensor noise).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .labels import AnnotatedScene, Box

logger = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond")
PALETTE = np.array(
    [
        [0.90, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.35, 0.90],
        [0.95, 0.80, 0.15],
        [0.85, 0.30, 0.85],
        [0.15, 0.85, 0.85],
    ]
)


@dataclass
class SceneConfig:
    image_size: int = 64
    num_classes: int = 3
    objects_range: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (12, 24)
    max_overlap: float = 0.3
    background: float = 0.35
    seed: int = 0
    max_retries: int = 50

    def __post_init__(self):
        self.objects_range = tuple(self.objects_range)
        self.size_range = tuple(self.size_range)
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [2, {len(SHAPES)}], got {self.num_classes}")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        lo, hi = self.objects_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad objects_range {self.objects_range}")
        if not 2 <= self.size_range[0] <= self.size_range[1] <= self.image_size:
            raise ValueError(f"bad size_range {self.size_range}")


@dataclass
class ShiftParams:
    haze: float = 0.0
    haze_color: tuple[float, float, float] = (0.85, 0.85, 0.85)
    noise_sigma: float = 0.0
    color_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    blur_radius: int = 0

    def __post_init__(self):
        self.haze_color = tuple(float(c) for c in self.haze_color)
        self.color_shift = tuple(float(c) for c in self.color_shift)
        if not 0 <= self.haze <= 1:
            raise ValueError(f"haze must be in [0, 1], got {self.haze}")
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ValueError("noise_sigma and blur_radius must be non-negative")

    @property
    def is_identity(self) -> bool:
        return self.haze == 0 and self.noise_sigma == 0 and self.blur_radius == 0 and not any(self.color_shift)


FOGGY = ShiftParams(haze=0.55, noise_sigma=0.04, color_shift=(0.06, 0.02, -0.08), blur_radius=1)
# default benchmark shift; FOGGY is the harder variant
LIGHT_FOG = ShiftParams(haze=0.3, noise_sigma=0.02, color_shift=(0.06, 0.02, -0.08), blur_radius=1)


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` raster of a shape touching all four sides."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - c, xx - c
    r = size / 2.0
    if kind == "disk":
        m = dx**2 + dy**2 <= r**2
    elif kind == "square":
        m = np.ones((size, size), bool)
    elif kind == "triangle":
        # apex at top centre, base along the bottom row
        m = np.abs(dx) <= (yy + 0.5) * (size / 2.0) / size + 0.25
    elif kind == "cross":
        w = max(1.0, size / 6.0)
        m = (np.abs(dx) <= w) | (np.abs(dy) <= w)
    elif kind == "ring":
        d2 = dx**2 + dy**2
        m = (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    elif kind == "diamond":
        m = np.abs(dx) + np.abs(dy) <= r
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m


def _iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def generate_scene(config: SceneConfig, rng: np.random.Generator) -> AnnotatedScene:
    n_px = config.image_size
    tint = rng.uniform(-0.05, 0.05, size=3)
    image = np.empty((n_px, n_px, 3))
    image[:] = np.clip(config.background + tint, 0, 1)
    lo, hi = config.objects_range
    n_obj = int(rng.integers(lo, hi + 1))
    boxes: list[Box] = []
    for _ in range(n_obj):
        cls = int(rng.integers(config.num_classes))
        color = PALETTE[int(rng.integers(len(PALETTE)))]
        placed = False
        for _ in range(config.max_retries):
            size = int(rng.integers(config.size_range[0], config.size_range[1] + 1))
            y0 = int(rng.integers(0, n_px - size + 1))
            x0 = int(rng.integers(0, n_px - size + 1))
            mask = shape_mask(SHAPES[cls], size)
            rows, cols = np.nonzero(mask)
            box = Box(x0 + int(cols.min()), y0 + int(rows.min()), x0 + int(cols.max()) + 1, y0 + int(rows.max()) + 1, cls)
            if all(_iou(box, b) <= config.max_overlap for b in boxes):
                image[y0 : y0 + size, x0 : x0 + size][mask] = color
                boxes.append(box)
                placed = True
                break
        if not placed:
            warnings.warn(f"could not place object of class {cls} after {config.max_retries} tries", stacklevel=2)
    return AnnotatedScene(image, boxes)


def apply_domain_shift(scene: AnnotatedScene, params: ShiftParams, rng: np.random.Generator) -> AnnotatedScene:
    """Blur, then haze blend, then colour cast, then additive noise; clipped to [0, 1]."""
    img = scene.image
    if params.is_identity:
        return AnnotatedScene(img.copy(), list(scene.boxes))
    img = img.astype(np.float64, copy=True)
    if params.blur_radius:
        k = 2 * params.blur_radius + 1
        img = uniform_filter(img, size=(k, k, 1), mode="nearest")
    if params.haze:
        img = (1.0 - params.haze) * img + params.haze * np.asarray(params.haze_color)
    if any(params.color_shift):
        img = img + np.asarray(params.color_shift)
    if params.noise_sigma:
        img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
    return AnnotatedScene(np.clip(img, 0.0, 1.0), list(scene.boxes))


def scene_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def generate_dataset(
    config: SceneConfig, n: int, shift: ShiftParams | None = None, seed: int | None = None
) -> list[AnnotatedScene]:
    """``n`` scenes, each from its own derived seed so order and parallelism don't matter."""
    seed = config.seed if seed is None else seed
    scenes = []
    for ss in scene_seeds(seed, n):
        rng = np.random.default_rng(ss)
        s = generate_scene(config, rng)
        if shift is not None:
            s = apply_domain_shift(s, shift, rng)
        scenes.append(s)
    return scenes


@dataclass
class UnlabeledView:
    """Target-domain training data: images only, boxes are not reachable."""

    images: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_scenes(cls, scenes: Sequence[AnnotatedScene]) -> "UnlabeledView":
        return cls([s.image for s in scenes])

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i]


# -- files -------------------------------------------------------------------


def write_image(path: str | Path, image: np.ndarray) -> Path:
    """PNG through Pillow when available, binary PPM otherwise."""
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    try:
        from PIL import Image

        Image.fromarray(data).save(path.with_suffix(".png"))
        return path.with_suffix(".png")
    except ImportError:
        out = path.with_suffix(".ppm")
        h, w = data.shape[:2]
        with open(out, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(data.tobytes())
        return out


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".ppm":
        raw = path.read_bytes()
        parts = raw.split(b"\n", 3)
        w, h = map(int, parts[1].split())
        data = np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
    else:
        from PIL import Image

        data = np.asarray(Image.open(path).convert("RGB"))
    return data.astype(np.float64) / 255.0


def save_dataset(scenes: Sequence[AnnotatedScene], out_dir: str | Path, prefix: str = "scene") -> Path:
    from .labels import write_annotations

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(scenes):
        p = write_image(out_dir / f"{prefix}_{i:05d}", s.image)
        records.append({"image": p.name, "size": list(s.image_size), "boxes": [b.to_dict() for b in s.boxes]})
    ann = out_dir / "annotations.jsonl"
    write_annotations(ann, records)
    return ann


def load_dataset(directory: str | Path) -> list[AnnotatedScene]:
    from .labels import load_scene, read_annotations

    directory = Path(directory)
    return [load_scene(r, directory) for r in read_annotations(directory / "annotations.jsonl")]


def config_to_dict(config: SceneConfig) -> dict:
    d = asdict(config)
    d["objects_range"] = list(d["objects_range"])
    d["size_range"] = list(d["size_range"])
    return d

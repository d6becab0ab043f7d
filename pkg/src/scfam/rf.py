"""Receptive-field geometry for plain convolution / pooling stacks.

Layers are square and undilated. Indices ``k`` are 1-based: ``k=1`` is the
output of the first layer, ``k=0`` is the input image itself.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if int(self.kernel) < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")
        if int(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if int(self.padding) < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")


@dataclass(frozen=True)
class ConvStackSpec:
    layers: tuple[LayerSpec, ...]
    taps: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        layers = tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**dict(l)) for l in self.layers
        )
        if not layers:
            raise ValueError("a ConvStackSpec needs at least one layer")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "taps", dict(self.taps))
        for name, k in self.taps.items():
            self._check_index(k)

    def __len__(self):
        return len(self.layers)

    def _check_index(self, k: int) -> None:
        if not 1 <= k <= len(self.layers):
            raise IndexError(f"layer index {k} outside 1..{len(self.layers)}")

    def tap(self, name: str) -> int:
        try:
            return self.taps[name]
        except KeyError:
            raise KeyError(f"stack has no tap named {name!r}; known: {sorted(self.taps)}") from None

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConvStackSpec":
        return cls(layers=tuple(LayerSpec(**l) for l in d["layers"]), taps=d.get("taps", {}))

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"kernel": l.kernel, "stride": l.stride, "padding": l.padding} for l in self.layers
            ],
            "taps": dict(self.taps),
        }


@dataclass(frozen=True)
class FieldRect:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``; x is the column axis."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return max(0, self.x1 - self.x0) * max(0, self.y1 - self.y0)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


def load_stack(path: str | Path) -> ConvStackSpec:
    """Read a stack from JSON or YAML.

    Accepts either a bare stack mapping or an experiment config whose
    ``backbone.stack`` entry holds it.
    """
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        d = yaml.safe_load(text)
    else:
        d = json.loads(text)
    if "layers" not in d and "backbone" in d:
        d = d["backbone"]["stack"]
    return ConvStackSpec.from_dict(d)


def receptive_field_size(stack: ConvStackSpec, k: int) -> int:
    stack._check_index(k)
    size, jump = 1, 1
    for layer in stack.layers[:k]:
        size += (layer.kernel - 1) * jump
        jump *= layer.stride
    return size


def receptive_field_sizes(stack: ConvStackSpec) -> list[int]:
    return [receptive_field_size(stack, k) for k in range(1, len(stack) + 1)]


def jump_and_offset(stack: ConvStackSpec, k: int) -> tuple[int, int]:
    """Accumulated stride of layer ``k`` and the pixel index of the first
    input pixel seen by output unit 0 (negative when padding is involved)."""
    stack._check_index(k)
    jump, offset = 1, 0
    for layer in stack.layers[:k]:
        offset -= layer.padding * jump
        jump *= layer.stride
    return jump, offset


def output_grid_size(stack: ConvStackSpec, k: int, image_size: tuple[int, int]) -> tuple[int, int]:
    stack._check_index(k)
    h, w = image_size
    for layer in stack.layers[:k]:
        h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if h < 1 or w < 1:
            raise ValueError(f"image {image_size} too small for the first {k} layers")
    return h, w


def _span(u: int, jump: int, offset: int, size: int, limit: int) -> tuple[int, int]:
    lo = u * jump + offset
    return max(lo, 0), min(lo + size, limit)


def project_field(
    stack: ConvStackSpec, k: int, u: int, v: int, image_size: tuple[int, int]
) -> FieldRect:
    """Image-plane footprint of the unit at row ``u``, column ``v`` of layer ``k``,
    clipped to the image."""
    grid = output_grid_size(stack, k, image_size)
    if not (0 <= u < grid[0] and 0 <= v < grid[1]):
        raise IndexError(f"position ({u}, {v}) outside layer-{k} grid {grid}")
    size = receptive_field_size(stack, k)
    jump, offset = jump_and_offset(stack, k)
    y0, y1 = _span(u, jump, offset, size, image_size[0])
    x0, x1 = _span(v, jump, offset, size, image_size[1])
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"unit ({u}, {v}) of layer {k} sees only padding")
    return FieldRect(x0, y0, x1, y1)


def field_grid(stack: ConvStackSpec, k: int, image_size: tuple[int, int]):
    """Clipped footprints of every unit of layer ``k`` as arrays.

    Returns ``(y0, y1, x0, x1)``; ``y*`` have shape (H_k,) and ``x*`` (W_k,),
    since square fields make the footprint separable by axis.
    """
    import numpy as np

    gh, gw = output_grid_size(stack, k, image_size)
    size = receptive_field_size(stack, k)
    jump, offset = jump_and_offset(stack, k)
    rows = np.arange(gh) * jump + offset
    cols = np.arange(gw) * jump + offset
    y0 = np.clip(rows, 0, image_size[0])
    y1 = np.clip(rows + size, 0, image_size[0])
    x0 = np.clip(cols, 0, image_size[1])
    x1 = np.clip(cols + size, 0, image_size[1])
    if np.any(y1 <= y0) or np.any(x1 <= x0):
        raise ValueError(f"some units of layer {k} see only padding")
    return y0, y1, x0, x1


def is_interior(stack: ConvStackSpec, k: int, u: int, v: int, image_size: tuple[int, int]) -> bool:
    """True when the unfilled footprint lies entirely inside the image."""
    size = receptive_field_size(stack, k)
    jump, offset = jump_and_offset(stack, k)
    top, left = u * jump + offset, v * jump + offset
    return top >= 0 and left >= 0 and top + size <= image_size[0] and left + size <= image_size[1]


def stack_from_layers(layers: Iterable[Sequence[int]]) -> ConvStackSpec:
    """Shorthand: ``stack_from_layers([(3, 1, 1), (2, 2, 0)])``."""
    return ConvStackSpec(layers=tuple(LayerSpec(*l) for l in layers))

"""Toy backbone with three taps, semantic prediction heads, semantic bridges,
gradient-reversed domain discriminators and a dense surrogate detection head."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .diffcore import (
    Conv2d,
    Linear,
    Module,
    Tensor,
    concat_channels,
    global_mean_pool,
    gradient_reversal,
    relu,
    sigmoid,
)
from .rf import ConvStackSpec, LayerSpec, output_grid_size

TAPS = ("F1", "F2", "F3")


def default_stack() -> ConvStackSpec:
    return ConvStackSpec(
        layers=(
            LayerSpec(3, 1, 1),
            LayerSpec(3, 2, 1),
            LayerSpec(3, 1, 1),
            LayerSpec(3, 2, 1),
            LayerSpec(3, 2, 1),
        ),
        taps={"F1": 3, "F2": 4, "F3": 5},
    )


@dataclass
class BackboneConfig:
    stack: ConvStackSpec = field(default_factory=default_stack)
    channels: tuple[int, ...] = (16, 16, 24, 32, 32)
    in_channels: int = 3

    def __post_init__(self):
        if isinstance(self.stack, dict):
            self.stack = ConvStackSpec.from_dict(self.stack)
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != len(self.stack):
            raise ValueError(f"{len(self.channels)} channel counts for {len(self.stack)} layers")
        missing = [t for t in TAPS if t not in self.stack.taps]
        if missing:
            raise ValueError(f"backbone stack must name taps {TAPS}; missing {missing}")
        f1, f2, f3 = (self.stack.taps[t] for t in TAPS)
        if not f1 < f2 < f3:
            raise ValueError(f"taps must satisfy F1 < F2 < F3, got {f1}, {f2}, {f3}")

    def tap_channels(self) -> tuple[int, int, int]:
        return tuple(self.channels[self.stack.taps[t] - 1] for t in TAPS)

    def tap_grids(self, image_size) -> tuple[tuple[int, int], ...]:
        return tuple(output_grid_size(self.stack, self.stack.taps[t], image_size) for t in TAPS)

    def to_dict(self) -> dict:
        return {"stack": self.stack.to_dict(), "channels": list(self.channels), "in_channels": self.in_channels}


@dataclass
class HeadConfig:
    num_classes: int = 3
    trunk_depth: int = 2  # N in "N x (1x1 conv + ReLU)"
    s1: int = 16
    s2: int = 16
    s3: int = 16
    disc_hidden: int = 16
    det_hidden: int = 32


class SpmOutput(NamedTuple):
    p_local: Tensor  # (N, 1, H1, W1)
    p_mid: Tensor  # (N, K, H2, W2)
    p_global: Tensor  # (N, K)
    pen_local: Tensor  # (N, S1, H1, W1)
    pen_mid: Tensor  # (N, S2, H2, W2)


class DetOutput(NamedTuple):
    objectness: Tensor  # (N, 1, H3, W3) probabilities
    classes: Tensor  # (N, K, H3, W3) probabilities
    boxes: Tensor  # (N, 4, H3, W3) raw offsets


def _rng(seed: int, name: str) -> np.random.Generator:
    # per-submodule streams keep shared parts identical across ablation toggles
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class CRTrunk(Module):
    """``depth`` 1x1 convolutions each followed by ReLU."""

    def __init__(self, in_ch, width, depth, rng):
        self.layers = [Conv2d(in_ch if i == 0 else width, width, 1, rng=rng) for i in range(depth)]
        self.out_channels = width if depth else in_ch

    def forward(self, x):
        for layer in self.layers:
            x = relu(layer(x))
        return x


def _head(in_ch, out_ch, rng, std=0.01) -> Conv2d:
    conv = Conv2d(in_ch, out_ch, 1, rng=rng)
    conv.weight.data = rng.normal(0.0, std, conv.weight.shape)
    return conv


class SemanticPredictor(Module):
    def __init__(self, c1, c2, c3, cfg: HeadConfig, seed: int):
        k = cfg.num_classes
        self.local_trunk = CRTrunk(c1, cfg.s1, cfg.trunk_depth, _rng(seed, "spm.local"))
        self.local_out = _head(self.local_trunk.out_channels, 1, _rng(seed, "spm.local.out"))
        self.mid_trunk = CRTrunk(c2, cfg.s2, cfg.trunk_depth, _rng(seed, "spm.mid"))
        self.mid_out = _head(self.mid_trunk.out_channels, k, _rng(seed, "spm.mid.out"))
        self.global_trunk = CRTrunk(c3, cfg.s3, cfg.trunk_depth, _rng(seed, "spm.global"))
        g = _rng(seed, "spm.global.fc")
        self.global_fc = Linear(self.global_trunk.out_channels, k, rng=g)
        self.global_fc.weight.data = g.normal(0.0, 0.01, self.global_fc.weight.shape)

    def forward(self, f1, f2, f3) -> SpmOutput:
        pen_l = self.local_trunk(f1)
        pen_m = self.mid_trunk(f2)
        g = global_mean_pool(self.global_trunk(f3))
        return SpmOutput(
            sigmoid(self.local_out(pen_l)),
            sigmoid(self.mid_out(pen_m)),
            sigmoid(self.global_fc(g)),
            pen_l,
            pen_m,
        )


class PixelDiscriminator(Module):
    def __init__(self, in_ch, cfg: HeadConfig, rng):
        self.in_channels = in_ch
        self.trunk = CRTrunk(in_ch, cfg.disc_hidden, cfg.trunk_depth, rng)
        self.out = _head(self.trunk.out_channels, 1, rng)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"discriminator expects {self.in_channels} channels, got {x.shape[1]}")
        out = sigmoid(self.out(self.trunk(x)))
        return out.reshape(out.shape[0], out.shape[2], out.shape[3])


class GlobalDiscriminator(Module):
    def __init__(self, in_ch, cfg: HeadConfig, rng):
        self.conv = Conv2d(in_ch, cfg.disc_hidden, 3, padding=1, rng=rng)
        self.fc = Linear(cfg.disc_hidden, 1, rng=rng)
        self.fc.weight.data = rng.normal(0.0, 0.01, self.fc.weight.shape)

    def forward(self, x):
        out = sigmoid(self.fc(global_mean_pool(relu(self.conv(x)))))
        return out.reshape(out.shape[0])


class DetectionHead(Module):
    def __init__(self, in_ch, cfg: HeadConfig, rng):
        self.conv = Conv2d(in_ch, cfg.det_hidden, 3, padding=1, rng=rng)
        self.obj = _head(cfg.det_hidden, 1, rng)
        self.cls = _head(cfg.det_hidden, cfg.num_classes, rng)
        self.box = _head(cfg.det_hidden, 4, rng)

    def forward(self, f3) -> DetOutput:
        h = relu(self.conv(f3))
        return DetOutput(sigmoid(self.obj(h)), sigmoid(self.cls(h)), self.box(h))


def semantic_bridge(feat: Tensor, penultimate: Tensor) -> Tensor:
    """Channel concatenation of backbone features with SPM penultimate features."""
    if feat.shape[0] != penultimate.shape[0] or feat.shape[2:] != penultimate.shape[2:]:
        raise ValueError(f"semantic_bridge: grid mismatch {feat.shape} vs {penultimate.shape}")
    return concat_channels([feat, penultimate])


class SCFAMNet(Module):
    """All trainable parts of the model; sub-networks exist only when enabled.

    ``use_da`` builds the three discriminators, ``use_spm`` the semantic
    prediction heads, ``use_sbc`` widens the local/mid discriminator inputs by
    the SPM penultimate channels.
    """

    def __init__(
        self,
        backbone: BackboneConfig | None = None,
        heads: HeadConfig | None = None,
        use_da: bool = True,
        use_spm: bool = True,
        use_sbc: bool = True,
        seed: int = 0,
    ):
        if use_sbc and not use_spm:
            raise ValueError("the semantic bridge needs the semantic prediction module")
        self.backbone_config = backbone or BackboneConfig()
        self.head_config = heads or HeadConfig()
        self.use_da, self.use_spm, self.use_sbc = use_da, use_spm, use_sbc
        bc, hc = self.backbone_config, self.head_config
        self.backbone = []
        in_ch = bc.in_channels
        for i, (layer, ch) in enumerate(zip(bc.stack.layers, bc.channels)):
            self.backbone.append(
                Conv2d(in_ch, ch, layer.kernel, layer.stride, layer.padding, rng=_rng(seed, f"backbone.{i}"))
            )
            in_ch = ch
        c1, c2, c3 = bc.tap_channels()
        self.det = DetectionHead(c3, hc, _rng(seed, "det"))
        self.spm = SemanticPredictor(c1, c2, c3, hc, seed) if use_spm else None
        if use_da:
            s1 = hc.s1 if use_sbc else 0
            s2 = hc.s2 if use_sbc else 0
            self.disc_local = PixelDiscriminator(c1 + s1, hc, _rng(seed, "disc.local"))
            self.disc_mid = PixelDiscriminator(c2 + s2, hc, _rng(seed, "disc.mid"))
            self.disc_global = GlobalDiscriminator(c3, hc, _rng(seed, "disc.global"))
        else:
            self.disc_local = self.disc_mid = self.disc_global = None

    @staticmethod
    def prepare_images(images) -> Tensor:
        """(N, H, W, C) in [0, 1] -> centred NCHW tensor."""
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        return Tensor(arr.transpose(0, 3, 1, 2) - 0.5)

    def forward_backbone(self, x) -> tuple[Tensor, Tensor, Tensor]:
        if not isinstance(x, Tensor):
            x = self.prepare_images(x)
        if x.ndim != 4 or x.shape[1] != self.backbone_config.in_channels:
            raise ValueError(
                f"expected (N, {self.backbone_config.in_channels}, H, W) input, got {x.shape}"
            )
        taps = {k: name for name, k in self.backbone_config.stack.taps.items()}
        out = {}
        for i, conv in enumerate(self.backbone, start=1):
            x = relu(conv(x))
            if i in taps:
                out[taps[i]] = x
        return out["F1"], out["F2"], out["F3"]

    def forward_spm(self, f1, f2, f3) -> SpmOutput:
        if self.spm is None:
            raise RuntimeError("semantic prediction module is disabled")
        return self.spm(f1, f2, f3)

    def forward_discriminators(self, f1, f2, f3, spm: SpmOutput | None = None, grl_scale: float = 1.0):
        if not self.use_da:
            raise RuntimeError("domain adaptation is disabled")
        if self.use_sbc:
            if spm is None:
                raise ValueError("semantic bridge enabled but no SPM output given")
            f1 = semantic_bridge(f1, spm.pen_local)
            f2 = semantic_bridge(f2, spm.pen_mid)
        d_l = self.disc_local(gradient_reversal(f1, grl_scale))
        d_m = self.disc_mid(gradient_reversal(f2, grl_scale))
        d_g = self.disc_global(gradient_reversal(f3, grl_scale))
        return d_l, d_m, d_g

    def forward_det_head(self, f3) -> DetOutput:
        return self.det(f3)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path: str | Path, state: dict) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (little-endian float64, concatenated) and ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bin_path, manifest_path = path.with_suffix(".bin"), path.with_suffix(".json")
    entries, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name, arr in state.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"dtype": "float64", "byteorder": "little", "file": bin_path.name, "tensors": entries}
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return bin_path, manifest_path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = (path.parent / manifest["file"]).read_bytes()
    state = {}
    for e in manifest["tensors"]:
        chunk = raw[e["offset"] : e["offset"] + e["nbytes"]]
        state[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).copy()
    return state

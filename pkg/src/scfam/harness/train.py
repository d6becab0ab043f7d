"""Adversarial training on source/target scene pairs, plus evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..detection import encode_targets, loss_det, objectness_ap
from ..diffcore import SGD, Tensor, no_grad, stop_gradient
from ..divergence import TrainerConfig, estimate_h_divergence
from ..labels import AnnotatedScene, LabelingConfig, label_scene
from ..losses import (
    SOURCE,
    TARGET,
    LossWeights,
    attention_weight_local,
    attention_weight_mid,
    loss_consistency,
    loss_da_global,
    loss_da_pixel,
    loss_da_pixel_attended,
    loss_spm_global,
    loss_spm_local,
    loss_spm_mid,
    total_loss,
)
from ..net import SCFAMNet, load_checkpoint, save_checkpoint
from ..rf import jump_and_offset
from ..synthdata import UnlabeledView, generate_dataset, load_dataset
from .config import ExperimentConfig

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("L_det", "L_Sl", "L_Sm", "L_Sg", "L_l", "L_m", "L_g", "L_CR", "L_all")
CSV_COLUMNS = ("iter",) + LOSS_COLUMNS + ("dH_F2", "score", "seconds")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class MetricsRecord:
    iteration: int
    losses: dict = field(default_factory=dict)
    dH_F2: float | None = None
    score: float | None = None
    seconds: float | None = None
    extra: dict = field(default_factory=dict)

    def row(self, record_wallclock: bool = False) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))

        cells = [str(self.iteration)]
        cells += [fmt(self.losses.get(c)) for c in LOSS_COLUMNS]
        cells += [fmt(self.dH_F2), fmt(self.score), fmt(self.seconds) if record_wallclock else ""]
        return cells


@dataclass
class Datasets:
    source_train: list[AnnotatedScene]
    target_train: UnlabeledView
    source_val: list[AnnotatedScene]
    target_val: list[AnnotatedScene]


def _seed(seed: int, name: str) -> int:
    return zlib.crc32(f"{seed}:{name}".encode())


def build_datasets(config: ExperimentConfig) -> Datasets:
    d = config.data
    if d.source_dir and d.target_dir:
        src = load_dataset(d.source_dir)
        tgt = UnlabeledView.from_scenes(load_dataset(d.target_dir))
        src_val = load_dataset(d.source_val_dir) if d.source_val_dir else src[: d.n_val]
        if not d.target_val_dir:
            raise ValueError("data.target_val_dir is required when loading datasets from disk")
        tgt_val = load_dataset(d.target_val_dir)
        return Datasets(src, tgt, src_val, tgt_val)
    s = config.seed
    return Datasets(
        generate_dataset(d.scene, d.n_source_train, None, _seed(s, "source_train")),
        UnlabeledView.from_scenes(generate_dataset(d.scene, d.n_target_train, d.shift, _seed(s, "target_train"))),
        generate_dataset(d.scene, d.n_val, None, _seed(s, "source_val")),
        generate_dataset(d.scene, d.n_val, d.shift, _seed(s, "target_val")),
    )


# -- probes ------------------------------------------------------------------------


@dataclass
class FeatureProbe:
    """Fixed images and F2 positions used for the proxy divergence."""

    source_images: np.ndarray
    target_images: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    trainer: TrainerConfig

    @classmethod
    def build(cls, net: SCFAMNet, data: Datasets, config: ExperimentConfig) -> "FeatureProbe":
        src = np.stack([s.image for s in data.source_val])
        tgt = np.stack([s.image for s in data.target_val])
        h2, w2 = net.backbone_config.tap_grids(src.shape[1:3])[1]
        n = min(len(src), len(tgt))
        rng = np.random.default_rng(_seed(config.seed, "probe"))
        k = config.probe.positions_per_image
        p = config.probe
        trainer = TrainerConfig(p.hidden, p.epochs, p.lr, p.restarts, seed=_seed(config.seed, "probe_mlp"))
        return cls(
            src[:n], tgt[:n], rng.integers(0, h2, size=(n, k)), rng.integers(0, w2, size=(n, k)), trainer
        )

    def features(self, net: SCFAMNet, images: np.ndarray) -> np.ndarray:
        with no_grad():
            _, f2, _ = net.forward_backbone(images)
        f = f2.data  # (N, C, H, W)
        idx = np.arange(len(images))[:, None]
        return f[idx, :, self.rows, self.cols].reshape(-1, f.shape[1])

    def divergence(self, net: SCFAMNet) -> float:
        return estimate_h_divergence(
            self.features(net, self.source_images), self.features(net, self.target_images), self.trainer
        )


def _det_geometry(config: ExperimentConfig, image_size):
    stack = config.backbone.stack
    k3 = stack.tap("F3")
    grid = config.backbone.tap_grids(image_size)[2]
    return grid, jump_and_offset(stack, k3)[0]


def evaluate(net: SCFAMNet, scenes: Sequence[AnnotatedScene], config: ExperimentConfig, probe: FeatureProbe | None = None, iteration: int = 0) -> MetricsRecord:
    """Target-domain surrogate score, SPM accuracy and (optionally) the F2 probe."""
    if len(scenes) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    images = np.stack([s.image for s in scenes])
    grid, stride = _det_geometry(config, images.shape[1:3])
    targets = encode_targets(scenes, grid, stride, config.heads.num_classes)
    extra = {}
    with no_grad():
        f1, f2, f3 = net.forward_backbone(images)
        det = net.forward_det_head(f3)
        score = objectness_ap(det.objectness.data, targets)
        if net.use_spm:
            spm = net.forward_spm(f1, f2, f3)
            lab = LabelingConfig(config.labeling.zeta, config.heads.num_classes)
            maps = [label_scene(s, config.backbone.stack, lab) for s in scenes]
            local = np.stack([m.local for m in maps])
            extra["spm_local_acc"] = float(np.mean((spm.p_local.data[:, 0] >= 0.5) == local))
            glob = np.stack([m.global_vec for m in maps])
            extra["spm_global_acc"] = float(np.mean((spm.p_global.data >= 0.5) == glob))
    dh = probe.divergence(net) if probe is not None else None
    return MetricsRecord(iteration, {}, dh, score, None, extra)


# -- training ------------------------------------------------------------------------


@dataclass
class TrainResult:
    net: SCFAMNet
    history: list[MetricsRecord]
    config: ExperimentConfig
    timing: dict = field(default_factory=dict)

    @property
    def weights(self):
        return self.net.state_dict()


def build_net(config: ExperimentConfig) -> SCFAMNet:
    c = config.components
    return SCFAMNet(config.backbone, config.heads, use_da=c.MDA, use_spm=c.SPM, use_sbc=c.SBC, seed=config.seed)


def effective_pool_size(config: ExperimentConfig, mid_grid) -> tuple[int, int]:
    ha, wa = config.pooling.pool_size
    return min(ha, mid_grid[0]), min(wa, mid_grid[1])


class Trainer:
    def __init__(self, config: ExperimentConfig, data: Datasets | None = None):
        self.config = config.validate()
        self.data = data or build_datasets(config)
        self.net = build_net(config)
        o = config.optimizer
        named = list(self.net.named_parameters())
        main = [p for n, p in named if not n.startswith("disc")]
        disc = [p for n, p in named if n.startswith("disc")]
        self.opt = SGD(main, lr=o.lr, momentum=o.momentum, weight_decay=o.weight_decay)
        self.disc_opt = SGD(disc, lr=o.lr * o.disc_lr_mult, momentum=o.momentum, weight_decay=o.weight_decay) if disc else None
        self.weights = LossWeights(**vars(config.losses))
        self.rng = np.random.default_rng(_seed(config.seed, "batches"))
        self.image_size = self.data.source_train[0].image_size
        grids = config.backbone.tap_grids(self.image_size)
        self.pool_hw = effective_pool_size(config, grids[1])
        self.det_grid, self.det_stride = _det_geometry(config, self.image_size)
        self.src_images = np.stack([s.image for s in self.data.source_train])
        self.tgt_images = np.stack(list(self.data.target_train.images))
        self.det_targets = encode_targets(self.data.source_train, self.det_grid, self.det_stride, config.heads.num_classes)
        if config.components.SPM:
            lab = LabelingConfig(config.labeling.zeta, config.heads.num_classes)
            maps = [label_scene(s, config.backbone.stack, lab) for s in self.data.source_train]
            self.lab_local = np.stack([m.local for m in maps])[:, None].astype(np.float64)
            self.lab_mid = np.stack([m.mid for m in maps]).astype(np.float64)
            self.lab_global = np.stack([m.global_vec for m in maps]).astype(np.float64)
        self._src_order = self._tgt_order = np.zeros(0, dtype=int)

    def _next(self, attr: str, n_total: int, k: int) -> np.ndarray:
        order = getattr(self, attr)
        if len(order) < k:
            order = np.concatenate([order, self.rng.permutation(n_total)])
        setattr(self, attr, order[k:])
        return order[:k]

    def _domain_losses(self, f1, f2, f3, spm, d: int):
        c = self.config.components
        eps = self.weights.eps_clamp
        d_l, d_m, d_g = self.net.forward_discriminators(
            f1, f2, f3, spm if c.SBC else None, grl_scale=self.config.training.grl_scale
        )
        if c.ASM:
            w_l = stop_gradient(attention_weight_local(spm.p_local)).reshape(d_l.shape)
            w_m = stop_gradient(attention_weight_mid(spm.p_mid))
            l_l = loss_da_pixel_attended(d_l, d, w_l, eps)
            l_m = loss_da_pixel_attended(d_m, d, w_m, eps)
        else:
            l_l = loss_da_pixel(d_l, d, eps)
            l_m = loss_da_pixel(d_m, d, eps)
        l_g = loss_da_global(d_g, d, self.weights.gamma, eps)
        return l_l, l_m, l_g

    def step(self, iteration: int) -> dict[str, float]:
        cfg, c = self.config, self.config.components
        eps = self.weights.eps_clamp
        si = self._next("_src_order", len(self.src_images), cfg.training.batch_source)
        parts: dict[str, Tensor | float] = {}

        f1, f2, f3 = self.net.forward_backbone(self.src_images[si])
        det = self.net.forward_det_head(f3)
        t = self.det_targets
        parts["L_det"] = loss_det(det, type(t)(t.objectness[si], t.classes[si], t.boxes[si]), eps)
        spm = None
        if c.SPM:
            spm = self.net.forward_spm(f1, f2, f3)
            parts["L_Sl"] = loss_spm_local(spm.p_local, self.lab_local[si], eps)
            parts["L_Sm"] = loss_spm_mid(spm.p_mid, self.lab_mid[si], eps)
            parts["L_Sg"] = loss_spm_global(spm.p_global, self.lab_global[si], eps)
        if c.SCR:
            parts["L_CR"] = loss_consistency(spm.p_mid, spm.p_global, self.pool_hw, eps)
        if c.MDA:
            s_l, s_m, s_g = self._domain_losses(f1, f2, f3, spm, SOURCE)
            ti = self._next("_tgt_order", len(self.tgt_images), cfg.training.batch_target)
            g1, g2, g3 = self.net.forward_backbone(self.tgt_images[ti])
            tspm = self.net.forward_spm(g1, g2, g3) if (c.SBC or c.ASM) else None
            t_l, t_m, t_g = self._domain_losses(g1, g2, g3, tspm, TARGET)
            parts["L_l"], parts["L_m"], parts["L_g"] = s_l + t_l, s_m + t_m, s_g + t_g

        loss = total_loss(
            parts["L_det"],
            parts.get("L_l", 0.0),
            parts.get("L_m", 0.0),
            parts.get("L_g", 0.0),
            parts.get("L_Sl", 0.0),
            parts.get("L_Sm", 0.0),
            parts.get("L_Sg", 0.0),
            parts.get("L_CR", 0.0),
            self.weights,
        )
        values = {k: v.item() for k, v in parts.items()}
        values["L_all"] = loss.item()
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDiverged(f"non-finite loss at iteration {iteration}: {values}", {"iteration": iteration, "losses": values})
        lr = cfg.optimizer.lr_at(iteration)
        self.opt.lr = lr
        self.opt.zero_grad()
        if self.disc_opt is not None:
            self.disc_opt.lr = lr * cfg.optimizer.disc_lr_mult
            self.disc_opt.zero_grad()
        loss.backward()
        self.opt.step()
        if self.disc_opt is not None:
            self.disc_opt.step()
        return values

    def run(self, out_dir: str | Path | None = None) -> TrainResult:
        cfg = self.config
        iters = cfg.training.iterations
        history: list[MetricsRecord] = []
        t0 = time.perf_counter()
        probe = FeatureProbe.build(self.net, self.data, cfg) if iters > 0 else None
        if iters > 0:
            rec = evaluate(self.net, self.data.target_val, cfg, probe, iteration=0)
            rec.seconds = time.perf_counter() - t0
            history.append(rec)
        acc: dict[str, float] = {}
        count = 0
        try:
            for it in range(1, iters + 1):
                vals = self.step(it - 1)
                for k, v in vals.items():
                    acc[k] = acc.get(k, 0.0) + v
                count += 1
                if it % cfg.training.log_every == 0 or it == iters:
                    rec = evaluate(self.net, self.data.target_val, cfg, probe, iteration=it)
                    rec.losses = {k: v / count for k, v in acc.items()}
                    rec.seconds = time.perf_counter() - t0
                    history.append(rec)
                    logger.info("iter %d L_all %.4f dH_F2 %.3f score %.3f", it, rec.losses["L_all"], rec.dH_F2, rec.score)
                    acc, count = {}, 0
        except TrainingDiverged as err:
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                (Path(out_dir) / "diverged.json").write_text(json.dumps(err.snapshot, indent=2))
                save_checkpoint(Path(out_dir) / "diverged_weights", self.net.state_dict())
            raise
        result = TrainResult(self.net, history, cfg, {"seconds": time.perf_counter() - t0})
        if out_dir is not None:
            write_run(result, out_dir)
        return result


def train(config: ExperimentConfig, out_dir: str | Path | None = None, data: Datasets | None = None) -> TrainResult:
    return Trainer(config, data).run(out_dir)


def write_metrics_csv(history: Sequence[MetricsRecord], path: str | Path, record_wallclock: bool = False, run_id: str | None = None) -> None:
    lines = [",".join(("run",) + CSV_COLUMNS if run_id is not None else CSV_COLUMNS)]
    for rec in history:
        cells = rec.row(record_wallclock)
        lines.append(",".join(([run_id] if run_id is not None else []) + cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_run(result: TrainResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.config.save(out / "config.yaml")
    write_metrics_csv(result.history, out / "metrics.csv", result.config.logging.record_wallclock)
    save_checkpoint(out / "weights", result.net.state_dict())
    timing = {"total_seconds": result.timing.get("seconds"), "records": [[r.iteration, r.seconds] for r in result.history]}
    (out / "timing.json").write_text(json.dumps(timing, indent=2))
    return out


def load_weights(net: SCFAMNet, path: str | Path) -> SCFAMNet:
    net.load_state_dict(load_checkpoint(path))
    return net

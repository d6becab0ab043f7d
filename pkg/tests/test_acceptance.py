"""End-to-end acceptance checks, one test per criterion.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""
import csv
import statistics
import time

import numpy as np
import pytest

from oracles import bayes_divergence_2d, semantic_vector_oracle
from scfam.diffcore import Tensor, grad_check, gradient_reversal
from scfam.divergence import DomainFeatureSet, TrainerConfig, estimate_h_divergence, estimate_mch
from scfam.harness.ablation import ABLATION_COLUMNS, run_ablation
from scfam.harness.config import ExperimentConfig
from scfam.harness.train import train
from scfam.labels import label_semantic_vector
from scfam.losses import (
    SOURCE,
    TARGET,
    binary_cross_entropy,
    loss_da_global,
    loss_da_pixel,
    loss_da_pixel_attended,
    total_loss,
)
from scfam.rf import FieldRect, output_grid_size, stack_from_layers
from test_diffcore import CASES, TOL, away_from, rnd, scalarise
from test_labels import _random_instance
from test_losses import LOSS_FNS, probs
from test_rf import _random_stack, check_stack_against_oracle

ALL_OFF = {"MDA": False, "SPM": False, "SBC": False, "ASM": False, "SCR": False}


@pytest.mark.criterion(1)
def test_receptive_field_oracle(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    done = 0
    while done < 200:
        layers = _random_stack(rng)
        try:
            output_grid_size(stack_from_layers(layers), len(layers), (40, 40))
        except ValueError:
            continue
        check_stack_against_oracle(layers, (40, 40))
        done += 1
    elapsed = time.perf_counter() - t0
    criterion.append(f"{done} stacks in {elapsed:.1f}s")
    assert elapsed < 60


@pytest.mark.criterion(2)
def test_semantic_vector_oracle(criterion):
    rng = np.random.default_rng(500)
    for _ in range(500):
        boxes, classes, zeta, field = _random_instance(rng)
        got = label_semantic_vector(boxes, classes, 4, zeta, FieldRect(*field))
        assert got.tolist() == semantic_vector_oracle(boxes, classes, 4, zeta, field, (24, 24)).tolist()
    # ratio exactly at the threshold
    boundary = 0
    for _ in range(200):
        boxes, classes, _, field = _random_instance(rng)
        for b, c in zip(boxes, classes):
            fx = FieldRect(*field)
            iw = min(b[2], fx.x1) - max(b[0], fx.x0)
            ih = min(b[3], fx.y1) - max(b[1], fx.y0)
            if iw <= 0 or ih <= 0:
                continue
            s_g = (b[2] - b[0]) * (b[3] - b[1])
            zeta = iw * ih / min(fx.area, s_g)
            got = label_semantic_vector([b], [c], 4, zeta, fx)
            assert got[c] == 1
            assert got.tolist() == semantic_vector_oracle([b], [c], 4, zeta, field, (24, 24)).tolist()
            boundary += 1
    criterion.append(f"500 random + {boundary} boundary instances")


@pytest.mark.criterion(3)
def test_gradient_correctness(criterion):
    for name, (op, shapes) in sorted(CASES.items()):
        xs = [rnd(*s, seed=i + 1) for i, s in enumerate(shapes)]
        if name == "log":
            xs = [rnd(3, 4, seed=1, lo=0.2, hi=2.0)]
        if name == "div":
            xs[1] = rnd(2, 3, seed=5, lo=0.5, hi=2.0)
        if name in ("relu", "abs"):
            away_from(xs[0], [0.0])
        if name == "clip":
            away_from(xs[0], [-0.5, 0.5])
        if name == "smooth_l1":
            xs = [rnd(3, 4, seed=1, lo=-3, hi=3)]
            away_from(xs[0], [-1.0, 0.0, 1.0])
        assert grad_check(scalarise(op), xs, eps=1e-5, tol=TOL).passed, name
    for name, (f, shape) in sorted(LOSS_FNS.items()):
        assert grad_check(f, Tensor(probs(*shape, seed=11)), eps=1e-6, tol=1e-4).passed, name
    x = Tensor(np.zeros((3, 4)), requires_grad=True)
    g = np.random.default_rng(4).normal(size=(3, 4))
    (gradient_reversal(x) * g).sum().backward()
    assert np.array_equal(x.grad, -g)
    criterion.append(f"{len(CASES)} ops, {len(LOSS_FNS)} losses, reversal exact")


@pytest.mark.criterion(4)
def test_divergence_calibration(criterion):
    t0 = time.perf_counter()
    cfg = TrainerConfig(hidden=16, epochs=150, restarts=2)
    rng = np.random.default_rng(4)
    same = estimate_h_divergence(rng.normal(0, 1, (2000, 2)), rng.normal(0, 1, (2000, 2)), cfg)
    apart = estimate_h_divergence(rng.normal(0, 0.3, (300, 2)), rng.normal(6, 0.3, (300, 2)), cfg)
    assert same <= 0.15 and apart >= 1.85
    spec = {frozenset({0}): 0.5, frozenset({1}): 1.0, frozenset({0, 1}): 2.0}
    vecs, subsets, doms = [], [], []
    for subset, shift in spec.items():
        for dom, mean in ((0, 0.0), (1, shift)):
            vecs.append(rng.normal([mean, 0.0], 1.0, size=(1500, 2)))
            subsets += [subset] * 1500
            doms += [dom] * 1500
    rep = estimate_mch(DomainFeatureSet(np.vstack(vecs), subsets, np.array(doms)), cfg)
    worst = 0.0
    for subset, shift in spec.items():
        oracle = bayes_divergence_2d((0.0, 0.0), (shift, 0.0), 1.0)
        worst = max(worst, abs(rep.per_subset[tuple(sorted(subset))] - oracle))
    assert worst <= 0.15
    assert rep.total == sum(rep.per_subset.values())
    elapsed = time.perf_counter() - t0
    criterion.append(f"identical {same:.3f}, disjoint {apart:.3f}, worst Gaussian gap {worst:.3f}, {elapsed:.0f}s")
    assert elapsed < 300


@pytest.mark.criterion(5)
def test_sign_and_weight_semantics(criterion):
    p = probs(2, 5, 5, seed=1)
    for d in (SOURCE, TARGET):
        assert loss_da_pixel_attended(p, d, np.ones_like(p)).item() == loss_da_pixel(p, d).item()
    q = probs(16, seed=2)
    for d in (SOURCE, TARGET):
        bce = binary_cross_entropy(Tensor(q), np.full(16, float(d))).mean().item()
        assert loss_da_global(q, d, gamma=0.0).item() == pytest.approx(bce, rel=1e-15, abs=0)
    assert total_loss(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0) == 0.0
    criterion.append("attended == plain, gamma 0 == BCE, zero total")


def _trend_config(seed: int, components: dict) -> ExperimentConfig:
    return ExperimentConfig().with_overrides(
        {"seed": seed, "data.scene.seed": seed, "training.iterations": 2000, "training.log_every": 1000, "components": components}
    )


@pytest.mark.criterion(6)
def test_adaptation_trend(criterion):
    base_dh, base_score, full_dh, full_score = [], [], [], []
    for seed in (0, 1, 2):
        t0 = time.perf_counter()
        src = train(_trend_config(seed, ALL_OFF)).history[-1]
        full = train(_trend_config(seed, {c: True for c in ALL_OFF})).history[-1]
        assert time.perf_counter() - t0 < 30 * 60
        base_dh.append(src.dH_F2)
        base_score.append(src.score)
        full_dh.append(full.dH_F2)
        full_score.append(full.score)
    m = {k: statistics.median(v) for k, v in (("bd", base_dh), ("bs", base_score), ("fd", full_dh), ("fs", full_score))}
    criterion.append(
        f"dH source-only {m['bd']:.3f} vs full {m['fd']:.3f}; score source-only {m['bs']:.3f} vs full {m['fs']:.3f}"
    )
    assert m["fd"] <= 0.8 * m["bd"]
    assert m["fs"] >= m["bs"]


@pytest.mark.criterion(7)
def test_ablation_chain(criterion, tmp_path):
    cfg = ExperimentConfig().with_overrides({"training.iterations": 50, "training.log_every": 50})
    rows = run_ablation(cfg, "chain", tmp_path)
    assert [r["cell"] for r in rows] == ["MDA", "+SPM", "+SBC", "+ASM", "+SCR"]
    with open(tmp_path / "ablation.csv") as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == ABLATION_COLUMNS and len(table) == 6
    assert all(cell != "" for row in table[1:] for cell in row)
    criterion.append("scores " + ", ".join(f"{r['score']:.3f}" for r in rows))


@pytest.mark.criterion(8)
def test_defaults_in_emitted_config(criterion, tmp_path):
    cfg = ExperimentConfig()
    cfg.save(tmp_path / "config.yaml")
    text = (tmp_path / "config.yaml").read_text()
    assert cfg.labeling.zeta == 0.6 and cfg.pooling.pool_size == [10, 10]
    assert "zeta: 0.6" in text and "pool_size: [10, 10]" in text
    criterion.append("zeta 0.6, pool 10x10")


@pytest.mark.criterion(9)
def test_reproducible_metrics(criterion, tmp_path):
    cfg = ExperimentConfig().with_overrides({"training.iterations": 20, "training.log_every": 10})
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    criterion.append(f"{len(a.splitlines())} lines identical")

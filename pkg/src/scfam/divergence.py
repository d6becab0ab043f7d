"""Empirical H-divergence and its mixed-class decomposition.

The hypothesis class is a two-layer MLP trained with the local autodiff
core; the inner minimum over classifiers is approximated by a few seeded
restarts (chosen on the training half) and scored on the held-out half.
"""
from __future__ import annotations

import csv
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .diffcore import Adam, Linear, Module, Tensor, log, no_grad, relu, sigmoid, clip


@dataclass(frozen=True)
class TrainerConfig:
    hidden: int = 32
    epochs: int = 300
    lr: float = 0.01
    restarts: int = 3
    weight_decay: float = 0.0
    min_samples: int = 8
    seed: int = 0


class _MLP(Module):
    def __init__(self, d, hidden, rng):
        self.fc1 = Linear(d, hidden, rng=rng)
        self.fc2 = Linear(hidden, 1, rng=rng, gain=1.0)

    def forward(self, x):
        return sigmoid(self.fc2(relu(self.fc1(x)))).reshape(x.shape[0])


def _canonical_order(x: np.ndarray) -> np.ndarray:
    """Row order that depends only on the row values."""
    if len(x) == 0:
        return np.arange(0)
    return np.lexsort(x.T[::-1])


def _split(x: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    x = x[_canonical_order(x)]
    idx = rng.permutation(len(x))
    half = len(x) // 2
    return x[idx[:half]], x[idx[half:]]


def _train_classifier(xs, xt, d, cfg: TrainerConfig, rng) -> _MLP:
    x = Tensor(np.vstack([xs, xt]))
    y = np.concatenate([np.zeros(len(xs)), np.ones(len(xt))])
    # balance the two domains regardless of sample counts
    w = np.concatenate([np.full(len(xs), 0.5 / len(xs)), np.full(len(xt), 0.5 / len(xt))])
    model = _MLP(d, cfg.hidden, rng)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    for _ in range(cfg.epochs):
        p = clip(model(x), 1e-7, 1 - 1e-7)
        loss = -((y * log(p) + (1.0 - y) * log(1.0 - p)) * w).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


def _errors(model: _MLP, xs, xt) -> tuple[float, float]:
    with no_grad():
        ps = model(Tensor(xs)).data
        pt = model(Tensor(xt)).data
    return float(np.mean(ps >= 0.5)), float(np.mean(pt < 0.5))


@dataclass
class HDivergenceResult:
    divergence: float
    err_source: float
    err_target: float
    candidates: list[tuple[float, float]] = field(default_factory=list)


def estimate_h_divergence_detail(source, target, config: TrainerConfig = TrainerConfig()) -> HDivergenceResult:
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.ndim == 1:
        source = source[:, None]
    if target.ndim == 1:
        target = target[:, None]
    if source.shape[1] != target.shape[1]:
        raise ValueError(f"feature dimensions differ: {source.shape[1]} vs {target.shape[1]}")
    for name, arr in (("source", source), ("target", target)):
        if len(arr) < config.min_samples:
            raise ValueError(f"{name} has {len(arr)} samples; at least {config.min_samples} required")
    rng = np.random.default_rng(config.seed)
    s_tr, s_ev = _split(source, rng)
    t_tr, t_ev = _split(target, rng)
    mu = np.vstack([s_tr, t_tr]).mean(axis=0)
    sd = np.vstack([s_tr, t_tr]).std(axis=0)
    sd[sd < 1e-12] = 1.0
    s_tr, s_ev, t_tr, t_ev = ((a - mu) / sd for a in (s_tr, s_ev, t_tr, t_ev))
    # pick the restart on training error so the held-out score stays unbiased
    candidates, fit_err = [], []
    for r in range(config.restarts):
        model = _train_classifier(s_tr, t_tr, source.shape[1], config, np.random.default_rng([config.seed, r]))
        fit_err.append(sum(_errors(model, s_tr, t_tr)))
        candidates.append(_errors(model, s_ev, t_ev))
    best = candidates[int(np.argmin(fit_err))]
    d = float(np.clip(2.0 * (1.0 - (best[0] + best[1])), 0.0, 2.0))
    return HDivergenceResult(d, best[0], best[1], candidates)


def estimate_h_divergence(source, target, config: TrainerConfig = TrainerConfig()) -> float:
    """Proxy H-divergence in [0, 2] between two sets of feature vectors."""
    return estimate_h_divergence_detail(source, target, config).divergence


# -- labelled feature sets ---------------------------------------------------------


@dataclass
class DomainFeatureSet:
    vectors: np.ndarray
    subsets: list[frozenset]
    domains: np.ndarray

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        self.subsets = [frozenset(int(c) for c in s) for s in self.subsets]
        self.domains = np.asarray(self.domains, dtype=int)
        if not (len(self.vectors) == len(self.subsets) == len(self.domains)):
            raise ValueError("vectors, subsets and domains must have equal length")
        if not np.isin(self.domains, (0, 1)).all():
            raise ValueError("domain tags must be 0 or 1")

    def __len__(self):
        return len(self.domains)

    def select(self, subset: frozenset, domain: int) -> np.ndarray:
        mask = np.array([s == subset for s in self.subsets], dtype=bool) & (self.domains == domain)
        return self.vectors[mask]

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "DomainFeatureSet":
        records = list(records)
        return cls(
            np.array([r["vector"] for r in records], dtype=np.float64),
            [r["subset"] for r in records],
            np.array([r["domain"] for r in records]),
        )

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "DomainFeatureSet":
        with open(path) as fh:
            return cls.from_records(json.loads(line) for line in fh if line.strip())


def subset_key(subset: Iterable[int]) -> tuple[int, ...]:
    return tuple(sorted(subset))


def _subset_sort_key(subset: frozenset):
    t = subset_key(subset)
    return (len(t), t)


@dataclass(frozen=True)
class SubsetInfo:
    subset: tuple[int, ...]
    n_source: int
    n_target: int
    estimable: bool


def enumerate_mixed_classes(features: DomainFeatureSet, min_samples: int = 1) -> list[SubsetInfo]:
    """Class subsets actually observed, ordered by size then lexicographically."""
    seen = sorted({s for s in features.subsets if s}, key=_subset_sort_key)
    out = []
    for s in seen:
        ns = sum(1 for sub, d in zip(features.subsets, features.domains) if sub == s and d == 0)
        nt = sum(1 for sub, d in zip(features.subsets, features.domains) if sub == s and d == 1)
        out.append(SubsetInfo(subset_key(s), ns, nt, ns >= min_samples and nt >= min_samples))
    return out


@dataclass
class DivergenceReport:
    per_subset: dict[tuple[int, ...], float]
    total: float
    unestimable: list[tuple[int, ...]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_subset": [{"subset": list(k), "d_H": v} for k, v in self.per_subset.items()],
            "total": self.total,
            "unestimable": [list(k) for k in self.unestimable],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subset", "d_H"])
            for k, v in self.per_subset.items():
                w.writerow(["+".join(map(str, k)), repr(v)])


def _subset_config(config: TrainerConfig, subset: tuple[int, ...]) -> TrainerConfig:
    seed = zlib.crc32(f"{config.seed}:{subset}".encode())
    return TrainerConfig(**{**asdict(config), "seed": seed})


def estimate_mch(
    features: DomainFeatureSet,
    config: TrainerConfig = TrainerConfig(),
    subsets: Sequence[Iterable[int]] | None = None,
) -> DivergenceReport:
    """Sum of per-subset divergences over the observed single and mixed classes.

    ``subsets`` restricts the estimate to the given class subsets (e.g. the
    singletons, which gives the class-wise divergence).
    """
    infos = enumerate_mixed_classes(features, config.min_samples)
    if subsets is not None:
        wanted = {subset_key(s) for s in subsets}
        infos = [i for i in infos if i.subset in wanted]
    per, skipped = {}, []
    for info in infos:
        if not info.estimable:
            skipped.append(info.subset)
            continue
        s = frozenset(info.subset)
        per[info.subset] = estimate_h_divergence(
            features.select(s, 0), features.select(s, 1), _subset_config(config, info.subset)
        )
    if not per:
        raise ValueError("no class subset has enough samples in both domains")
    total = 0.0
    for v in per.values():
        total += v
    return DivergenceReport(per, total, skipped)


def estimate_classwise(features: DomainFeatureSet, config: TrainerConfig = TrainerConfig()) -> DivergenceReport:
    """Single-class terms only."""
    singles = [i.subset for i in enumerate_mixed_classes(features) if len(i.subset) == 1]
    return estimate_mch(features, config, subsets=singles)


# -- estimator front-ends ------------------------------------------------------------


class HDivergenceEstimator(BaseEstimator):
    """``fit(X, domain)`` with domain 0 = source, 1 = target; result in ``divergence_``."""

    def __init__(self, hidden=32, epochs=300, lr=0.01, restarts=3, weight_decay=0.0, min_samples=8, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.restarts = restarts
        self.weight_decay = weight_decay
        self.min_samples = min_samples
        self.random_state = random_state

    def _config(self) -> TrainerConfig:
        return TrainerConfig(
            self.hidden, self.epochs, self.lr, self.restarts, self.weight_decay, self.min_samples, self.random_state
        )

    def fit(self, X, domain):
        X = np.asarray(X, dtype=np.float64)
        domain = np.asarray(domain)
        if len(X) != len(domain):
            raise ValueError(f"X has {len(X)} rows but domain has {len(domain)}")
        res = estimate_h_divergence_detail(X[domain == 0], X[domain == 1], self._config())
        self.divergence_ = res.divergence
        self.err_source_ = res.err_source
        self.err_target_ = res.err_target
        return self

    def score(self, X=None, domain=None) -> float:
        if X is not None:
            self.fit(X, domain)
        return self.divergence_


class MixedClassDivergence(HDivergenceEstimator):
    """``fit(X, subsets, domain)``; the report lands in ``report_``."""

    def fit(self, X, subsets, domain):
        fs = DomainFeatureSet(X, subsets, domain)
        self.report_ = estimate_mch(fs, self._config())
        self.divergence_ = self.report_.total
        return self

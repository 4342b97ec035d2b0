"""Oracle checks behind ``padcl verify`` and the acceptance suite.

Each check returns a :class:`Check` carrying the measured error, its
tolerance and the verdict, so callers can print one line per check.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .encoders import EncoderConfig, init_encoders
from .metrics import ScoreSet, auc, candidate_thresholds, delta_m, eer_threshold, far_frr, hter
from .numcore import ParamView, ParameterStore, Tensor
from .prompting import PromptBank, forward, map_loss
from .sewc import ConsolidationState, FisherSnapshot, dense_ewc_penalty, fisher_diagonal, sewc_penalty

SUITES = ("grad", "sewc", "metrics", "all")


@dataclass
class Check:
    name: str
    value: float
    tol: float
    ok: bool

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.value:.3e} (tol {self.tol:.0e})"


def _below(name: str, value: float, tol: float) -> Check:
    return Check(name, float(value), tol, bool(value < tol))


# ---------------------------------------------------------------- gradients

def toy_total_loss(seed: int = 0):
    """A two-layer 64-bit toy model at domain 2 with one consolidated snapshot.

    Returns ``(store, loss_fn, trainable_indices)`` where ``loss_fn`` is the
    full training objective (prompting loss plus consolidation penalty).
    """
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(C=16, C_out=16, depth=2, heads=2)
    store = ParameterStore(np.float64)
    init_encoders(store, cfg, 4, rng)
    bank = PromptBank.create(store, 4, 4, cfg.C, rng)
    bank.register(1, rng)
    bank.freeze(1)
    bank.register(2, rng)
    store["alpha.2"] = rng.normal(0, 0.5, 4)
    M = store.penalizable_indices().size
    cons = ConsolidationState(0.5, M)
    cons.add(FisherSnapshot(1, rng.uniform(0, 1, M), store.penalizable_vector() + rng.normal(0, 0.01, M)))
    x = rng.uniform(size=(3, 1, 32, 32))
    y = [0, 1, 1]
    trainable = list(store.penalizable) + bank.trainable_names(2)

    def loss_fn(st: ParameterStore) -> Tensor:
        pv = ParamView(st, trainable)
        return nc.add(map_loss(forward(pv, cfg, bank, 2, x), y), sewc_penalty(pv, cons))

    idx = np.concatenate([np.arange(store.offset(n), store.offset(n) + store[n].size) for n in trainable])
    return store, loss_fn, idx


def check_gradients(n_coords: int = 256, seed: int = 0) -> list[Check]:
    store, loss_fn, idx = toy_total_loss(seed)
    sample = np.random.default_rng(seed + 1).choice(idx, size=min(n_coords, idx.size), replace=False)
    err = nc.finite_diff_check(loss_fn, store, 1e-5, np.sort(sample))
    return [_below(f"total-loss gradient vs central differences ({sample.size} coords)", err, 1e-4)]


# ---------------------------------------------------------------- consolidation

def _dense_oracle(theta, snapshots) -> float:
    return 0.5 * sum(float(np.sum(s.fisher * (theta - s.theta_star) ** 2)) for s in snapshots)


def check_sewc(trials: int = 5, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst_sel = worst_dense = 0.0
    zero_ok = True
    for _ in range(trials):
        store = ParameterStore(np.float64)
        store.add("img.a", rng.normal(size=(4, 3)), penalizable=True)
        store.add("txt.b", rng.normal(size=(5,)), penalizable=True)
        store.add("prompt.x", rng.normal(size=(2,)))
        M = store.penalizable_indices().size
        state = ConsolidationState(1.0, M)
        zero_ok &= sewc_penalty(ParamView(store), state).item() == 0.0
        for j in (1, 2, 3):
            state.add(FisherSnapshot(j, rng.uniform(0, 2, M), rng.normal(size=M)))
        oracle = _dense_oracle(store.penalizable_vector(), state.snapshots)
        worst_sel = max(worst_sel, abs(sewc_penalty(ParamView(store), state).item() - oracle))
        worst_dense = max(worst_dense, abs(dense_ewc_penalty(ParamView(store), state.snapshots).item() - oracle))
    return [
        _below("selective penalty at p=1 vs dense oracle", worst_sel, 1e-12),
        _below("dense penalty vs full-sum oracle", worst_dense, 1e-12),
        Check("penalty with no past domains is exactly 0", 0.0 if zero_ok else 1.0, 0.0, zero_ok),
        check_fisher(seed),
    ]


def _linear_loss(pv, sample):
    x, y = sample
    logits = nc.add(nc.matmul(Tensor(x[None]), pv["img.W"]), pv["img.b"])
    return nc.cross_entropy(logits, [y])


def check_fisher(seed: int = 0) -> Check:
    """Ten-parameter softmax regression against closed-form per-sample gradients."""
    rng = np.random.default_rng(seed)
    store = ParameterStore(np.float64)
    store.add("img.W", rng.normal(size=(4, 2)), penalizable=True)
    store.add("img.b", rng.normal(size=(2,)), penalizable=True)
    samples = [(rng.normal(size=4), int(rng.integers(2))) for _ in range(5)]
    F = fisher_diagonal(store, _linear_loss, samples)
    W, b = store["img.W"], store["img.b"]
    ref = np.zeros(10)
    for x, y in samples:
        z = x @ W + b
        p = np.exp(z - z.max())
        p /= p.sum()
        d = p - np.eye(2)[y]
        ref += np.concatenate([np.outer(x, d).reshape(-1), d]) ** 2
    ref /= len(samples)
    return _below("Fisher diagonal vs brute-force squared gradients", np.abs(F - ref).max(), 1e-10)


# ---------------------------------------------------------------- metrics

def _brute(scores, labels):
    real = [s for s, y in zip(scores, labels) if y == 1]
    spoof = [s for s, y in zip(scores, labels) if y == 0]
    pairs = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(real, spoof))
    best, gap = None, math.inf
    for c in candidate_thresholds(np.asarray(scores)):
        fa = sum(s >= c for s in spoof) / len(spoof)
        fr = sum(s < c for s in real) / len(real)
        if abs(fa - fr) < gap:
            best, gap = c, abs(fa - fr)
    return pairs / (len(real) * len(spoof)), best


def check_metrics(trials: int = 100, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for i in range(trials):
        n = int(rng.integers(4, 20))
        scores = rng.uniform(size=n) if i % 2 else rng.integers(0, 5, n) / 4
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        ss = ScoreSet(scores, labels)
        a_ref, thr_ref = _brute(scores, labels)
        thr = float(rng.uniform())
        fa, fr = far_frr(ss, thr)
        h_ref = (sum(s >= thr for s, y in zip(scores, labels) if y == 0) / (labels == 0).sum()
                 + sum(s < thr for s, y in zip(scores, labels) if y == 1) / (labels == 1).sum()) / 2
        mismatches += (auc(ss) != a_ref) + (eer_threshold(ss) != thr_ref) + (hter(ss, thr) != h_ref)
        mismatches += auc(ScoreSet(scores ** 3, labels)) != auc(ss) if len(np.unique(scores ** 3)) == len(
            np.unique(scores)) else 0
    d1 = abs(100 * delta_m((0.0043, 0.0233), (0.0043, 0.0)) - 1.17)
    d2 = abs(100 * delta_m((0.0607, 0.0), (0.0043, 0.0)) - 2.83)
    return [
        Check(f"hter/auc/eer vs exhaustive oracles ({trials} sets)", float(mismatches), 0.0, mismatches == 0),
        _below("delta_m% (0.43, 2.33 | 0.43, 0.00) vs 1.17", d1, 0.005),
        _below("delta_m% (6.07, 0.00 | 0.43, 0.00) vs 2.83", d2, 0.005),
    ]


def run_suite(suite: str) -> list[Check]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; valid: {', '.join(SUITES)}")
    out: list[Check] = []
    if suite in ("grad", "all"):
        out += check_gradients()
    if suite in ("sewc", "all"):
        out += check_sewc()
    if suite in ("metrics", "all"):
        out += check_metrics()
    return out

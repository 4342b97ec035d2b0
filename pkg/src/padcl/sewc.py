"""Selective elastic weight consolidation.

All index sets are positions in S, the concatenation of the penalizable
store entries in insertion order (``ParameterStore.penalizable``).  Fisher
snapshots and anchors are dense float64 vectors over S.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ParamView, ParameterStore, Tape, Tensor


class RehearsalViolation(RuntimeError):
    """A training-path operation touched data from a domain other than the current one."""


@dataclass(frozen=True)
class FisherSnapshot:
    domain: int
    fisher: np.ndarray
    theta_star: np.ndarray

    def __post_init__(self):
        if self.fisher.shape != self.theta_star.shape:
            raise ValueError("fisher and theta_star must have the same length")
        if (self.fisher < 0).any():
            raise ValueError("Fisher entries must be nonnegative")
        self.fisher.setflags(write=False)
        self.theta_star.setflags(write=False)


def fisher_diagonal(store: ParameterStore, sample_loss: Callable[[ParamView, object], Tensor],
                    samples: Iterable, names: Sequence[str] | None = None) -> np.ndarray:
    """Mean squared per-sample gradient over ``names`` (default: S).

    One tape per sample, squares accumulated in float64 in iteration order.
    """
    names = store.penalizable if names is None else list(names)
    total = None
    n = 0
    for sample in samples:
        pv = ParamView(store, trainable=names)
        with Tape() as tape:
            loss = sample_loss(pv, sample)
            grads = tape.backward(loss)
        g = store.flatten_grads(grads, names).astype(np.float64)
        if not np.isfinite(g).all():
            raise nc.NumericalError("non-finite per-sample gradient in Fisher estimate")
        total = g * g if total is None else total + g * g
        n += 1
    if n == 0:
        raise ValueError("Fisher estimate needs at least one sample")
    return total / n


def estimate_fisher(store: ParameterStore, bank, t: int, data, n_samples: int, enc_cfg,
                    families: Sequence[str] | None = None, use_visual: bool = True) -> FisherSnapshot:
    """Empirical diagonal Fisher of the prompting loss at the current weights.

    Uses the first ``n_samples`` samples of ``data`` (which must be domain
    ``t``'s training split) under domain ``t``'s prompts; prompts themselves
    are not differentiated.
    """
    from .prompting import FAMILIES, forward, map_loss

    if data.domain != t:
        raise RehearsalViolation(f"Fisher for domain {t} requested with data of domain {data.domain}")
    n = min(n_samples, len(data))
    if n <= 0:
        raise ValueError("Fisher estimate needs a nonempty dataset")
    fams = FAMILIES if families is None else tuple(families)

    def sample_loss(pv, i):
        x, y = data.read([i], domain=t)
        return map_loss(forward(pv, enc_cfg, bank, t, x, fams, use_visual), y)

    fisher = fisher_diagonal(store, sample_loss, range(n))
    return FisherSnapshot(t, fisher, store.penalizable_vector())


def quantile_threshold(values, p: float) -> tuple[float, np.ndarray]:
    """Threshold and index set of the top-``p`` fraction of ``values``.

    With q = 1 - p the threshold is the smallest value such that at least a
    fraction q of entries are <= it, i.e. the ceil(q*M)-th smallest value
    (the minimum when q = 0).  Ties at the threshold are all kept.
    """
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("quantile of an empty array")
    q = 1.0 - p
    rank = math.ceil(round(q * v.size, 9))
    tau = float(np.sort(v)[max(rank, 1) - 1])
    return tau, np.flatnonzero(v >= tau)


def union_important(sets: Iterable[np.ndarray]) -> np.ndarray:
    out = np.zeros(0, dtype=np.int64)
    for s in sets:
        out = np.union1d(out, np.asarray(s, dtype=np.int64))
    return out


@dataclass
class ConsolidationState:
    p: float
    size: int
    snapshots: list[FisherSnapshot] = field(default_factory=list)
    per_domain_sets: list[np.ndarray] = field(default_factory=list)
    cumulative: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def add(self, snap: FisherSnapshot) -> None:
        if snap.fisher.size != self.size:
            raise ValueError(f"snapshot over {snap.fisher.size} indices, state expects {self.size}")
        _, J = quantile_threshold(snap.fisher, self.p)
        self.snapshots.append(snap)
        self.per_domain_sets.append(J)
        self.cumulative = union_important([self.cumulative, J])

    def mask(self, indices: np.ndarray) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        m[indices] = True
        return m


def _theta_tensors(pv: ParamView) -> list[Tensor]:
    return [pv[n] for n in pv.store.penalizable]


def _quadratic_anchor(parts: list[Tensor], weights: list[np.ndarray], anchors: list[np.ndarray],
                      lam: float, dtype) -> Tensor:
    """0.5 * lam * sum_j sum_i w_j[i] (theta_i - anchor_j[i])**2, fused."""
    sizes = [p.data.size for p in parts]
    theta = np.concatenate([p.data.reshape(-1) for p in parts]).astype(np.float64)
    value = 0.0
    grad = np.zeros_like(theta)
    for w, a in zip(weights, anchors):
        d = theta - a
        wd = w * d
        value += float(np.dot(wd, d))
        grad += wd
    value *= 0.5 * lam
    grad *= lam
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(grad * float(g), bounds)
        return tuple(pc.reshape(p.shape).astype(p.dtype) for pc, p in zip(pieces, parts))

    return nc.custom_op("sewc_penalty", np.asarray(value, dtype=dtype), parts, vjp)


def sewc_penalty(pv: ParamView, state: ConsolidationState, lam: float = 1.0,
                 selected_only: bool = False) -> Tensor:
    """Selective multi-anchor penalty over the cumulative important set.

    Each selected index is anchored to every past optimum.  With
    ``selected_only`` an index only feels the anchors of the domains whose
    own top-p set contains it.
    """
    dtype = pv.dtype
    if not state.snapshots or state.cumulative.size == 0:
        return nc.Tensor(np.asarray(0.0, dtype=dtype))
    parts = _theta_tensors(pv)
    if sum(p.data.size for p in parts) != state.size:
        raise ValueError("penalizable parameters do not match the consolidation state")
    union = state.mask(state.cumulative)
    weights = []
    for snap, J in zip(state.snapshots, state.per_domain_sets):
        m = state.mask(J) if selected_only else union
        weights.append(np.where(m, snap.fisher, 0.0))
    return _quadratic_anchor(parts, weights, [s.theta_star for s in state.snapshots], lam, dtype)


def dense_ewc_penalty(pv: ParamView, snapshots: Sequence[FisherSnapshot]) -> Tensor:
    """Multi-anchor penalty over all of S, built from elementwise tape ops."""
    total = nc.Tensor(np.asarray(0.0, dtype=pv.dtype))
    names = pv.store.penalizable
    for snap in snapshots:
        start = 0
        for name in names:
            p = pv[name]
            n = p.data.size
            f = snap.fisher[start:start + n].reshape(p.shape).astype(pv.dtype)
            a = snap.theta_star[start:start + n].reshape(p.shape).astype(pv.dtype)
            start += n
            term = nc.reduce_sum(nc.mul(nc.square(nc.sub(p, a)), f))
            total = nc.add(total, term)
    return nc.scale(total, 0.5)

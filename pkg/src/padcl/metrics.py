"""PAD and incremental-learning metrics.

Scores are probabilities of the "real" class; a sample is accepted as real
iff ``score >= threshold``.  Labels: 1 = real (bona fide), 0 = spoof.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

CSV_HEADER = ("domain", "n_real", "n_spoof", "threshold", "hter", "auc", "routing_acc")


class MetricError(ValueError):
    pass


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    domains: np.ndarray | None = None
    routed: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise MetricError("scores and labels differ in length")
        if not np.isfinite(self.scores).all():
            raise MetricError("non-finite score")
        if self.scores.size and (self.scores.min() < 0 or self.scores.max() > 1):
            raise MetricError("scores must lie in [0, 1]")
        if self.domains is not None:
            self.domains = np.asarray(self.domains, dtype=np.int64).reshape(-1)
        if self.routed is not None:
            self.routed = np.asarray(self.routed, dtype=np.int64).reshape(-1)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        real = self.scores[self.labels == 1]
        spoof = self.scores[self.labels == 0]
        if real.size == 0 or spoof.size == 0:
            raise MetricError("need at least one real and one spoof sample")
        return real, spoof

    def subset(self, mask) -> "ScoreSet":
        pick = lambda a: None if a is None else a[mask]  # noqa: E731
        return ScoreSet(self.scores[mask], self.labels[mask], pick(self.domains), pick(self.routed))


def _as_set(scores, labels=None) -> ScoreSet:
    return scores if isinstance(scores, ScoreSet) else ScoreSet(scores, labels)


def far_frr(scores, threshold: float, labels=None) -> tuple[float, float]:
    real, spoof = _as_set(scores, labels).split()
    far = float(np.count_nonzero(spoof >= threshold)) / spoof.size
    frr = float(np.count_nonzero(real < threshold)) / real.size
    return far, frr


def hter(scores, threshold: float, labels=None) -> float:
    far, frr = far_frr(scores, threshold, labels)
    return (far + frr) / 2


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """-inf, midpoints between consecutive distinct sorted scores, +inf."""
    u = np.unique(scores)
    return np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2, [np.inf]])


def eer_threshold(scores, labels=None) -> float:
    """Candidate threshold minimizing |FAR - FRR|; ties go to the smallest."""
    s = _as_set(scores, labels)
    real, spoof = s.split()
    cands = candidate_thresholds(s.scores)
    # counts via sorted search: FAR(t) = #spoof >= t, FRR(t) = #real < t
    spoof_sorted = np.sort(spoof)
    real_sorted = np.sort(real)
    far = (spoof.size - np.searchsorted(spoof_sorted, cands, side="left")) / spoof.size
    frr = np.searchsorted(real_sorted, cands, side="left") / real.size
    gap = np.abs(far - frr)
    return float(cands[int(np.argmin(gap))])


def auc(scores, labels=None) -> float:
    """P(real score > spoof score), ties count one half (rank-sum form)."""
    s = _as_set(scores, labels)
    real, spoof = s.split()
    allv = np.concatenate([real, spoof])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(allv.size, dtype=np.float64)
    sorted_v = allv[order]
    # average ranks over ties
    i = 0
    while i < sorted_v.size:
        j = i
        while j + 1 < sorted_v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    r_real = ranks[:real.size].sum()
    u = r_real - real.size * (real.size + 1) / 2
    return float(u / (real.size * spoof.size))


def delta_m(hter_q, hter_b) -> float:
    """Mean normalized HTER gap to the joint-training reference, as a fraction.

    Multiply by 100 for the percentage reported in tables.
    """
    q = np.asarray(hter_q, dtype=np.float64).reshape(-1)
    b = np.asarray(hter_b, dtype=np.float64).reshape(-1)
    if q.shape != b.shape or q.size == 0:
        raise MetricError(f"need equal nonempty lengths, got {q.size} and {b.size}")
    if (b >= 1).any():
        raise MetricError("reference HTER of 1 makes the gap undefined")
    return float(np.mean((q - b) / (1 - b)))


def routing_accuracy(scores: ScoreSet) -> dict[int, float]:
    if scores.domains is None or scores.routed is None:
        raise MetricError("routing ids missing from score set")
    out = {}
    for d in np.unique(scores.domains):
        m = scores.domains == d
        out[int(d)] = float(np.mean(scores.routed[m] == d))
    return out


@dataclass
class DomainResult:
    domain: str
    n_real: int
    n_spoof: int
    threshold: float
    hter: float
    auc: float
    routing_acc: float
    seen: bool = True


@dataclass
class EvalReport:
    step: int
    rows: list[DomainResult] = field(default_factory=list)
    delta_m: float | None = None
    tag: str = ""

    def row(self, name: str) -> DomainResult:
        for r in self.rows:
            if r.domain == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.domain, r.n_real, r.n_spoof, _fmt(r.threshold), repr(r.hter), repr(r.auc),
                        repr(r.routing_acc)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, step: int = 0) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text)))
        if tuple(rows[0]) != CSV_HEADER:
            raise MetricError(f"unexpected CSV header {rows[0]}")
        rep = cls(step)
        for r in rows[1:]:
            rep.rows.append(DomainResult(r[0], int(r[1]), int(r[2]), float(r[3]), float(r[4]),
                                         float(r[5]), float(r[6])))
        return rep

    def to_text(self) -> str:
        lines = [f"step {self.step}" + (f" [{self.tag}]" if self.tag else "")]
        lines.append(f"{'domain':<16}{'HTER%':>8}{'AUC%':>8}{'route%':>8} {'thr':>10}")
        for r in self.rows:
            flag = "" if r.seen else "  (unseen)"
            lines.append(f"{r.domain:<16}{pct(r.hter):>8}{pct(r.auc):>8}{pct(r.routing_acc):>8} "
                         f"{_fmt(r.threshold):>10}{flag}")
        if self.delta_m is not None:
            lines.append(f"delta_m%: {pct(self.delta_m)}")
        return "\n".join(lines) + "\n"


def pct(x: float) -> str:
    return f"{100 * x:.2f}"


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))

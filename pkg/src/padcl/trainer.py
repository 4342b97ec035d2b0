"""Sequential domain training: the prompting loss plus selective
consolidation, Fisher snapshots, index selection and prototype banks, with
fine-tuning and joint-training baselines.
"""
from __future__ import annotations

import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import numcore as nc
from .config import TrainConfig, render
from .encoders import TokenTable, init_encoders
from .metrics import DomainResult, EvalReport, ScoreSet, auc, delta_m, eer_threshold, hter
from .numcore import ParamView, ParameterStore, Tape, checkpoint
from .optim import AdamW
from .prompting import FAMILIES, PromptBank, active_families, forward, map_loss, text_features
from .routing import PrototypeBank, build_prototypes, embed_for_routing, infer
from .sewc import ConsolidationState, FisherSnapshot, estimate_fisher, sewc_penalty
from .synthdata import AccessAudit, DomainDataset

log = logging.getLogger(__name__)

SHARED_SLOT = 1  # ft/jt keep a single prompt slot for every domain
BASELINE_FAMILIES = ("da", "fixed")


class TrainingDiverged(ArithmeticError):
    pass


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


@dataclass
class RunState:
    cfg: TrainConfig
    store: ParameterStore
    bank: PromptBank
    consolidation: ConsolidationState
    protos: PrototypeBank
    optimizer: AdamW
    domain_names: list[str] = field(default_factory=list)
    audit: AccessAudit = field(default_factory=AccessAudit)
    loss_history: dict[int, list[float]] = field(default_factory=dict)

    @property
    def families(self) -> tuple[str, ...]:
        if self.cfg.mode == "svlp":
            return active_families(self.cfg.disabled_families)
        return BASELINE_FAMILIES

    @property
    def use_visual(self) -> bool:
        return not self.cfg.no_visual

    def slot(self, t: int) -> int:
        return t if self.cfg.mode == "svlp" else SHARED_SLOT


def init_state(cfg: TrainConfig) -> RunState:
    cfg.validate()
    dtype = np.float64 if cfg.float64 else np.float32
    store = ParameterStore(dtype)
    rng = make_rng(cfg.seed, 0)
    init_encoders(store, cfg.encoder, cfg.L_v, rng)
    bank = PromptBank.create(store, cfg.L_v, cfg.N_ctx, cfg.encoder.C, rng)
    if cfg.mode != "svlp":
        bank.register(SHARED_SLOT, rng, warm_start=False)
    cons = ConsolidationState(cfg.p, int(store.penalizable_indices().size))
    return RunState(cfg, store, bank, cons, PrototypeBank(cfg.k), AdamW(cfg.lr, cfg.weight_decay))


def _trainable(state: RunState, slot: int) -> list[str]:
    fams = state.families
    names = list(state.store.penalizable)
    if state.use_visual:
        names.append(f"prompt.visual.{slot}")
    if "da" in fams or "mix" in fams:
        names.append("prompt.da")
    if "ds" in fams or "mix" in fams:
        names.append(f"prompt.ds.{slot}")
    names += [f"alpha.{slot}", "logit_scale"]
    return names


def _batches(n: int, batch: int, iterations: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    pos = 0
    for _ in range(iterations):
        if pos + batch > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos:pos + batch]
        pos += batch


def train_domain(state: RunState, data: DomainDataset, t: int, iterations: int | None = None,
                 run_dir: Path | None = None) -> RunState:
    """Optimize the prompting loss (+ consolidation penalty) on one domain."""
    cfg = state.cfg
    slot = state.slot(t)
    if cfg.mode == "svlp":
        if slot in state.bank.domains:
            raise ValueError(f"domain {t} already trained")
        state.bank.register(slot, make_rng(cfg.seed, 1, t), warm_start=cfg.warm_start_prompts)
    trainable = _trainable(state, slot)
    fams = state.families
    use_pen = cfg.sewc_active and t > 1 and state.consolidation.cumulative.size > 0
    state.optimizer.reset()
    data.audit = state.audit if cfg.mode != "jt" else None
    state.audit.current = data.domain if cfg.mode != "jt" else None
    losses = state.loss_history.setdefault(t, [])
    rng = make_rng(cfg.seed, 2, t)
    n_iter = iterations or cfg.iterations
    try:
        # overflow is reported as NumericalError by the op that produced it
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for idx in _batches(len(data), min(cfg.batch, len(data)), n_iter, rng):
                x, y = data.read(idx, domain=None if cfg.mode == "jt" else data.domain)
                pv = ParamView(state.store, trainable)
                with Tape() as tape:
                    txt = text_features(pv, cfg.encoder, state.bank, slot, fams)
                    logits = forward(pv, cfg.encoder, state.bank, slot, x, fams, state.use_visual, txt=txt)
                    l_map = map_loss(logits, y)
                    total = l_map
                    if use_pen:
                        pen = sewc_penalty(pv, state.consolidation, cfg.sewc_lambda, cfg.sewc_sum_selected_only)
                        total = nc.add(l_map, pen)
                    grads = tape.backward(total)
                losses.append(l_map.item())
                state.optimizer.step(state.store, grads)
    except nc.NumericalError as exc:
        if run_dir is not None:
            save_checkpoint(state, Path(run_dir) / f"diverged.step{t}.ckpt")
        raise TrainingDiverged(f"non-finite value while training domain {t}: {exc}") from exc
    finally:
        state.audit.current = None
        data.audit = None
    return state


def finalize_domain(state: RunState, data: DomainDataset, t: int) -> RunState:
    """Freeze domain prompts, snapshot Fisher/anchors, update index sets, build prototypes."""
    cfg = state.cfg
    if cfg.mode != "svlp":
        return state
    state.bank.freeze(t)
    data.audit = state.audit
    state.audit.current = data.domain
    try:
        if cfg.sewc_active:
            snap = estimate_fisher(state.store, state.bank, t, data, cfg.fisher_samples, cfg.encoder,
                                   state.families, state.use_visual)
            state.consolidation.add(snap)
        x, _ = data.read(np.arange(len(data)), domain=t)
    finally:
        state.audit.current = None
        data.audit = None
    feats = embed_for_routing(state.store, cfg.encoder, x)
    state.protos.add(t, build_prototypes(feats, cfg.k, cfg.seed * 1000 + t))
    return state


# ---------------------------------------------------------------- evaluation

@dataclass
class ScoreLog:
    domain: list[str] = field(default_factory=list)
    index: list[int] = field(default_factory=list)
    label: list[int] = field(default_factory=list)
    score: list[float] = field(default_factory=list)
    true_id: list[int] = field(default_factory=list)
    routed_id: list[int] = field(default_factory=list)

    HEADER = "domain,index,label,score,true_id,routed_id"

    def extend(self, name, labels, scores, true_id, routed):
        n = len(labels)
        self.domain += [name] * n
        self.index += list(range(n))
        self.label += [int(v) for v in labels]
        self.score += [float(v) for v in scores]
        self.true_id += [int(true_id)] * n
        self.routed_id += [int(v) for v in routed]

    def to_csv(self) -> str:
        rows = [self.HEADER]
        for i in range(len(self.label)):
            rows.append(f"{self.domain[i]},{self.index[i]},{self.label[i]},{self.score[i]!r},"
                        f"{self.true_id[i]},{self.routed_id[i]}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ScoreLog":
        out = cls()
        lines = text.strip().splitlines()
        if lines[0] != cls.HEADER:
            raise ValueError(f"unexpected score log header {lines[0]!r}")
        for ln in lines[1:]:
            d, i, lab, s, tid, rid = ln.split(",")
            out.domain.append(d)
            out.index.append(int(i))
            out.label.append(int(lab))
            out.score.append(float(s))
            out.true_id.append(int(tid))
            out.routed_id.append(int(rid))
        return out

    def scoreset(self, name: str) -> ScoreSet:
        m = np.array([d == name for d in self.domain])
        return ScoreSet(np.array(self.score)[m], np.array(self.label)[m],
                        np.array(self.true_id)[m], np.array(self.routed_id)[m])


def score_domain(state: RunState, test: DomainDataset, oracle_routing: bool = False):
    """(routed ids, real-class probabilities) for a test split."""
    cfg = state.cfg
    if cfg.mode == "svlp":
        force = test.domain if oracle_routing else None
        routed, probs = infer(test.images, state.store, cfg.encoder, state.bank, state.protos,
                              state.families, state.use_visual, force_domain=force)
    else:
        _, probs = infer(test.images, state.store, cfg.encoder, state.bank, state.protos,
                         state.families, state.use_visual, force_domain=SHARED_SLOT)
        routed = np.full(len(test), test.domain)
    return routed, probs[:, 1]


def evaluate(state: RunState, tests: list[DomainDataset], step: int, threshold: str = "eer",
             jt_ref: EvalReport | None = None, oracle_routing: bool = False,
             seen: set[str] | None = None) -> tuple[EvalReport, ScoreLog]:
    report = EvalReport(step, tag=state.cfg.ablation_tag)
    slog = ScoreLog()
    for test in tests:
        routed, scores = score_domain(state, test, oracle_routing)
        labels = test.labels.astype(np.int64)
        slog.extend(test.name, labels, scores, test.domain, routed)
        ss = ScoreSet(scores, labels)
        thr = eer_threshold(ss) if threshold == "eer" else parse_threshold(threshold)
        routable = state.cfg.mode == "svlp" and test.domain in state.protos.centroids
        racc = float(np.mean(routed == test.domain)) if routable else float("nan")
        report.rows.append(DomainResult(test.name, int((labels == 1).sum()), int((labels == 0).sum()),
                                        thr, hter(ss, thr), auc(ss), racc,
                                        seen=True if seen is None else test.name in seen))
    if jt_ref is not None:
        report.delta_m = delta_m_against(report, jt_ref)
    return report, slog


def delta_m_against(report: EvalReport, jt_ref: EvalReport) -> float:
    names = [r.domain for r in report.rows if r.seen]
    return delta_m([report.row(n).hter for n in names], [jt_ref.row(n).hter for n in names])


def parse_threshold(spec: str) -> float:
    if spec.startswith("fixed:"):
        return float(spec.split(":", 1)[1])
    raise ValueError(f"threshold must be 'eer' or 'fixed:<v>', got {spec!r}")


# ---------------------------------------------------------------- sequences

@dataclass
class RunResult:
    state: RunState
    reports: list[EvalReport]
    score_logs: list[ScoreLog]


def train_sequence(domains: list[tuple[DomainDataset, DomainDataset]], cfg: TrainConfig,
                   run_dir: str | Path | None = None, jt_ref: EvalReport | None = None,
                   threshold: str = "eer", on_step=None) -> RunResult:
    """Train over ``domains`` (train, test pairs with ids 1..T) in order.

    svlp/ft evaluate every seen domain after each step; jt trains once on the
    pooled training data (pooled in sorted-name order) and evaluates all.
    ``on_step(t, state)`` is called after each step's evaluation.
    """
    if not domains:
        raise ValueError("empty domain sequence")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "run.meta").write_text(_run_meta(cfg, domains))
    state = init_state(cfg)
    state.domain_names = [tr.name for tr, _ in domains]
    reports, logs = [], []
    if cfg.mode == "jt":
        pooled = pool(domains)
        train_domain(state, pooled, 1, iterations=cfg.iterations * len(domains), run_dir=run_dir)
        rep, slog = evaluate(state, [te for _, te in domains], len(domains), threshold)
        _emit(run_dir, len(domains), state, rep, slog)
        return RunResult(state, [rep], [slog])
    for t, (train, _) in enumerate(domains, start=1):
        if train.domain != t:
            raise ValueError(f"domain {train.name} carries id {train.domain}, expected {t}")
        train_domain(state, train, t, run_dir=run_dir)
        finalize_domain(state, train, t)
        rep, slog = evaluate(state, [te for _, te in domains[:t]], t, threshold, jt_ref=jt_ref)
        log.info("step %d done: %s", t, " ".join(f"{r.domain}={r.hter:.4f}" for r in rep.rows))
        _emit(run_dir, t, state, rep, slog)
        reports.append(rep)
        logs.append(slog)
        if on_step is not None:
            on_step(t, state)
    return RunResult(state, reports, logs)


def pool(domains: list[tuple[DomainDataset, DomainDataset]]) -> DomainDataset:
    ordered = sorted((tr for tr, _ in domains), key=lambda d: d.name)
    images = np.concatenate([d.images for d in ordered])
    labels = np.concatenate([d.labels for d in ordered])
    tags = np.concatenate([np.full(len(d), d.domain) for d in ordered])
    return DomainDataset("pooled", "train", images, labels, domain=0, tags=tags)


def _emit(run_dir: Path | None, t: int, state: RunState, rep: EvalReport, slog: ScoreLog) -> None:
    if run_dir is None:
        return
    save_checkpoint(state, run_dir / f"step{t}.ckpt")
    (run_dir / f"step{t}.report.csv").write_text(rep.to_csv())
    (run_dir / f"step{t}.report.txt").write_text(rep.to_text())
    (run_dir / f"step{t}.scores.csv").write_text(slog.to_csv())


def _run_meta(cfg: TrainConfig, domains) -> str:
    lines = [f"padcl {__version__}", f"numpy {np.__version__}", f"python {platform.python_version()}",
             f"seed {cfg.seed}", "domains " + " ".join(tr.name for tr, _ in domains), "", render(cfg)]
    return "\n".join(lines)


# ---------------------------------------------------------------- checkpoints

def checkpoint_entries(state: RunState) -> dict[str, np.ndarray]:
    cfg = state.cfg
    cons = state.consolidation
    meta = {
        "config": render(cfg),
        "store": state.store.meta(),
        "bank": state.bank.to_meta(),
        "domain_names": state.domain_names,
        "token_table": TokenTable().to_text(),
        "k": state.protos.k,
        "convention": state.protos.convention,
        "fisher_domains": [s.domain for s in cons.snapshots],
    }
    entries = {checkpoint.META_ENTRY: checkpoint.pack_meta(meta)}
    entries.update(state.store.entries)
    for snap, J in zip(cons.snapshots, cons.per_domain_sets):
        j = snap.domain
        entries[f"fisher.{j}"] = snap.fisher
        entries[f"theta_star.{j}"] = snap.theta_star
        entries[f"topp_set.{j}"] = cons.mask(J).astype(np.uint8)
        upto = [s for s, snp in zip(cons.per_domain_sets, cons.snapshots) if snp.domain <= j]
        entries[f"important_set.{j}"] = cons.mask(np.unique(np.concatenate(upto))).astype(np.uint8)
    for t in state.protos.domains:
        entries[f"proto.{t}"] = state.protos.centroids[t]
    return entries


def save_checkpoint(state: RunState, path: str | Path) -> None:
    checkpoint.save(path, checkpoint_entries(state))


def load_checkpoint(path: str | Path) -> RunState:
    from .config import parse

    entries = checkpoint.load(path)
    meta = checkpoint.unpack_meta(entries.pop(checkpoint.META_ENTRY))
    TokenTable.from_text(meta["token_table"])
    cfg = parse(meta["config"])
    store = ParameterStore.from_entries(entries, meta["store"])
    bank = PromptBank.from_meta(store, meta["bank"])
    cons = ConsolidationState(cfg.p, int(store.penalizable_indices().size))
    for j in meta["fisher_domains"]:
        snap = FisherSnapshot(j, entries[f"fisher.{j}"], entries[f"theta_star.{j}"])
        cons.snapshots.append(snap)
        cons.per_domain_sets.append(np.flatnonzero(entries[f"topp_set.{j}"]))
    if cons.snapshots:
        cons.cumulative = np.flatnonzero(entries[f"important_set.{cons.snapshots[-1].domain}"])
    protos = PrototypeBank(meta["k"], convention=meta["convention"])
    for name, arr in entries.items():
        if name.startswith("proto."):
            protos.add(int(name.split(".")[1]), arr)
    state = RunState(cfg, store, bank, cons, protos, AdamW(cfg.lr, cfg.weight_decay))
    state.domain_names = list(meta["domain_names"])
    return state


def describe(state: RunState) -> str:
    return json.dumps({"mode": state.cfg.mode, "domains": state.domain_names,
                       "families": list(state.families), "params": state.store.size}, indent=2)

"""Multi-aspect prompting: the prompt bank, the four text-prompt families,
cosine logits per family and their softmax-weighted aggregation.

Family order is fixed to ``(da, ds, mix, fixed)`` everywhere, including the
layout of each ``alpha.<t>`` vector.
"""
from __future__ import annotations

import math
from collections.abc import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .encoders import (
    CLASS_NAMES,
    EMBED_STD,
    EOS,
    SOS,
    EncoderConfig,
    TokenTable,
    embed_tokens,
    encode_image,
    encode_text,
    tokenize_fixed,
)
from .numcore import ParamView, ParameterStore, Tensor

FAMILIES = ("da", "ds", "mix", "fixed")
N_CLS = len(CLASS_NAMES)
LOGIT_SCALE_INIT = math.log(10.0)
PROMPT_INIT_STD = EMBED_STD


def visual_name(t: int) -> str:
    return f"prompt.visual.{t}"


def ds_name(t: int) -> str:
    return f"prompt.ds.{t}"


def alpha_name(t: int) -> str:
    return f"alpha.{t}"


DA_NAME = "prompt.da"
LOGIT_SCALE_NAME = "logit_scale"


class UnknownDomain(KeyError):
    pass


class PromptBank:
    """Per-domain visual prompts, contexts and family weights inside a store.

    The bank owns naming and freezing; the arrays themselves live in the
    shared :class:`ParameterStore` so that one tape and one checkpoint cover
    everything.
    """

    def __init__(self, store: ParameterStore, L_v: int, N_ctx: int, C: int):
        self.store = store
        self.L_v = L_v
        self.N_ctx = N_ctx
        self.C = C
        self.domains: list[int] = []
        self.frozen: set[int] = set()

    @classmethod
    def create(cls, store: ParameterStore, L_v: int, N_ctx: int, C: int,
               rng: np.random.Generator) -> "PromptBank":
        bank = cls(store, L_v, N_ctx, C)
        store.add(DA_NAME, rng.normal(0, PROMPT_INIT_STD, (N_ctx, C)))
        store.add(LOGIT_SCALE_NAME, np.asarray(LOGIT_SCALE_INIT))
        return bank

    def register(self, t: int, rng: np.random.Generator, warm_start: bool = True) -> None:
        """Add D_V(t), D_S(t) and alpha(t); warm start copies the previous domain."""
        if t in self.domains:
            raise ValueError(f"domain {t} already registered")
        prev = self.domains[-1] if self.domains else None
        if warm_start and prev is not None:
            dv = self.store[visual_name(prev)].copy()
            ds = self.store[ds_name(prev)].copy()
        else:
            dv = rng.normal(0, PROMPT_INIT_STD, (self.L_v, self.C))
            ds = rng.normal(0, PROMPT_INIT_STD, (self.N_ctx, self.C))
        self.store.add(visual_name(t), dv)
        self.store.add(ds_name(t), ds)
        self.store.add(alpha_name(t), np.zeros(len(FAMILIES)))
        self.domains.append(t)

    def freeze(self, t: int) -> None:
        self._check(t)
        self.frozen.add(t)

    def _check(self, t: int) -> None:
        if t not in self.domains:
            raise UnknownDomain(f"domain {t} not registered (known: {self.domains})")

    def trainable_names(self, t: int) -> list[str]:
        """Prompt-side names updated while training domain ``t``."""
        self._check(t)
        if t in self.frozen:
            raise ValueError(f"domain {t} is frozen")
        return [visual_name(t), DA_NAME, ds_name(t), alpha_name(t), LOGIT_SCALE_NAME]

    def to_meta(self) -> dict:
        return {"L_v": self.L_v, "N_ctx": self.N_ctx, "C": self.C,
                "domains": self.domains, "frozen": sorted(self.frozen)}

    @classmethod
    def from_meta(cls, store: ParameterStore, meta: dict) -> "PromptBank":
        bank = cls(store, meta["L_v"], meta["N_ctx"], meta["C"])
        bank.domains = list(meta["domains"])
        bank.frozen = set(meta["frozen"])
        return bank


def _special_rows(pv: ParamView, table: TokenTable) -> tuple[Tensor, Tensor]:
    return (embed_tokens(pv, table.encode([SOS]), table),
            embed_tokens(pv, table.encode([EOS]), table))


def build_families(pv: ParamView, bank: PromptBank, t: int,
                   families: Sequence[str] = FAMILIES) -> dict[str, Tensor]:
    """Per-family prompt sequences, each ``[N_cls, L, C]`` (one row per class)."""
    bank._check(t)
    table = TokenTable()
    sos, eos = _special_rows(pv, table)
    out: dict[str, Tensor] = {}
    ctx = {"da": [pv[DA_NAME]], "ds": [pv[ds_name(t)]], "mix": [pv[DA_NAME], pv[ds_name(t)]]}
    for fam in families:
        rows = []
        for c, name in enumerate(CLASS_NAMES):
            if fam == "fixed":
                rows.append(embed_tokens(pv, tokenize_fixed(name, table), table))
            else:
                e_c = nc.take_rows(pv["class_embed"], [c])
                rows.append(nc.concat_rows([sos, *ctx[fam], e_c, eos], axis=0))
        L, C = rows[0].shape
        out[fam] = nc.concat_rows([nc.reshape(r, (1, L, C)) for r in rows], axis=0)
    return out


def text_features(pv: ParamView, cfg: EncoderConfig, bank: PromptBank, t: int,
                  families: Sequence[str] = FAMILIES) -> dict[str, Tensor]:
    """Per-family class text features ``[N_cls, C_out]``."""
    return {fam: encode_text(pv, cfg, seq) for fam, seq in build_families(pv, bank, t, families).items()}


def family_logit(f_img: Tensor, f_txt: Tensor, logit_scale: Tensor) -> Tensor:
    """``exp(logit_scale) * cos(f_img, f_txt[c])`` for each class c.

    ``f_img`` is ``[C_out]`` or ``[B, C_out]``; ``f_txt`` is ``[N_cls, C_out]``.
    """
    single = f_img.data.ndim == 1
    img = nc.l2_normalize(nc.reshape(f_img, (1, -1)) if single else f_img, axis=-1)
    txt = nc.l2_normalize(f_txt, axis=-1)
    cos = nc.matmul(img, nc.transpose(txt))
    out = nc.mul(cos, nc.exp(logit_scale))
    return out[0] if single else out


def aggregation_weights(alpha: Tensor, families: Sequence[str] = FAMILIES) -> Tensor:
    """Softmax over the alpha entries of the active families."""
    idx = [FAMILIES.index(f) for f in families]
    sel = alpha if len(idx) == len(FAMILIES) else nc.getitem(alpha, np.asarray(idx))
    return nc.softmax(sel, axis=-1)


def aggregate(logits: dict[str, Tensor], alpha: Tensor) -> Tensor:
    """Weighted sum of family logits; weights from softmax(alpha) over present families."""
    fams = [f for f in FAMILIES if f in logits]
    if not fams:
        raise ValueError("aggregate needs at least one family")
    w = aggregation_weights(alpha, fams)
    total = None
    for i, fam in enumerate(fams):
        term = nc.mul(logits[fam], nc.getitem(w, i))
        total = term if total is None else nc.add(total, term)
    return total


def map_loss(agg_logits: Tensor, y) -> Tensor:
    """Cross-entropy on aggregated logits; labels 0 = spoof, 1 = real."""
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= N_CLS):
        raise ValueError(f"label out of range: {y}")
    return nc.cross_entropy(agg_logits, y)


def forward(pv: ParamView, cfg: EncoderConfig, bank: PromptBank, t: int, pixels,
            families: Sequence[str] = FAMILIES, use_visual: bool = True,
            txt: dict[str, Tensor] | None = None) -> Tensor:
    """Aggregated logits ``[B, N_cls]`` for a batch under domain ``t``'s prompts."""
    prompt = pv[visual_name(t)] if use_visual else None
    f_img = encode_image(pv, cfg, pixels, prompt)
    if txt is None:
        txt = text_features(pv, cfg, bank, t, families)
    scale = pv[LOGIT_SCALE_NAME]
    logits = {fam: family_logit(f_img, txt[fam], scale) for fam in families}
    return aggregate(logits, pv[alpha_name(t)])


def active_families(disabled: Iterable[str] = ()) -> tuple[str, ...]:
    disabled = set(disabled)
    unknown = disabled - set(FAMILIES)
    if unknown:
        raise ValueError(f"unknown families {sorted(unknown)}")
    fams = tuple(f for f in FAMILIES if f not in disabled)
    if not fams:
        raise ValueError("all prompt families disabled")
    return fams

"""Prototype banks and nearest-prototype domain routing."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .encoders import EncoderConfig, encode_image
from .numcore import ParamView, ParameterStore

EMBEDDING_CONVENTION = "image-encoder/no-prompt/l2"
MAX_ITER = 100
TOL = 1e-6


class RoutingError(ValueError):
    pass


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(-1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise RoutingError("k-means++ ran out of distinct points")
        i = int(rng.choice(n, p=d2 / total))
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(-1))
    return np.array(centers)


def build_prototypes(features, k: int, seed: int) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; returns ``[k, d]`` float64 centroids.

    Stops after 100 iterations or when no centroid moves more than 1e-6.
    An empty cluster is reseeded at the point farthest from its own centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise RoutingError(f"features must be [n, d], got {x.shape}")
    if k < 1 or len(np.unique(x, axis=0)) < k:
        raise RoutingError(f"need at least k={k} distinct feature vectors")
    rng = np.random.Generator(np.random.Philox(seed))
    c = _kmeanspp(x, k, rng)
    for _ in range(MAX_ITER):
        d = _sqdist(x, c)
        assign = d.argmin(axis=1)
        new = c.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = int(d[np.arange(len(x)), assign].argmax())
                new[j] = x[far]
                assign[far] = j
        shift = np.sqrt(((new - c) ** 2).sum(-1)).max()
        c = new
        if shift < TOL:
            break
    return c


@dataclass
class PrototypeBank:
    k: int
    centroids: dict[int, np.ndarray] = field(default_factory=dict)
    convention: str = EMBEDDING_CONVENTION

    def add(self, domain: int, centroids: np.ndarray) -> None:
        if domain in self.centroids:
            raise ValueError(f"prototypes for domain {domain} already frozen")
        c = np.array(centroids, dtype=np.float64)
        if c.shape[0] != self.k or not np.isfinite(c).all():
            raise ValueError(f"expected {self.k} finite centroids, got {c.shape}")
        c.setflags(write=False)
        self.centroids[domain] = c

    @property
    def domains(self) -> list[int]:
        return sorted(self.centroids)


def route(f_test, banks: PrototypeBank | dict[int, np.ndarray]) -> int:
    """Domain of the nearest centroid (squared Euclidean); ties -> lowest domain, then centroid."""
    return int(route_batch(np.asarray(f_test, dtype=np.float64)[None], banks)[0])


def route_batch(feats: np.ndarray, banks: PrototypeBank | dict[int, np.ndarray]) -> np.ndarray:
    table = banks.centroids if isinstance(banks, PrototypeBank) else banks
    if not table:
        raise RoutingError("no prototype banks to route against")
    domains = sorted(table)
    allc = np.concatenate([table[t] for t in domains])
    owner = np.concatenate([[t] * len(table[t]) for t in domains])
    d = _sqdist(np.asarray(feats, dtype=np.float64), allc)
    return owner[d.argmin(axis=1)]  # argmin keeps the first minimum


def embed_for_routing(store: ParameterStore, cfg: EncoderConfig, pixels, batch: int = 64) -> np.ndarray:
    """Prompt-free image features, L2-normalized, as float64 ``[n, C_out]``."""
    pv = ParamView(store, trainable=())
    pixels = np.asarray(pixels)
    out = []
    for s in range(0, len(pixels), batch):
        f = nc.l2_normalize(encode_image(pv, cfg, pixels[s:s + batch]), axis=-1)
        out.append(f.data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, cfg.C_out))


def infer(pixels, store: ParameterStore, enc_cfg: EncoderConfig, bank, protos: PrototypeBank,
          families: Sequence[str] | None = None, use_visual: bool = True,
          force_domain: int | None = None, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Route each image then score it under the routed domain's prompts.

    Returns ``(routed domain ids [n], class probabilities [n, N_cls])``.
    ``force_domain`` skips routing (oracle routing for diagnostics).
    """
    from .prompting import FAMILIES, forward, text_features

    fams = FAMILIES if families is None else tuple(families)
    pixels = np.asarray(pixels)
    if force_domain is None:
        routed = route_batch(embed_for_routing(store, enc_cfg, pixels, batch), protos)
    else:
        routed = np.full(len(pixels), force_domain)
    pv = ParamView(store, trainable=())
    probs = np.zeros((len(pixels), 2), dtype=np.float64)
    for t in np.unique(routed):
        idx = np.flatnonzero(routed == t)
        txt = text_features(pv, enc_cfg, bank, int(t), fams)
        for s in range(0, len(idx), batch):
            sel = idx[s:s + batch]
            logits = forward(pv, enc_cfg, bank, int(t), pixels[sel], fams, use_visual, txt=txt)
            probs[sel] = nc.softmax(logits, axis=-1).data
    return routed.astype(np.int64), probs

"""Miniature dual encoder: a patch transformer for images and a token
transformer for prompt sequences, both projecting into one shared space.

Parameters live in a :class:`~padcl.numcore.ParameterStore` under the
``img.`` and ``txt.`` prefixes; all of them are penalizable backbone weights.
The class-name rows (``class_embed``) are stored separately and never train.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .numcore import ParamView, ParameterStore, Tensor

SOS, EOS = "[sos]", "[eos]"
CLASS_NAMES = ("spoof", "real")  # index == label
FIXED_TEMPLATE = "This is a photo of {} face."
EMBED_STD = 0.5
MLP_RATIO = 4
_MASK_VALUE = -1e9


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    C: int = 64
    C_out: int = 64
    depth: int = 2
    heads: int = 4
    patch: int = 8
    image_side: int = 32
    channels: int = 1
    vocab: int = 10
    max_seq: int = 48

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch) ** 2

    def validate(self, L_v: int = 0, N_ctx: int = 0) -> None:
        if min(self.C, self.C_out, self.depth, self.heads, self.patch, self.image_side, self.channels) <= 0:
            raise ConfigError("encoder sizes must be positive")
        if self.C % self.heads:
            raise ConfigError(f"C={self.C} not divisible by heads={self.heads}")
        if self.image_side % self.patch:
            raise ConfigError(f"image_side={self.image_side} not divisible by patch={self.patch}")
        if self.max_seq < 1 + L_v + self.n_patches:
            raise ConfigError(f"max_seq={self.max_seq} < 1 + L_v + patches = {1 + L_v + self.n_patches}")
        if self.max_seq < 2 * N_ctx + 3:
            raise ConfigError(f"max_seq={self.max_seq} < 2*N_ctx + 3 = {2 * N_ctx + 3}")
        if self.vocab != len(TokenTable().words):
            raise ConfigError(f"vocab={self.vocab} but the token table has {len(TokenTable().words)} words")

    def to_dict(self) -> dict:
        return asdict(self)


class TokenTable:
    """Closed whitespace vocabulary covering the fixed sentence and class names."""

    def __init__(self):
        sentence = [w for w in _words(FIXED_TEMPLATE.format("")) if w]
        words = [SOS, EOS] + [w for w in dict.fromkeys(sentence)]
        self.words: list[str] = words + list(CLASS_NAMES)
        self.ids = {w: i for i, w in enumerate(self.words)}
        self.n_plain = len(words)

    def is_class(self, token_id: int) -> bool:
        return token_id >= self.n_plain

    def encode(self, words: list[str]) -> list[int]:
        out = []
        for w in words:
            if w not in self.ids:
                raise KeyError(f"unknown token {w!r}")
            out.append(self.ids[w])
        return out

    def to_text(self) -> str:
        return "\n".join(self.words)

    @classmethod
    def from_text(cls, text: str) -> "TokenTable":
        table = cls()
        if text.split("\n") != table.words:
            raise ValueError("token table in checkpoint does not match this build")
        return table


def _words(sentence: str) -> list[str]:
    cleaned = "".join(ch if ch.isalnum() or ch.isspace() else " " for ch in sentence.lower())
    return cleaned.split()


def tokenize_fixed(class_name: str, table: TokenTable | None = None) -> list[int]:
    if class_name not in CLASS_NAMES:
        raise KeyError(f"unknown class name {class_name!r}; expected one of {CLASS_NAMES}")
    table = table or TokenTable()
    return table.encode([SOS] + _words(FIXED_TEMPLATE.format(class_name)) + [EOS])


# ---------------------------------------------------------------- parameters

def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, fan_out))


def _block_params(store: ParameterStore, prefix: str, C: int, rng: np.random.Generator) -> None:
    hid = MLP_RATIO * C
    add = lambda n, v: store.add(f"{prefix}.{n}", v, penalizable=True)  # noqa: E731
    add("ln1_g", np.ones(C))
    add("ln1_b", np.zeros(C))
    add("qkv_w", _dense(rng, C, 3 * C))
    # no key bias: it shifts every score of a query equally and cannot be learned
    add("q_b", np.zeros(C))
    add("v_b", np.zeros(C))
    add("proj_w", _dense(rng, C, C))
    add("proj_b", np.zeros(C))
    add("ln2_g", np.ones(C))
    add("ln2_b", np.zeros(C))
    add("fc1_w", _dense(rng, C, hid))
    add("fc1_b", np.zeros(hid))
    add("fc2_w", _dense(rng, hid, C))
    add("fc2_b", np.zeros(C))


def init_encoders(store: ParameterStore, cfg: EncoderConfig, L_v: int, rng: np.random.Generator) -> None:
    """Register backbone weights (image then text) and the frozen class rows."""
    C = cfg.C
    pen = dict(penalizable=True)
    pdim = cfg.channels * cfg.patch * cfg.patch
    store.add("img.patch_w", _dense(rng, pdim, C), **pen)
    store.add("img.patch_b", np.zeros(C), **pen)
    store.add("img.cls", rng.normal(0, EMBED_STD, (C,)), **pen)
    store.add("img.pos_cls", rng.normal(0, EMBED_STD, (1, C)), **pen)
    store.add("img.pos_prompt", rng.normal(0, EMBED_STD, (max(L_v, 1), C)), **pen)
    store.add("img.pos_patch", rng.normal(0, EMBED_STD, (cfg.n_patches, C)), **pen)
    for i in range(cfg.depth):
        _block_params(store, f"img.blk{i}", C, rng)
    store.add("img.ln_post_g", np.ones(C), **pen)
    store.add("img.ln_post_b", np.zeros(C), **pen)
    store.add("img.out_proj", _dense(rng, C, cfg.C_out), **pen)

    table = TokenTable()
    store.add("txt.token_embed", rng.normal(0, EMBED_STD, (table.n_plain, C)), **pen)
    store.add("txt.pos", rng.normal(0, EMBED_STD, (cfg.max_seq, C)), **pen)
    for i in range(cfg.depth):
        _block_params(store, f"txt.blk{i}", C, rng)
    store.add("txt.ln_final_g", np.ones(C), **pen)
    store.add("txt.ln_final_b", np.zeros(C), **pen)
    store.add("txt.out_proj", _dense(rng, C, cfg.C_out), **pen)

    store.add("class_embed", rng.normal(0, EMBED_STD, (len(CLASS_NAMES), C)))


# ---------------------------------------------------------------- forward

def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = nc.matmul(x, w)
    return y if b is None else nc.add(y, b)


def _block(pv: ParamView, prefix: str, x: Tensor, heads: int, causal: bool) -> Tensor:
    B, L, C = x.shape
    d = C // heads
    h = nc.layer_norm(x, pv[f"{prefix}.ln1_g"], pv[f"{prefix}.ln1_b"])
    bias = nc.concat_rows([pv[f"{prefix}.q_b"], Tensor(np.zeros(C, dtype=x.dtype)), pv[f"{prefix}.v_b"]], axis=0)
    qkv = _linear(h, pv[f"{prefix}.qkv_w"], bias)
    qkv = nc.transpose(nc.reshape(qkv, (B, L, 3, heads, d)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    if causal:
        mask = np.triu(np.full((L, L), _MASK_VALUE, dtype=x.dtype), k=1)
        scores = nc.add(scores, mask)
    att = nc.softmax(scores, axis=-1)
    ctx = nc.reshape(nc.transpose(nc.matmul(att, v), (0, 2, 1, 3)), (B, L, C))
    x = nc.add(x, _linear(ctx, pv[f"{prefix}.proj_w"], pv[f"{prefix}.proj_b"]))
    h = nc.layer_norm(x, pv[f"{prefix}.ln2_g"], pv[f"{prefix}.ln2_b"])
    h = nc.gelu(_linear(h, pv[f"{prefix}.fc1_w"], pv[f"{prefix}.fc1_b"]))
    return nc.add(x, _linear(h, pv[f"{prefix}.fc2_w"], pv[f"{prefix}.fc2_b"]))


def patchify(pixels: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """[B, ch, S, S] -> [B, n_patches, ch*patch*patch], row-major patch order."""
    B, ch, H, W = pixels.shape
    if H != cfg.image_side or W != cfg.image_side or ch != cfg.channels:
        raise nc.ShapeError(f"image shape {pixels.shape[1:]} != ({cfg.channels}, {cfg.image_side}, {cfg.image_side})")
    if H % cfg.patch:
        raise nc.ShapeError(f"image side {H} not divisible by patch {cfg.patch}")
    g = H // cfg.patch
    x = pixels.reshape(B, ch, g, cfg.patch, g, cfg.patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g * g, ch * cfg.patch * cfg.patch)


def encode_image(pv: ParamView, cfg: EncoderConfig, pixels, visual_prompt: Tensor | None = None) -> Tensor:
    """Image feature ``[C_out]`` (or ``[B, C_out]`` for a batch), not normalized.

    Sequence: [CLS], prompt tokens (if any), patch tokens; each slot kind has
    its own positional rows.
    """
    pixels = np.asarray(pixels, dtype=pv.dtype)
    single = pixels.ndim == 3
    if single:
        pixels = pixels[None]
    B = pixels.shape[0]
    C = cfg.C
    patches = nc.Tensor(patchify(pixels, cfg))
    tok = nc.add(_linear(patches, pv["img.patch_w"], pv["img.patch_b"]), pv["img.pos_patch"])
    cls = nc.add(nc.reshape(pv["img.cls"], (1, C)), pv["img.pos_cls"])
    parts = [nc.broadcast_to(nc.reshape(cls, (1, 1, C)), (B, 1, C))]
    if visual_prompt is not None:
        L_v = visual_prompt.shape[0]
        if visual_prompt.data.ndim != 2 or visual_prompt.shape[1] != C or L_v > pv.store["img.pos_prompt"].shape[0]:
            raise nc.ShapeError(f"visual prompt shape {visual_prompt.shape} incompatible with C={C}")
        pos = nc.getitem(pv["img.pos_prompt"], slice(0, L_v))
        vp = nc.add(visual_prompt, pos)
        parts.append(nc.broadcast_to(nc.reshape(vp, (1, L_v, C)), (B, L_v, C)))
    parts.append(tok)
    x = nc.concat_rows(parts, axis=1)
    for i in range(cfg.depth):
        x = _block(pv, f"img.blk{i}", x, cfg.heads, causal=False)
    x = nc.layer_norm(nc.getitem(x, (slice(None), 0)), pv["img.ln_post_g"], pv["img.ln_post_b"])
    out = nc.matmul(x, pv["img.out_proj"])
    return out[0] if single else out


def embed_tokens(pv: ParamView, ids: list[int], table: TokenTable | None = None) -> Tensor:
    """Rows for token ids; class-name ids read the frozen class rows."""
    table = table or TokenTable()
    rows = []
    for tid in ids:
        if table.is_class(tid):
            rows.append(nc.take_rows(pv["class_embed"], [tid - table.n_plain]))
        else:
            rows.append(nc.take_rows(pv["txt.token_embed"], [tid]))
    return nc.concat_rows(rows, axis=0)


def encode_text(pv: ParamView, cfg: EncoderConfig, seq: Tensor) -> Tensor:
    """Text feature read at the last ([eos]) position.

    ``seq`` is ``[L, C]`` or ``[B, L, C]`` and must already contain the
    [sos]/[eos] embeddings.  Attention is causal.
    """
    single = seq.data.ndim == 2
    if single:
        seq = nc.reshape(seq, (1,) + seq.shape)
    B, L, C = seq.shape
    if L > cfg.max_seq:
        raise nc.ShapeError(f"text sequence length {L} exceeds max_seq={cfg.max_seq}")
    x = nc.add(seq, nc.getitem(pv["txt.pos"], slice(0, L)))
    for i in range(cfg.depth):
        x = _block(pv, f"txt.blk{i}", x, cfg.heads, causal=True)
    x = nc.layer_norm(nc.getitem(x, (slice(None), L - 1)), pv["txt.ln_final_g"], pv["txt.ln_final_b"])
    out = nc.matmul(x, pv["txt.out_proj"])
    return out[0] if single else out

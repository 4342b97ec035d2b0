"""Experiment configuration and its INI-style text form.

Every field lives in exactly one section; unknown sections or keys are
errors, and ``parse(render(cfg)) == cfg`` holds for every valid config.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .encoders import ConfigError, EncoderConfig

MODES = ("svlp", "ft", "jt")
PROFILES = ("toy", "paper")
ABLATIONS = ("no-da", "no-ds", "no-mix", "no-fixed", "no-visual", "no-sewc")

PROFILE_DEFAULTS = {
    "toy": {"lr": 3e-4, "iterations": 500},
    "paper": {"lr": 1e-5, "iterations": 100},
}


@dataclass
class TrainConfig:
    mode: str = "svlp"
    profile: str = "toy"
    L_v: int = 16
    N_ctx: int = 16
    p: float = 0.5
    k: int = 5
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch: int = 8
    iterations: int = 500
    seed: int = 0
    fisher_samples: int = 256
    no_da: bool = False
    no_ds: bool = False
    no_mix: bool = False
    no_fixed: bool = False
    no_visual: bool = False
    no_sewc: bool = False
    sewc_lambda: float = 1.0
    warm_start_prompts: bool = True
    sewc_sum_selected_only: bool = False
    float64: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    @classmethod
    def for_profile(cls, profile: str = "toy", **overrides) -> "TrainConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; valid: {', '.join(PROFILES)}")
        return cls(profile=profile, **{**PROFILE_DEFAULTS[profile], **overrides})

    @property
    def sewc_active(self) -> bool:
        return self.mode == "svlp" and not self.no_sewc and self.p > 0 and self.sewc_lambda != 0

    @property
    def disabled_families(self) -> tuple[str, ...]:
        return tuple(f for f in ("da", "ds", "mix", "fixed") if getattr(self, f"no_{f}"))

    @property
    def ablation_tag(self) -> str:
        tags = [a for a in ABLATIONS if getattr(self, a.replace("-", "_"))]
        return ",".join(tags)

    def apply_ablation(self, name: str) -> None:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; valid: {', '.join(ABLATIONS)}")
        setattr(self, name.replace("-", "_"), True)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if not 0 <= self.p <= 1:
            raise ConfigError(f"p must lie in [0, 1] (0 disables consolidation), got {self.p}")
        if min(self.L_v, self.N_ctx, self.k, self.batch, self.iterations, self.fisher_samples) < 1:
            raise ConfigError("L_v, N_ctx, k, batch, iterations and fisher_samples must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or self.sewc_lambda < 0:
            raise ConfigError("lr must be > 0; weight_decay and sewc_lambda >= 0")
        if len(self.disabled_families) == 4:
            raise ConfigError("all four prompt families disabled")
        self.encoder.validate(self.L_v, self.N_ctx)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {
    "model": ["L_v", "N_ctx"] + [f.name for f in fields(EncoderConfig)],
    "train": ["mode", "profile", "lr", "weight_decay", "batch", "iterations", "seed", "float64",
              "no_da", "no_ds", "no_mix", "no_fixed", "no_visual", "warm_start_prompts"],
    "sewc": ["p", "fisher_samples", "no_sewc", "sewc_lambda", "sewc_sum_selected_only"],
    "routing": ["k"],
    "data": [],
}
_ENCODER_KEYS = {f.name for f in fields(EncoderConfig)}


def _field_type(name: str):
    holder = EncoderConfig if name in _ENCODER_KEYS else TrainConfig
    return {f.name: f.type for f in fields(holder)}[name]


def _convert(name: str, raw: str):
    typ = _field_type(name)
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(cfg: TrainConfig) -> str:
    out = []
    for section, keys in SECTIONS.items():
        out.append(f"[{section}]")
        for k in keys:
            v = getattr(cfg.encoder, k) if k in _ENCODER_KEYS else getattr(cfg, k)
            out.append(f"{k} = {_render_value(v)}")
        out.append("")
    return "\n".join(out)


def parse(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse config text; keys absent from the text keep the profile defaults."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    profile = cp.get("train", "profile", fallback=None) if cp.has_section("train") else None
    cfg = base if base is not None else TrainConfig.for_profile(profile or "toy")
    cfg = dataclasses.replace(cfg, encoder=dataclasses.replace(cfg.encoder))
    for section in cp.sections():
        for key, raw in cp[section].items():
            val = _convert(key, raw)
            if key in _ENCODER_KEYS:
                setattr(cfg.encoder, key, val)
            else:
                setattr(cfg, key, val)
    cfg.validate()
    return cfg

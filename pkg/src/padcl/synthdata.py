"""Deterministic synthetic multi-domain PAD data and the ``.svds`` file format.

Randomness comes only from numpy's Philox4x64-10 counter-based generator,
keyed with ``2 * seed + split`` (split 0 = train, 1 = test); nothing depends
on wall clock or platform.  Bona fide images are smooth blob fields; spoofs
are the same kind of field composited with the domain's artifact; both then
pass through the domain transform and are clamped to [0, 1].
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"SVDS"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")
SIDE = 32
ARTIFACTS = ("grating", "flat_patch", "border_frame")


class DatasetError(IOError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    name: str
    seed: int
    n_train: int = 200
    n_test: int = 200
    blob_count: tuple[int, int] = (2, 5)
    blob_radius: tuple[float, float] = (3.0, 8.0)
    artifact: str = "grating"
    artifact_freq: float = 6.0
    artifact_intensity: float = 0.3
    # per-spoof intensity drawn from artifact_intensity * U(1 - spread, 1); faint spoofs stay ambiguous
    intensity_spread: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0
    noise: float = 0.02
    tint: tuple[float, ...] = (1.0,)
    # capture illumination: linear ramp (angle in degrees, peak-to-peak amplitude) shared by the domain
    illumination: tuple[float, float] = (0.0, 0.0)
    balance: float = 0.5
    # optional benign overlay present on this domain's bona fide captures
    real_overlay: str | None = None
    real_overlay_freq: float = 6.0
    real_overlay_intensity: float = 0.0

    def validate(self) -> None:
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test == 0:
            raise ValueError(f"{self.name}: empty sample counts")
        if self.artifact not in ARTIFACTS:
            raise ValueError(f"{self.name}: unknown artifact {self.artifact!r}")
        if self.real_overlay is not None and self.real_overlay not in ARTIFACTS:
            raise ValueError(f"{self.name}: unknown overlay {self.real_overlay!r}")
        if not 0 <= self.intensity_spread <= 1:
            raise ValueError(f"{self.name}: intensity_spread outside [0, 1]")
        if not 0 <= self.balance <= 1:
            raise ValueError(f"{self.name}: balance outside [0, 1]")
        lo, hi = self.blob_count
        if lo < 1 or hi < lo:
            raise ValueError(f"{self.name}: bad blob count range {self.blob_count}")
        if self.blob_radius[0] <= 0 or self.blob_radius[1] < self.blob_radius[0]:
            raise ValueError(f"{self.name}: bad blob radius range {self.blob_radius}")


class AccessAudit:
    """Counts training-path reads as (active domain, sample domain) pairs.

    Reads outside the active domain are counted and then refused.
    """

    def __init__(self):
        self.current: int | None = None
        self.reads: dict[tuple[int | None, int], int] = {}
        self.violations = 0

    def record(self, domain: int, n: int) -> None:
        key = (self.current, domain)
        self.reads[key] = self.reads.get(key, 0) + n
        if self.current is not None and domain != self.current:
            self.violations += n
            from .sewc import RehearsalViolation
            raise RehearsalViolation(f"read {n} samples of domain {domain} while training domain {self.current}")

    def past_reads(self, current: int) -> int:
        """Samples of domains j < current read while ``current`` was active."""
        return sum(n for (c, d), n in self.reads.items() if c == current and d < current)


@dataclass
class DomainDataset:
    name: str
    split: str
    images: np.ndarray  # [n, 1, 32, 32] float32
    labels: np.ndarray  # [n] uint8, 1 = real
    domain: int = 0
    tags: np.ndarray | None = None  # per-sample source domain; defaults to `domain`
    audit: AccessAudit | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.labels)

    def sample_domains(self) -> np.ndarray:
        return self.tags if self.tags is not None else np.full(len(self), self.domain)

    def read(self, indices, domain: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Training-path access; reports every touched sample's domain tag."""
        idx = np.asarray(indices, dtype=np.int64)
        if domain is not None and self.tags is None and domain != self.domain:
            from .sewc import RehearsalViolation
            raise RehearsalViolation(f"dataset of domain {self.domain} read as domain {domain}")
        if self.audit is not None:
            tags = self.sample_domains()[idx]
            for d in np.unique(tags):
                self.audit.record(int(d), int(np.count_nonzero(tags == d)))
        return self.images[idx], self.labels[idx].astype(np.int64)


# ---------------------------------------------------------------- generation

_YY, _XX = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64)


def _blobs(rng: np.random.Generator, spec: DomainSpec) -> np.ndarray:
    n = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    img = np.zeros((SIDE, SIDE))
    for _ in range(n):
        cy, cx = rng.uniform(0, SIDE, 2)
        r = rng.uniform(*spec.blob_radius)
        amp = rng.uniform(0.5, 1.0)
        img += amp * np.exp(-((_YY - cy) ** 2 + (_XX - cx) ** 2) / (2 * r * r))
    return img / img.max()


def _composite(img: np.ndarray, kind: str, freq: float, a: float, rng: np.random.Generator) -> np.ndarray:
    if kind == "grating":
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 * (1 + np.sin(2 * np.pi * freq * (_XX * np.cos(theta) + _YY * np.sin(theta)) / SIDE + phase))
        return (1 - a) * img + a * wave
    if kind == "flat_patch":
        size = int(round(SIDE * (0.3 + 0.2 * rng.uniform())))
        y0, x0 = rng.integers(0, SIDE - size + 1, 2)
        level = rng.uniform(0.2, 0.8)
        out = img.copy()
        out[y0:y0 + size, x0:x0 + size] = (1 - a) * out[y0:y0 + size, x0:x0 + size] + a * level
        # faint periodic banding inside the patch
        band = 0.5 * (1 + np.sin(2 * np.pi * freq * _YY[y0:y0 + size, x0:x0 + size] / SIDE))
        out[y0:y0 + size, x0:x0 + size] += 0.25 * a * (band - 0.5)
        return out
    if kind == "border_frame":
        w = max(1, int(round(freq / 2)))
        level = rng.uniform(0.7, 1.0)
        out = img.copy()
        m = np.zeros((SIDE, SIDE), dtype=bool)
        m[:w, :] = m[-w:, :] = m[:, :w] = m[:, -w:] = True
        out[m] = (1 - a) * out[m] + a * level
        return out
    raise ValueError(kind)


def _transform(img: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    out = spec.contrast * (img - 0.5) + 0.5 + spec.brightness
    angle, amp = spec.illumination
    if amp:
        rad = np.deg2rad(angle)
        ramp = ((_XX - (SIDE - 1) / 2) * np.cos(rad) + (_YY - (SIDE - 1) / 2) * np.sin(rad)) / (SIDE - 1)
        out = out + amp * ramp
    out = out[None] * np.asarray(spec.tint, dtype=np.float64)[:, None, None]
    out = out + rng.normal(0, spec.noise, out.shape) if spec.noise > 0 else out
    return np.clip(out, 0.0, 1.0)


def _generate_split(spec: DomainSpec, n: int, split: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(key=2 * spec.seed + split))
    n_real = int(round(n * spec.balance))
    labels = np.concatenate([np.ones(n_real, dtype=np.uint8), np.zeros(n - n_real, dtype=np.uint8)])
    labels = labels[rng.permutation(n)]
    images = np.zeros((n, len(spec.tint), SIDE, SIDE), dtype=np.float32)
    for i in range(n):
        img = _blobs(rng, spec)
        if labels[i] == 0:
            a = spec.artifact_intensity
            if spec.intensity_spread > 0:
                a *= 1 - spec.intensity_spread * rng.uniform()
            img = _composite(img, spec.artifact, spec.artifact_freq, a, rng)
        elif spec.real_overlay is not None:
            img = _composite(img, spec.real_overlay, spec.real_overlay_freq, spec.real_overlay_intensity, rng)
        images[i] = _transform(img, spec, rng)
    return images, labels


def generate(spec: DomainSpec) -> tuple[DomainDataset, DomainDataset]:
    spec.validate()
    tr = _generate_split(spec, spec.n_train, 0)
    te = _generate_split(spec, spec.n_test, 1)
    return DomainDataset(spec.name, "train", *tr), DomainDataset(spec.name, "test", *te)


# ---------------------------------------------------------------- presets

def _protocol4() -> list[DomainSpec]:
    # each domain has its own scene statistics and illumination direction so the domains are
    # separable without labels; spoof artifacts get harder along the sequence
    common = dict(n_train=600, intensity_spread=0.6)
    return [
        DomainSpec("s4-a-grating", seed=101, artifact="grating", artifact_freq=6.0, artifact_intensity=0.35,
                   blob_count=(1, 2), blob_radius=(7.0, 11.0), brightness=0.0, contrast=0.8, noise=0.02,
                   illumination=(0.0, 0.6), **common),
        DomainSpec("s4-b-patch", seed=202, artifact="flat_patch", artifact_freq=4.0, artifact_intensity=0.6,
                   blob_count=(6, 10), blob_radius=(1.5, 3.0), brightness=0.15, contrast=0.6, noise=0.03,
                   real_overlay="grating", real_overlay_freq=6.0, real_overlay_intensity=0.3,
                   illumination=(90.0, 0.6), **common),
        DomainSpec("s4-c-frame", seed=303, artifact="border_frame", artifact_freq=6.0, artifact_intensity=0.5,
                   blob_count=(3, 5), blob_radius=(3.0, 6.0), brightness=-0.05, contrast=-0.8, noise=0.05,
                   illumination=(180.0, 0.6), **common),
        DomainSpec("s4-d-finegrating", seed=404, artifact="grating", artifact_freq=11.0, artifact_intensity=0.25,
                   blob_count=(2, 4), blob_radius=(4.0, 8.0), brightness=0.3, contrast=0.5, noise=0.0,
                   real_overlay="border_frame", real_overlay_freq=6.0, real_overlay_intensity=0.5,
                   illumination=(270.0, 0.6), **common),
    ]


def _protocol8() -> list[DomainSpec]:
    base = _protocol4()
    common = dict(n_train=600, intensity_spread=0.6)
    extra = [
        DomainSpec("s8-e-widepatch", seed=505, artifact="flat_patch", artifact_freq=8.0, artifact_intensity=0.45,
                   blob_count=(1, 3), blob_radius=(5.0, 9.0), brightness=-0.3, contrast=0.7, noise=0.02,
                   real_overlay="grating", real_overlay_freq=11.0, real_overlay_intensity=0.25,
                   illumination=(45.0, 0.6), **common),
        DomainSpec("s8-f-coarsegrating", seed=606, artifact="grating", artifact_freq=3.0, artifact_intensity=0.3,
                   blob_count=(4, 8), blob_radius=(2.0, 4.0), brightness=0.1, contrast=1.0, noise=0.06,
                   illumination=(135.0, 0.6), **common),
        DomainSpec("s8-g-thinframe", seed=707, artifact="border_frame", artifact_freq=2.0, artifact_intensity=0.6,
                   blob_count=(2, 3), blob_radius=(6.0, 10.0), brightness=-0.05, contrast=-0.6, noise=0.02,
                   real_overlay="grating", real_overlay_freq=3.0, real_overlay_intensity=0.3,
                   illumination=(225.0, 0.6), **common),
        DomainSpec("s8-h-faintgrating", seed=808, artifact="grating", artifact_freq=8.0, artifact_intensity=0.2,
                   blob_count=(5, 9), blob_radius=(2.5, 5.0), brightness=0.35, contrast=0.3, noise=0.01,
                   illumination=(315.0, 0.6), **common),
    ]
    renamed = [replace(s, name=s.name.replace("s4-", "s8-"), seed=s.seed + 1000) for s in base]
    return renamed + extra


def _unseen() -> list[DomainSpec]:
    return [DomainSpec("synth-unseen", seed=909, artifact="flat_patch", artifact_freq=5.0, artifact_intensity=0.4,
                       brightness=-0.05, contrast=0.9, noise=0.04,
                       illumination=(20.0, 0.6))]


PRESETS = {
    "protocol-synth-4": _protocol4,
    "protocol-synth-8": _protocol8,
    "synth-unseen": _unseen,
}


def preset(name: str) -> list[DomainSpec]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; valid: {', '.join(sorted(PRESETS))}")
    return PRESETS[name]()


# ---------------------------------------------------------------- file format

def encode_dataset(ds: DomainDataset) -> bytes:
    images = np.ascontiguousarray(ds.images, dtype="<f4")
    if images.ndim != 4:
        raise DatasetError(f"images must be [n, c, h, w], got shape {images.shape}")
    n, c, h, w = images.shape
    labels = np.asarray(ds.labels, dtype=np.uint8)
    if labels.shape != (n,):
        raise DatasetError(f"{n} images but {labels.size} labels")
    return HEADER.pack(MAGIC, VERSION, n, c, h, w) + images.tobytes() + labels.tobytes()


def decode_dataset(blob: bytes, name: str = "", split: str = "") -> DomainDataset:
    if len(blob) < HEADER.size:
        raise DatasetError(f"truncated dataset: expected at least {HEADER.size} bytes, got {len(blob)}")
    magic, version, n, c, h, w = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetError("bad magic, not an .svds dataset")
    if version != VERSION:
        raise DatasetError(f"dataset version {version}, expected {VERSION}")
    npix = n * c * h * w
    expected = HEADER.size + 4 * npix + n
    if len(blob) != expected:
        raise DatasetError(f"dataset size mismatch: expected {expected} bytes, got {len(blob)}")
    images = np.frombuffer(blob, dtype="<f4", count=npix, offset=HEADER.size).reshape(n, c, h, w).astype(np.float32)
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=HEADER.size + 4 * npix).copy()
    return DomainDataset(name, split, images, labels)


def write_dataset(ds: DomainDataset, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def read_dataset(path: str | os.PathLike, name: str = "", split: str = "") -> DomainDataset:
    return decode_dataset(Path(path).read_bytes(), name, split)


def write_tree(root: str | os.PathLike, specs: list[DomainSpec]) -> list[str]:
    """``<root>/<domain>/{train,test}.svds`` plus ``manifest.txt`` in sequence order."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for spec in specs:
        train, test = generate(spec)
        d = root / spec.name
        d.mkdir(exist_ok=True)
        write_dataset(train, d / "train.svds")
        write_dataset(test, d / "test.svds")
        names.append(spec.name)
    (root / "manifest.txt").write_text("".join(n + "\n" for n in names))
    return names


def read_manifest(root: str | os.PathLike) -> list[str]:
    path = Path(root) / "manifest.txt"
    names = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not names:
        raise DatasetError(f"{path} lists no domains")
    return names


def load_domain(root: str | os.PathLike, name: str, domain: int) -> tuple[DomainDataset, DomainDataset]:
    d = Path(root) / name
    train = read_dataset(d / "train.svds", name, "train")
    test = read_dataset(d / "test.svds", name, "test")
    train.domain = test.domain = domain
    return train, test


def load_sequence(root: str | os.PathLike) -> list[tuple[DomainDataset, DomainDataset]]:
    """Domains in manifest order with ids 1..T."""
    return [load_domain(root, n, i + 1) for i, n in enumerate(read_manifest(root))]


def in_memory_sequence(specs: list[DomainSpec]) -> list[tuple[DomainDataset, DomainDataset]]:
    out = []
    for i, spec in enumerate(specs):
        train, test = generate(spec)
        train.domain = test.domain = i + 1
        out.append((train, test))
    return out

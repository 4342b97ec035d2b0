from __future__ import annotations

import bisect
from collections.abc import Iterable

import numpy as np

from . import checkpoint
from .tensor import Tape, Tensor, active_tape


class ParameterStore:
    """Ordered named arrays with a stable flat index over all elements.

    ``penalizable`` marks the entries that form the consolidation index set S.
    Global indices follow insertion order, so adding entries later never
    moves an existing index.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.entries: dict[str, np.ndarray] = {}
        self._penalizable: list[str] = []
        self._starts: list[int] = []
        self._names: list[str] = []
        self.size = 0

    def add(self, name: str, value, penalizable: bool = False) -> np.ndarray:
        if name in self.entries:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=self.dtype)
        self.entries[name] = arr
        self._names.append(name)
        self._starts.append(self.size)
        self.size += arr.size
        if penalizable:
            self._penalizable.append(name)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __setitem__(self, name: str, value) -> None:
        arr = self.entries[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != arr.shape:
            raise ValueError(f"{name}: shape {value.shape} != {arr.shape}")
        arr[...] = value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self._names)

    @property
    def penalizable(self) -> list[str]:
        return list(self._penalizable)

    def offset(self, name: str) -> int:
        return self._starts[self._names.index(name)]

    def locate(self, i: int) -> tuple[str, int]:
        """Global flat index -> (entry name, element offset)."""
        if not 0 <= i < self.size:
            raise IndexError(f"flat index {i} outside [0, {self.size})")
        k = bisect.bisect_right(self._starts, i) - 1
        return self._names[k], i - self._starts[k]

    def get_flat(self, i: int) -> float:
        name, off = self.locate(i)
        return float(self.entries[name].reshape(-1)[off])

    def set_flat(self, i: int, value: float) -> None:
        name, off = self.locate(i)
        self.entries[name].reshape(-1)[off] = value

    def penalizable_indices(self) -> np.ndarray:
        """Sorted global indices of S."""
        parts = [np.arange(self.offset(n), self.offset(n) + self.entries[n].size)
                 for n in self._penalizable]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def flatten(self, names: Iterable[str] | None = None) -> np.ndarray:
        names = self._names if names is None else list(names)
        if not names:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([self.entries[n].reshape(-1) for n in names])

    def penalizable_vector(self) -> np.ndarray:
        """Current values over S, in S order (float64 copy)."""
        return self.flatten(self._penalizable).astype(np.float64)

    def flatten_grads(self, grads: dict[str, np.ndarray], names: Iterable[str] | None = None) -> np.ndarray:
        names = self._names if names is None else list(names)
        parts = [np.asarray(grads[n]).reshape(-1) if n in grads
                 else np.zeros(self.entries[n].size, dtype=self.dtype) for n in names]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=self.dtype)

    def copy(self) -> "ParameterStore":
        other = ParameterStore(self.dtype)
        for n in self._names:
            other.add(n, self.entries[n].copy(), penalizable=n in self._penalizable)
        return other

    def astype(self, dtype) -> "ParameterStore":
        other = ParameterStore(dtype)
        for n in self._names:
            other.add(n, self.entries[n], penalizable=n in self._penalizable)
        return other

    # persistence

    def to_entries(self) -> dict[str, np.ndarray]:
        return dict(self.entries)

    def meta(self) -> dict:
        return {"dtype": self.dtype.str, "order": self._names, "penalizable": self._penalizable}

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray], meta: dict) -> "ParameterStore":
        store = cls(np.dtype(meta["dtype"]))
        pen = set(meta["penalizable"])
        for n in meta["order"]:
            store.add(n, entries[n], penalizable=n in pen)
        return store

    def save(self, path) -> None:
        entries = {checkpoint.META_ENTRY: checkpoint.pack_meta({"store": self.meta()})}
        entries.update(self.entries)
        checkpoint.save(path, entries)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        entries = checkpoint.load(path)
        meta = checkpoint.unpack_meta(entries.pop(checkpoint.META_ENTRY))
        return cls.from_entries(entries, meta["store"])


class ParamView:
    """Hands out tensors for a forward pass.

    Names in ``trainable`` become watched leaves of the active tape; everything
    else (and everything when no tape is active) is a constant, so frozen
    parameters never enter the graph.
    """

    def __init__(self, store: ParameterStore, trainable: Iterable[str] | None = None):
        self.store = store
        self.trainable = set(store.names() if trainable is None else trainable)
        self._const: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        tape: Tape | None = active_tape()
        if tape is not None and name in self.trainable:
            return tape.watch(name, self.store[name])
        t = self._const.get(name)
        if t is None or t.data is not self.store[name]:
            t = Tensor(self.store[name])
            self._const[name] = t
        return t

    @property
    def dtype(self):
        return self.store.dtype

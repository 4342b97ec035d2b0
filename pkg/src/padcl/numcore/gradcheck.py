from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .store import ParameterStore
from .tensor import Tape, Tensor


class NondeterministicLoss(RuntimeError):
    pass


def analytic_gradient(loss_fn: Callable[[ParameterStore], Tensor], store: ParameterStore) -> np.ndarray:
    """Flat gradient of ``loss_fn`` over every store entry."""
    with Tape() as tape:
        loss = loss_fn(store)
        grads = tape.backward(loss)
    return store.flatten_grads(grads).astype(np.float64)


def finite_diff_check(loss_fn: Callable[[ParameterStore], Tensor], store: ParameterStore,
                      eps: float = 1e-5, sample: Iterable[int] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    The relative error per index is ``|ga - gf| / max(1e-12, |ga| + |gf|)``.
    ``loss_fn`` is evaluated twice at the base point first; differing values
    raise :class:`NondeterministicLoss`.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    idx = np.arange(store.size) if sample is None else np.asarray(list(sample), dtype=np.int64)
    if idx.size == 0:
        return 0.0
    first = loss_fn(store).item()
    second = loss_fn(store).item()
    if first != second:
        raise NondeterministicLoss(f"loss_fn gave {first!r} then {second!r}")
    ga = analytic_gradient(loss_fn, store)
    worst = 0.0
    for i in idx:
        i = int(i)
        orig = store.get_flat(i)
        store.set_flat(i, orig + eps)
        up = loss_fn(store).item()
        store.set_flat(i, orig - eps)
        down = loss_fn(store).item()
        store.set_flat(i, orig)
        gf = (up - down) / (2 * eps)
        err = abs(ga[i] - gf) / max(1e-12, abs(ga[i]) + abs(gf))
        worst = max(worst, err)
    return worst

"""Named parameter store with freeze masks and gradient collection."""

from __future__ import annotations

import fnmatch
import hashlib

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Maps parameter names to tensors; freezing toggles ``requires_grad``.

    Names are hierarchical, dot-separated (e.g. ``mome.layer0.mhsa.w_q``) so
    stage plans can freeze/unfreeze with glob patterns.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data), requires_grad=trainable)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    @property
    def frozen(self) -> set[str]:
        return {n for n, t in self._entries.items() if not t.requires_grad}

    @property
    def trainable(self) -> set[str]:
        return {n for n, t in self._entries.items() if t.requires_grad}

    def set_trainable(self, patterns) -> set[str]:
        """Mark params matching any glob pattern trainable, freeze the rest."""
        pats = list(patterns)
        selected = set()
        for name, t in self._entries.items():
            on = any(fnmatch.fnmatchcase(name, p) for p in pats)
            t.requires_grad = on
            if on:
                selected.add(name)
        return selected

    def freeze_all(self):
        for t in self._entries.values():
            t.requires_grad = False

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def collect_grads(self) -> dict[str, np.ndarray]:
        """Gradients of unfrozen params that participated in the last backward."""
        return {
            n: t.grad
            for n, t in self._entries.items()
            if t.requires_grad and t.grad is not None
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._entries.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True):
        """Assign stored values in place (bit-exact, shapes must match)."""
        for name, value in arrays.items():
            if name not in self._entries:
                if strict:
                    raise KeyError(f"unknown parameter in checkpoint: {name}")
                continue
            t = self._entries[name]
            value = np.asarray(value)
            if value.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {value.shape} vs {t.data.shape}"
                )
            t.data = value.astype(t.data.dtype, copy=True)
        if strict:
            missing = set(self._entries) - set(arrays)
            if missing:
                raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:5]}...")

    def weights_hash(self, prefix: str = "") -> str:
        """Stable sha256 over (name, bytes) pairs; used for cache versioning."""
        h = hashlib.sha256()
        for name in sorted(self._entries):
            if not name.startswith(prefix):
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._entries[name].data).tobytes())
        return h.hexdigest()


def backward(loss: Tensor, store: ParamStore) -> dict[str, np.ndarray]:
    """Run reverse mode from ``loss`` and return the named gradient map.

    Only unfrozen parameters that participated in the graph appear in the
    result; frozen parameters never accumulate gradient at all.
    """
    store.zero_grad()
    loss.backward()
    return store.collect_grads()

"""Adam with a linear-warmup + cosine-decay learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite loss or gradient is encountered."""


@dataclass
class LrSchedule:
    """Warmup from max_lr*start_factor up to max_lr, then cosine decay.

    The step counter is 0-based: step 0 runs at exactly max_lr*start_factor
    and step ``warmup_steps`` runs at exactly max_lr (start of the cosine
    phase). Past ``total_steps`` the rate stays at the floor.
    """

    max_lr: float
    total_steps: int
    warmup_frac: float = 0.05
    start_factor: float = 0.01
    min_lr_factor: float = 0.0

    @property
    def warmup_steps(self) -> int:
        return max(1, round(self.warmup_frac * self.total_steps))

    def lr_at(self, step: int) -> float:
        w = self.warmup_steps
        lo = self.max_lr * self.min_lr_factor
        if step < w:
            frac = self.start_factor + (1.0 - self.start_factor) * (step / w)
            return self.max_lr * frac
        span = max(1, self.total_steps - w)
        progress = min(1.0, (step - w) / span)
        return lo + 0.5 * (self.max_lr - lo) * (1.0 + math.cos(math.pi * progress))


@dataclass
class Adam:
    """Adam (beta1=0.9, beta2=0.999) driven by an LrSchedule.

    Moments are kept per parameter name so a parameter that is frozen in one
    stage and unfrozen in a later one resumes from zeroed moments, and frozen
    parameters are never touched by ``step``.
    """

    schedule: LrSchedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, store: ParamStore, grads: dict[str, np.ndarray]) -> float:
        """Apply one update; returns the learning rate used."""
        frozen = store.frozen & set(grads)
        if frozen:
            raise ValueError(f"gradients supplied for frozen params: {sorted(frozen)[:3]}")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for {name}")
        lr = self.schedule.lr_at(self.step_count)
        t = self.step_count + 1
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = store[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * update.astype(p.data.dtype, copy=False)
        self.step_count = t
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"optim.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"optim.v.{name}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int):
        self.m = {}
        self.v = {}
        for name, arr in arrays.items():
            if name.startswith("optim.m."):
                self.m[name[len("optim.m.") :]] = np.array(arr, copy=True)
            elif name.startswith("optim.v."):
                self.v[name[len("optim.v.") :]] = np.array(arr, copy=True)
        self.step_count = int(step_count)

"""Sequential position awareness: proxy-task instances and position prompts.

Two pieces work together.  A self-supervised proxy task asks, for three
items drawn from one interaction history, whether the first lies at least
as close in position to the second as the third does; answering it forces
the backbone to track where items sit in the sequence.  A learnable table
of per-position prompt vectors is added on top of the fused item
embeddings so position information survives into the prompt itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nm
from .numerics import ParamStore, Tensor

__all__ = [
    "PPTInstance",
    "ppt_label",
    "sample_ppt_instance",
    "position_codes",
    "PositionPromptTable",
    "RecencyPool",
]

_MAX_DRAWS = 10_000


@dataclass(frozen=True)
class PPTInstance:
    """One proxy-task question over a single history.

    ``positions`` are 0-based indices into the history, kept in draw
    order (not sorted).  ``item_ids`` are the catalog ids found at those
    positions; the three ids are always pairwise distinct so the
    question stays well posed even when the history repeats items.
    """

    item_ids: tuple[int, int, int]
    positions: tuple[int, int, int]
    label: str


def ppt_label(positions: Sequence[int]) -> str:
    """Label for a position triple (a, b, c): yes iff |a-b| <= |b-c|."""
    a, b, c = positions
    return "yes" if abs(a - b) <= abs(b - c) else "no"


def sample_ppt_instance(item_ids: Sequence[int], rng: np.random.Generator) -> PPTInstance:
    """Draw one proxy-task instance from a history of catalog ids.

    Positions are sampled without replacement and rejected until the
    three items are pairwise distinct, so duplicated items never produce
    an ambiguous question.
    """
    items = list(item_ids)
    n = len(items)
    if len(set(items)) < 3:
        raise ValueError("proxy task needs at least 3 distinct items in the history")
    for _ in range(_MAX_DRAWS):
        pos = rng.choice(n, size=3, replace=False)
        trio = (items[pos[0]], items[pos[1]], items[pos[2]])
        if len(set(trio)) == 3:
            positions = (int(pos[0]), int(pos[1]), int(pos[2]))
            return PPTInstance(item_ids=trio, positions=positions,
                               label=ppt_label(positions))
    raise RuntimeError("could not sample distinct-item position triple")


def position_codes(n_max: int, d: int) -> np.ndarray:
    """Sinusoidal position codes whose dot product falls off with distance.

    Every frequency stays at or below pi / (n_max - 1), so the kernel
    code[i] . code[j] is strictly decreasing in |i - j| over the whole
    table: nearer positions always score higher, with no aliasing.  Rows
    are scaled to roughly unit norm so the codes neither drown out nor
    vanish next to the fused item embeddings they ride on.
    """
    if n_max == 1:
        return np.zeros((1, d))
    pos = np.arange(n_max, dtype=float)[:, None]
    n_pairs = d // 2
    top = np.pi / (n_max - 1)
    freqs = top * (0.8 ** np.arange(n_pairs, dtype=float))[None, :]
    table = np.zeros((n_max, d))
    table[:, 0:2 * n_pairs:2] = np.cos(pos * freqs)
    table[:, 1:2 * n_pairs:2] = np.sin(pos * freqs)
    return table / np.sqrt(d)


class PositionPromptTable:
    """Learnable per-position prompt vectors added to history embeddings.

    Rows start as sinusoidal position codes: a content-match attention
    head that retrieves two codes and compares them against a third gets
    softmax scores monotone in position distance, which is exactly the
    comparison the proxy task asks for.  Training refines the rows from
    there; rows beyond the longest history seen in training receive
    exactly zero gradient and never move.
    """

    def __init__(self, store: ParamStore, n_max: int, d: int,
                 name: str = "spae.ppl") -> None:
        if n_max < 1 or d < 1:
            raise ValueError("position prompt table needs n_max >= 1 and d >= 1")
        self.name = name
        self.n_max = n_max
        self.d = d
        self.store = store
        store.add(name, position_codes(n_max, d))

    @property
    def table(self) -> Tensor:
        return self.store[self.name]

    def prefix(self, n: int) -> Tensor:
        """First ``n`` rows; the forward value is a view of the table."""
        if not 0 < n <= self.n_max:
            raise ValueError(f"prefix length {n} outside 1..{self.n_max}")
        return nm.index(self.table, slice(0, n))

    def compose(self, history: Tensor) -> Tensor:
        """Add position prompts onto fused history embeddings.

        ``history`` is (n, d) or (K, n, d); only the history block gets
        prompts, candidate and proxy-subset embeddings stay raw.
        """
        n = history.shape[-2]
        if history.shape[-1] != self.d:
            raise nm.ShapeError("compose", history.shape, (self.n_max, self.d))
        return nm.add(history, self.prefix(n))


class RecencyPool:
    """Learned recency-weighted pooling of the history embeddings.

    Produces one user-state vector per example that is placed on the
    slot that predicts the recommended index, so that position queries
    the candidates with the history directly instead of having to
    assemble it through attention first.
    Weights are softmax(temperature * (k - n + 1)) over history slots;
    the temperature starts at zero, which is exact mean pooling, and
    training moves it toward however much recency the data rewards.
    """

    def __init__(self, store: ParamStore, name: str = "spae.state") -> None:
        self.name = name
        self.store = store
        store.add(f"{name}.recency", np.zeros((1, 1)))

    def __call__(self, history: Tensor) -> Tensor:
        """(n, d) history rows, oldest first -> (1, d) pooled state."""
        n = history.shape[0]
        offsets = np.arange(n, dtype=float).reshape(n, 1) - (n - 1)
        scores = nm.matmul(Tensor(offsets), self.store[f"{self.name}.recency"])
        weights = nm.softmax(scores, axis=0)
        return nm.matmul(nm.transpose(weights, (1, 0)), history)

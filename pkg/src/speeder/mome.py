"""Hard-routed mixture-of-modality-experts fusion block.

An item enters as a small stack of per-modality rows (text, vision,
sequential; fixed order, 1 to 3 rows depending on which modalities are
active). The first ``l1`` layers route each row to its own modality expert
after shared multi-head self-attention over the rows; the remaining ``l2``
layers send every row through a single multimodal expert. Fusion averages the
final rows and maps them to the language-model width with an affine adapter.

The attention uses a shared projection composed with per-head projections:
head_i = softmax((H Wq Wq_i)(H Wk Wk_i)^T / sqrt(d_h)) (H Wv Wv_i), heads
concatenated then mapped by Wo. The layer combination is deliberately
asymmetric: H' = LN(MHSA + H_prev) but H = LN(FFN(H')) + H'.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import ParamStore, Tensor

MODALITY_ORDER = ("text", "vision", "seq")
EXPERT_FOR_MODALITY = {"text": "textual", "vision": "visual", "seq": "sequential"}
UNIMODAL_EXPERTS = ("textual", "visual", "sequential")
MULTIMODAL_EXPERT = "multimodal"


class RoutingError(ValueError):
    pass


def _uniform(rng, d_in, d_out):
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(d_in, d_out))


class MoMEBlock:
    """Parameters live in a ParamStore under ``mome.layer{i}.*``."""

    def __init__(
        self,
        store: ParamStore,
        d_f: int = 64,
        heads: int = 4,
        l1: int = 1,
        l2: int = 1,
        rng=None,
        d_ffn: int | None = None,
    ):
        if d_f % heads:
            raise nm.ShapeError("mome", (d_f,), (heads,), detail="d_f must divide by heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store = store
        self.d_f = d_f
        self.heads = heads
        self.d_h = d_f // heads
        self.l1 = l1
        self.l2 = l2
        self.d_ffn = d_ffn if d_ffn is not None else 4 * d_f
        for i in range(l1 + l2):
            p = f"mome.layer{i}"
            store.add(f"{p}.mhsa.w_q", _uniform(rng, d_f, d_f))
            store.add(f"{p}.mhsa.w_k", _uniform(rng, d_f, d_f))
            store.add(f"{p}.mhsa.w_v", _uniform(rng, d_f, d_f))
            store.add(f"{p}.mhsa.wq_heads", np.stack([_uniform(rng, d_f, self.d_h) for _ in range(heads)]))
            store.add(f"{p}.mhsa.wk_heads", np.stack([_uniform(rng, d_f, self.d_h) for _ in range(heads)]))
            store.add(f"{p}.mhsa.wv_heads", np.stack([_uniform(rng, d_f, self.d_h) for _ in range(heads)]))
            store.add(f"{p}.mhsa.w_o", _uniform(rng, d_f, d_f))
            store.add(f"{p}.ln1.gamma", np.ones(d_f))
            store.add(f"{p}.ln1.beta", np.zeros(d_f))
            store.add(f"{p}.ln2.gamma", np.ones(d_f))
            store.add(f"{p}.ln2.beta", np.zeros(d_f))
            experts = UNIMODAL_EXPERTS if i < l1 else (MULTIMODAL_EXPERT,)
            for tag in experts:
                e = f"{p}.expert.{tag}"
                store.add(f"{e}.w1", _uniform(rng, d_f, self.d_ffn))
                store.add(f"{e}.b1", np.zeros(self.d_ffn))
                store.add(f"{e}.w2", _uniform(rng, self.d_ffn, d_f))
                store.add(f"{e}.b2", np.zeros(d_f))

    # -- pieces -------------------------------------------------------------

    def _mhsa(self, layer: int, x: Tensor, attention_out: list | None = None) -> Tensor:
        """Shared-then-per-head attention over the row axis of (K, R, d_f)."""
        p = f"mome.layer{layer}.mhsa"
        s = self.store
        K, R, _ = x.shape
        qf = nm.matmul(x, s[f"{p}.w_q"])
        kf = nm.matmul(x, s[f"{p}.w_k"])
        vf = nm.matmul(x, s[f"{p}.w_v"])
        # (K, 1, R, d_f) @ (h, d_f, d_h) -> (K, h, R, d_h)
        q = nm.matmul(nm.reshape(qf, (K, 1, R, self.d_f)), s[f"{p}.wq_heads"])
        k = nm.matmul(nm.reshape(kf, (K, 1, R, self.d_f)), s[f"{p}.wk_heads"])
        v = nm.matmul(nm.reshape(vf, (K, 1, R, self.d_f)), s[f"{p}.wv_heads"])
        scores = nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d_h))
        att = nm.softmax(scores)
        if attention_out is not None:
            attention_out.append(att.data.copy())
        ctx = nm.matmul(att, v)  # (K, h, R, d_h)
        merged = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (K, R, self.d_f))
        return nm.matmul(merged, s[f"{p}.w_o"])

    def _expert(self, layer: int, tag: str, x: Tensor) -> Tensor:
        e = f"mome.layer{layer}.expert.{tag}"
        if f"{e}.w1" not in self.store:
            raise RoutingError(f"layer {layer} has no expert {tag!r}")
        s = self.store
        h = nm.relu(nm.matmul(x, s[f"{e}.w1"]) + s[f"{e}.b1"])
        return nm.matmul(h, s[f"{e}.w2"]) + s[f"{e}.b2"]

    def _ffn(self, layer: int, x: Tensor, row_tags) -> Tensor:
        if layer >= self.l1:
            return self._expert(layer, MULTIMODAL_EXPERT, x)
        outs = []
        for r, tag in enumerate(row_tags):
            if tag not in EXPERT_FOR_MODALITY:
                raise RoutingError(f"unknown modality tag {tag!r}")
            row = x[:, r : r + 1, :]
            outs.append(self._expert(layer, EXPERT_FOR_MODALITY[tag], row))
        return nm.concat(outs, axis=1)

    # -- public -------------------------------------------------------------

    def validate_tags(self, row_tags):
        tags = tuple(row_tags)
        if not 1 <= len(tags) <= len(MODALITY_ORDER):
            raise RoutingError(f"stack must have 1..3 rows, got {len(tags)}")
        for t in tags:
            if t not in EXPERT_FOR_MODALITY:
                raise RoutingError(f"unknown modality tag {t!r}")
        if len(set(tags)) != len(tags):
            raise RoutingError(f"duplicate modality rows: {tags}")
        expected = tuple(t for t in MODALITY_ORDER if t in tags)
        if tags != expected:
            raise RoutingError(f"rows must follow order {MODALITY_ORDER}, got {tags}")
        return tags

    def forward(self, x: Tensor, row_tags, attention_out: list | None = None) -> Tensor:
        """(K, R, d_f) stacks -> (K, R, d_f); rows keep their modality tags."""
        tags = self.validate_tags(row_tags)
        if x.ndim != 3 or x.shape[1] != len(tags) or x.shape[2] != self.d_f:
            raise nm.ShapeError("mome.forward", x.shape, (None, len(tags), self.d_f))
        s = self.store
        h = x
        for i in range(self.l1 + self.l2):
            attn = self._mhsa(i, h, attention_out)
            h_mid = nm.layernorm(attn + h, s[f"mome.layer{i}.ln1.gamma"], s[f"mome.layer{i}.ln1.beta"])
            ffn = self._ffn(i, h_mid, tags)
            h = nm.layernorm(ffn, s[f"mome.layer{i}.ln2.gamma"], s[f"mome.layer{i}.ln2.beta"]) + h_mid
        return h

    def fuse(self, x: Tensor, row_tags, fusion_adapter, attention_out: list | None = None) -> Tensor:
        """(K, R, d_f) -> (K, d): average rows after the block, then adapt."""
        h = self.forward(x, row_tags, attention_out)
        pooled = nm.avg_pool(h, axis=1)
        return fusion_adapter(pooled)

    def param_count(self) -> int:
        return sum(
            t.size for name, t in self.store.items() if name.startswith("mome.")
        )

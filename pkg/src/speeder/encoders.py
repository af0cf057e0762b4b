"""Frozen per-modality encoders, affine adapters, and the embedding cache.

Encoders are deliberately tiny stand-ins for large pretrained towers:

* text: mean of per-token hash-seeded random vectors (no training),
* vision: a fixed orthogonal projection of the raw image feature,
* sequential: the item-embedding table of a small causal next-item model
  trained once on the corpus and then frozen.

All encoder outputs are plain numpy arrays; they never participate in
autodiff, which is what makes the (item, version, stage) cache keys sound.
"""

from __future__ import annotations

import hashlib
import threading

import numpy as np

from . import numerics as nm
from .corpus import Dataset, Item
from .numerics import Adam, LrSchedule, ParamStore, Tensor


# -- text ------------------------------------------------------------------


def text_token_vector(token_id: int, dim: int, salt: int = 0) -> np.ndarray:
    """Deterministic pseudo-embedding for one vocabulary token."""
    rng = np.random.default_rng([1315423911, salt, int(token_id)])
    return rng.normal(size=dim) / np.sqrt(dim)


class TextEncoder:
    """Mean of per-token hash embeddings; parameter-free and frozen."""

    def __init__(self, dim: int = 32, salt: int = 0):
        self.dim = dim
        self.salt = salt
        self._token_cache: dict[int, np.ndarray] = {}

    def encode(self, item: Item) -> np.ndarray:
        if not item.title_tokens:
            return np.zeros(self.dim)
        rows = []
        for t in item.title_tokens:
            v = self._token_cache.get(t)
            if v is None:
                v = text_token_vector(t, self.dim, self.salt)
                self._token_cache[t] = v
            rows.append(v)
        return np.mean(rows, axis=0)

    def signature(self) -> bytes:
        return f"text:{self.dim}:{self.salt}".encode()


# -- vision ------------------------------------------------------------------


class VisionEncoder:
    """Fixed random orthogonal map of the raw image feature.

    When the output width is at least the input width the map has orthonormal
    columns, so norms are preserved exactly.
    """

    def __init__(self, d_in: int, d_out: int = 24, seed: int = 0):
        self.d_in = d_in
        self.d_out = d_out
        rng = np.random.default_rng([2654435761, seed, d_in, d_out])
        big, small = max(d_in, d_out), min(d_in, d_out)
        q, _ = np.linalg.qr(rng.normal(size=(big, small)))
        self.matrix = q if d_out >= d_in else q.T  # (d_out, d_in)

    def encode(self, item: Item) -> np.ndarray:
        v = np.asarray(item.vision_feature)
        if v.shape != (self.d_in,):
            raise nm.ShapeError("vision_encode", v.shape, (self.d_in,))
        return self.matrix @ v

    def signature(self) -> bytes:
        return b"vision:" + self.matrix.tobytes()


# -- sequential ------------------------------------------------------------


class SeqEncoder:
    """Per-item behavioral embedding from a trained-then-frozen next-item model."""

    def __init__(self, item_embeddings: np.ndarray):
        self.item_embeddings = item_embeddings
        self.dim = item_embeddings.shape[1]

    def encode(self, item: Item, history_context=None) -> np.ndarray:
        # Context-free on purpose: one vector per item id, cacheable by id.
        return self.item_embeddings[item.item_id]

    def signature(self) -> bytes:
        return b"seq:" + self.item_embeddings.tobytes()


def _init_linear(rng, d_in, d_out):
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(d_in, d_out))


def train_seq_encoder(
    dataset: Dataset,
    d_s: int = 32,
    epochs: int = 5,
    lr: float = 1e-3,
    batch_size: int = 128,
    seed: int = 0,
    heads: int = 2,
) -> SeqEncoder:
    """Train a one-layer causal self-attention next-item model, then freeze it.

    The item-embedding table is the encoder output; the prediction head is
    untied, so an item that never occurs in a training sequence keeps its
    initial embedding bit for bit.
    """
    V = len(dataset.catalog)
    chains = [
        s.items + [s.next_item]
        for s in dataset.sequences
        if s.split == "train"
    ]
    if not chains:
        raise ValueError("no training sequences for the sequential encoder")
    T = max(len(c) for c in chains) - 1
    pad = V  # padding id, row V of the input table
    rng = np.random.default_rng([seed, 31337])

    store = ParamStore()
    emb = store.add("seqenc.item_emb", rng.normal(size=(V + 1, d_s)) * 0.1)
    pos = store.add("seqenc.pos_emb", rng.normal(size=(T, d_s)) * 0.1)
    wq = store.add("seqenc.w_q", _init_linear(rng, d_s, d_s))
    wk = store.add("seqenc.w_k", _init_linear(rng, d_s, d_s))
    wv = store.add("seqenc.w_v", _init_linear(rng, d_s, d_s))
    wo = store.add("seqenc.w_o", _init_linear(rng, d_s, d_s))
    w1 = store.add("seqenc.ffn_w1", _init_linear(rng, d_s, 4 * d_s))
    b1 = store.add("seqenc.ffn_b1", np.zeros(4 * d_s))
    w2 = store.add("seqenc.ffn_w2", _init_linear(rng, 4 * d_s, d_s))
    b2 = store.add("seqenc.ffn_b2", np.zeros(d_s))
    g1 = store.add("seqenc.ln1_g", np.ones(d_s))
    be1 = store.add("seqenc.ln1_b", np.zeros(d_s))
    g2 = store.add("seqenc.ln2_g", np.ones(d_s))
    be2 = store.add("seqenc.ln2_b", np.zeros(d_s))
    head = store.add("seqenc.head", _init_linear(rng, d_s, V))

    dh = d_s // heads
    steps_per_epoch = (len(chains) + batch_size - 1) // batch_size
    opt = Adam(LrSchedule(max_lr=lr, total_steps=epochs * steps_per_epoch))

    def forward(ids: np.ndarray, mask: np.ndarray, targets: np.ndarray):
        B, L = ids.shape
        x = nm.gather_rows(emb, ids) + nm.index(pos, slice(0, L))
        h = nm.layernorm(x, g1, be1)
        q = nm.reshape(nm.matmul(h, wq), (B, L, heads, dh))
        k = nm.reshape(nm.matmul(h, wk), (B, L, heads, dh))
        v = nm.reshape(nm.matmul(h, wv), (B, L, heads, dh))
        q = nm.transpose(q, (0, 2, 1, 3))
        k = nm.transpose(k, (0, 2, 3, 1))
        v = nm.transpose(v, (0, 2, 1, 3))
        causal = np.triu(np.full((L, L), -np.inf), k=1)[None, None]
        att = nm.softmax(nm.matmul(q, k) * (1.0 / np.sqrt(dh)) + Tensor(causal))
        ctx = nm.transpose(nm.matmul(att, v), (0, 2, 1, 3))
        x = x + nm.matmul(nm.reshape(ctx, (B, L, d_s)), wo)
        h2 = nm.layernorm(x, g2, be2)
        x = x + nm.matmul(nm.relu(nm.matmul(h2, w1) + b1), w2) + b2
        logits = nm.matmul(x, head)
        return nm.cross_entropy(logits, targets, mask)

    order_rng = np.random.default_rng([seed, 777])
    for _ in range(epochs):
        order = order_rng.permutation(len(chains))
        for lo in range(0, len(order), batch_size):
            batch = [chains[i] for i in order[lo : lo + batch_size]]
            L = max(len(c) for c in batch) - 1
            ids = np.full((len(batch), L), pad, dtype=np.int64)
            targets = np.zeros((len(batch), L), dtype=np.int64)
            mask = np.zeros((len(batch), L))
            for r, chain in enumerate(batch):
                k = len(chain) - 1
                ids[r, :k] = chain[:-1]
                targets[r, :k] = chain[1:]
                mask[r, :k] = 1.0
            loss = forward(ids, mask, targets)
            opt.step(store, nm.backward(loss, store))
    return SeqEncoder(emb.data[:V].copy())


def initial_seq_embeddings(num_items: int, d_s: int, seed: int) -> np.ndarray:
    """The pre-training item table, re-derivable for inspection tests."""
    rng = np.random.default_rng([seed, 31337])
    return rng.normal(size=(num_items + 1, d_s)) * 0.1


# -- suite -------------------------------------------------------------------


class EncoderSuite:
    """The three frozen encoders plus a content hash for cache versioning."""

    def __init__(self, text: TextEncoder, vision: VisionEncoder, seq: SeqEncoder):
        self.text = text
        self.vision = vision
        self.seq = seq

    def encode(self, item: Item) -> dict[str, np.ndarray]:
        return {
            "text": self.text.encode(item),
            "vision": self.vision.encode(item),
            "seq": self.seq.encode(item),
        }

    @property
    def dims(self) -> dict[str, int]:
        return {"text": self.text.dim, "vision": self.vision.d_out, "seq": self.seq.dim}

    def version_hash(self) -> str:
        h = hashlib.sha256()
        for sig in (self.text.signature(), self.vision.signature(), self.seq.signature()):
            h.update(sig)
        return h.hexdigest()

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "encoder.text.dim": np.array([self.text.dim, self.text.salt], dtype=np.int64),
            "encoder.vision.matrix": self.vision.matrix,
            "encoder.seq.item_emb": self.seq.item_embeddings,
        }

    @staticmethod
    def from_arrays(arrays: dict[str, np.ndarray]) -> "EncoderSuite":
        dim, salt = (int(x) for x in arrays["encoder.text.dim"])
        text = TextEncoder(dim, salt)
        mat = arrays["encoder.vision.matrix"]
        vision = VisionEncoder.__new__(VisionEncoder)
        vision.d_out, vision.d_in = mat.shape
        vision.matrix = mat
        seq = SeqEncoder(arrays["encoder.seq.item_emb"])
        return EncoderSuite(text, vision, seq)


def build_encoder_suite(dataset: Dataset, cfg: dict, seed: int) -> EncoderSuite:
    """Construct and pretrain the frozen encoder set for a dataset."""
    d_vision_in = dataset.catalog[0].vision_feature.shape[0]
    text = TextEncoder(dim=cfg.get("d_text", 32), salt=seed)
    vision = VisionEncoder(d_vision_in, d_out=cfg.get("d_vision_out", 24), seed=seed)
    seq = train_seq_encoder(
        dataset,
        d_s=cfg.get("d_seq", 32),
        epochs=cfg.get("seq_epochs", 5),
        lr=cfg.get("seq_lr", 1e-3),
        batch_size=cfg.get("seq_batch", 128),
        seed=seed,
    )
    return EncoderSuite(text, vision, seq)


# -- adapters ----------------------------------------------------------------


class Adapter:
    """Single affine layer x @ w + b with params registered in a ParamStore."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng, zero_init=False):
        if zero_init:
            w0 = np.zeros((d_in, d_out))
        else:
            w0 = _init_linear(rng, d_in, d_out)
        self.name = name
        self.w = store.add(f"{name}.w", w0)
        self.b = store.add(f"{name}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return nm.matmul(x, self.w) + self.b


# -- cache -------------------------------------------------------------------


class EmbeddingCache:
    """(item_id, tag) -> vector store; tags embed a version hash.

    Reads are lock-free on the dict snapshot; writes are serialized. A hit
    returns the stored array object, so repeated lookups are bit-identical.
    """

    def __init__(self):
        self._data: dict[tuple[str, int], np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get_or_compute(self, item_id: int, tag: str, compute):
        key = (tag, int(item_id))
        found = self._data.get(key)
        if found is not None:
            self.hits += 1
            return found
        value = np.asarray(compute())
        with self._lock:
            self._data[key] = value
        self.misses += 1
        return value

    def contains(self, item_id: int, tag: str) -> bool:
        return (tag, int(item_id)) in self._data

    def scalars_for_tag(self, tag: str) -> int:
        return sum(v.size for (t, _), v in self._data.items() if t == tag)

    def items_for_tag(self, tag: str) -> int:
        return sum(1 for (t, _) in self._data if t == tag)

    def clear(self):
        with self._lock:
            self._data.clear()

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {f"cache/{tag}/{iid}": v for (tag, iid), v in self._data.items()}

    @staticmethod
    def from_arrays(arrays: dict[str, np.ndarray]) -> "EmbeddingCache":
        cache = EmbeddingCache()
        for name, v in arrays.items():
            if not name.startswith("cache/"):
                continue
            _, tag, iid = name.split("/", 2)
            cache._data[(tag, int(iid))] = v
        return cache

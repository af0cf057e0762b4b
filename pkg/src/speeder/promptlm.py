"""Prompt construction and the small language-model backbone.

Prompts are token sequences with reserved slots where item embeddings are
injected in place of word embeddings.  Every item block has a fixed token
width, so prompt length is an exact affine function of the item counts:
``len = avg_tokens * (n + m) + fixed_overhead``.  Two modes exist: the
compressed mode injects one fused embedding per item (2 tokens per item),
the title mode spells items out as hashed title tokens (20 per item).

The backbone is a small decoder-only transformer.  Its base weights can
stay frozen while low-rank adapter pairs (zero-initialised on one side,
so the adapted model starts bit-identical to the base) learn the task.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nm
from .numerics import ParamStore, ShapeError, Tensor
from .spae import PPTInstance

__all__ = [
    "PromptSpec",
    "Vocab",
    "BuiltPrompt",
    "PromptTemplate",
    "ModalityGate",
    "TinyLM",
    "ParsedOutput",
    "parse_output",
    "stack_token_rows",
]

PAD, BOS, EMB, TPAD = "<pad>", "<bos>", "<emb>", "<tpad>"

INSTRUCTION = ("here", "is", "a", "numbered", "history", "of", "items", "a",
               "user", "interacted", "with", "followed", "by", "questions",
               "and", "candidates")
PROXY_QUESTION = ("is", "item", "a", "at", "least", "as", "close", "to",
                  "b", "as", "c")
PRIMARY_QUESTION = ("which", "candidate", "item", "does", "the", "user",
                    "interact", "with", "next")
OUTPUT_FORMAT = ("answer", "yes", "or", "no", "then", "the", "index")
SUBSET_LABELS = ("a", "b", "c")


@dataclass(frozen=True)
class PromptSpec:
    """Shape of the prompt language: injection mode and slot widths."""

    mode: str = "fused"           # "fused" | "title"
    include_proxy: bool = True
    n_max: int = 50
    m_max: int = 50
    title_words: int = 19         # title tokens following the index token
    title_buckets: int = 200

    def __post_init__(self):
        if self.mode not in ("fused", "title"):
            raise ValueError(f"unknown prompt mode {self.mode!r}")

    @property
    def avg_tokens(self) -> int:
        return 2 if self.mode == "fused" else 1 + self.title_words

    @property
    def target_len(self) -> int:
        return 2 if self.include_proxy else 1


class Vocab:
    """Closed token inventory for the prompt language.

    Index tokens cover both history numbering and candidate numbering;
    title tokens are crc32 hash buckets so the mapping is stable across
    runs and machines.
    """

    def __init__(self, spec: PromptSpec) -> None:
        self.spec = spec
        tokens = [PAD, BOS, EMB, TPAD, "yes", "no"]
        seen = set(tokens)
        for word in (INSTRUCTION + PROXY_QUESTION + PRIMARY_QUESTION
                     + OUTPUT_FORMAT + SUBSET_LABELS):
            if word not in seen:
                seen.add(word)
                tokens.append(word)
        max_index = max(spec.n_max, spec.m_max)
        for j in range(1, max_index + 1):
            tokens.append(f"<i{j}>")
        for b in range(spec.title_buckets):
            tokens.append(f"<t{b}>")
        self._tok_to_id = {t: i for i, t in enumerate(tokens)}
        self._id_to_tok = tokens
        self._index_base = self._tok_to_id["<i1>"]
        self._max_index = max_index

    def __len__(self) -> int:
        return len(self._id_to_tok)

    def id(self, token: str) -> int:
        return self._tok_to_id[token]

    def token(self, tid: int) -> str:
        return self._id_to_tok[tid]

    @property
    def pad_id(self) -> int:
        return self._tok_to_id[PAD]

    @property
    def yes_id(self) -> int:
        return self._tok_to_id["yes"]

    @property
    def no_id(self) -> int:
        return self._tok_to_id["no"]

    def index_id(self, j: int) -> int:
        if not 1 <= j <= self._max_index:
            raise ValueError(f"index token {j} outside 1..{self._max_index}")
        return self._index_base + j - 1

    def index_value(self, tid: int) -> int | None:
        """1-based slot number if ``tid`` is an index token, else None."""
        off = tid - self._index_base
        return off + 1 if 0 <= off < self._max_index else None

    def encode_title(self, title: str) -> list[int]:
        """Hash-bucket title words to exactly ``spec.title_words`` ids."""
        ids = [self._tok_to_id[f"<t{zlib.crc32(w.encode()) % self.spec.title_buckets}>"]
               for w in title.lower().split()]
        ids = ids[: self.spec.title_words]
        ids += [self._tok_to_id[TPAD]] * (self.spec.title_words - len(ids))
        return ids


@dataclass
class BuiltPrompt:
    """Assembled prompt: token ids plus symbolic embedding slots.

    ``emb_refs`` pairs a position in ``ids`` with what belongs there:
    ("hist", k) for the k-th history item (position-prompt composed),
    ("subset", i) for the i-th proxy-subset item (raw embedding), and
    ("cand", j) for the j-th candidate (raw embedding).  ``tag_refs``
    lists the item index-token positions; the item's embedding is added
    on top of the token embedding there, so identity and content are
    attendable at one position.
    """

    ids: list[int]
    emb_refs: list[tuple[int, tuple[str, int]]] = field(default_factory=list)
    tag_refs: list[tuple[int, tuple[str, int]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


class PromptTemplate:
    """Deterministic prompt assembly with exact affine length."""

    def __init__(self, vocab: Vocab) -> None:
        self.vocab = vocab
        self.spec = vocab.spec

    def _words(self, words: Sequence[str]) -> list[int]:
        return [self.vocab.id(w) for w in words]

    def _item_block(self, number: int, title: str | None,
                    out_ids: list[int], emb_refs, tag_refs, ref) -> None:
        if self.spec.mode == "fused":
            tag_refs.append((len(out_ids), ref))
        out_ids.append(self.vocab.index_id(number))
        if self.spec.mode == "fused":
            emb_refs.append((len(out_ids), ref))
            out_ids.append(self.vocab.id(EMB))
        else:
            out_ids.extend(self.vocab.encode_title(title or ""))

    def fixed_overhead(self) -> int:
        """Prompt tokens that do not scale with history or candidates."""
        t0 = 1 + len(INSTRUCTION) + len(PRIMARY_QUESTION) + len(OUTPUT_FORMAT)
        if self.spec.include_proxy:
            t0 += len(PROXY_QUESTION) + len(SUBSET_LABELS) * self.spec.avg_tokens
        return t0

    def prompt_length(self, n: int, m: int) -> int:
        return self.spec.avg_tokens * (n + m) + self.fixed_overhead()

    def build(self, history: Sequence[int], candidates: Sequence[int],
              proxy: PPTInstance | None = None,
              titles: dict[int, str] | None = None) -> BuiltPrompt:
        spec = self.spec
        if len(history) > spec.n_max or len(candidates) > spec.m_max:
            raise ValueError("history or candidate list exceeds template limits")
        if spec.include_proxy and proxy is None:
            raise ValueError("template includes the proxy block; pass a proxy instance")
        if spec.mode == "title" and titles is None:
            raise ValueError("title mode needs an item-id -> title mapping")

        def title_of(iid):
            return titles[iid] if titles is not None else None

        ids: list[int] = [self.vocab.id(BOS)]
        refs: list[tuple[int, tuple[str, int]]] = []
        tags: list[tuple[int, tuple[str, int]]] = []
        ids.extend(self._words(INSTRUCTION))
        for k, iid in enumerate(history):
            self._item_block(k + 1, title_of(iid), ids, refs, tags, ("hist", k))
        if spec.include_proxy:
            assert proxy is not None
            for i, label in enumerate(SUBSET_LABELS):
                if spec.mode == "fused":
                    tags.append((len(ids), ("subset", i)))
                ids.append(self.vocab.id(label))
                if spec.mode == "fused":
                    refs.append((len(ids), ("subset", i)))
                    ids.append(self.vocab.id(EMB))
                else:
                    ids.extend(self.vocab.encode_title(title_of(proxy.item_ids[i]) or ""))
            ids.extend(self._words(PROXY_QUESTION))
        ids.extend(self._words(PRIMARY_QUESTION))
        for j in range(len(candidates)):
            self._item_block(j + 1, title_of(candidates[j]), ids, refs, tags, ("cand", j))
        ids.extend(self._words(OUTPUT_FORMAT))
        if spec.mode == "fused" and spec.include_proxy:
            # the readout token answers the proxy question first, so it
            # carries the middle subset item as its comparison query
            tags.append((len(ids) - 1, ("subset", 1)))
        built = BuiltPrompt(ids=ids, emb_refs=refs, tag_refs=tags)
        assert len(built) == self.prompt_length(len(history), len(candidates))
        return built

    def target_ids(self, answer_slot: int, proxy_label: str | None = None) -> list[int]:
        """Completion tokens: optional proxy answer, then the slot index."""
        out = []
        if self.spec.include_proxy:
            if proxy_label not in ("yes", "no"):
                raise ValueError("proxy template needs a yes/no label")
            out.append(self.vocab.id(proxy_label))
        out.append(self.vocab.index_id(answer_slot))
        return out


# -- modality gates --------------------------------------------------------


class ModalityGate:
    """Elementwise gate on a non-text embedding: act(x W + b) * x.

    Zero initialisation makes the gated modality contribute nothing at
    step 0 and ramp in smoothly as the gate weights learn.  Text is the
    anchor modality and is never gated.
    """

    MODES = ("tanh", "relu", "none")

    def __init__(self, store: ParamStore, modality: str, d: int,
                 mode: str = "tanh") -> None:
        if modality == "text":
            raise ValueError("text embeddings are not gated")
        if modality not in ("vision", "seq"):
            raise ValueError(f"unknown gated modality {modality!r}")
        if mode not in self.MODES:
            raise ValueError(f"unknown gate mode {mode!r}")
        self.mode = mode
        self.name = f"gates.{modality}"
        self.store = store
        if mode != "none":
            store.add(f"{self.name}.w", np.zeros((d, d)))
            store.add(f"{self.name}.b", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        if self.mode == "none":
            return x
        pre = nm.add(nm.matmul(x, self.store[f"{self.name}.w"]),
                     self.store[f"{self.name}.b"])
        act = nm.tanh(pre) if self.mode == "tanh" else nm.relu(pre)
        return nm.mul(act, x)


# -- the decoder-only backbone ---------------------------------------------


class TinyLM:
    """Small causal transformer with optional low-rank adapter pairs.

    Pre-norm blocks; untied output head.  Adapter pairs sit on the four
    attention projections; the ``b`` side starts at zero so the adapted
    forward pass is bit-identical to the base until training moves it.

    Attention projections are identity-initialised, which makes every
    head a generic content-match head out of the box: a position whose
    residual holds some vector attends to positions whose residuals
    correlate with it and copies their content through unscrambled.
    Large pretrained models come with such heads already; a backbone
    this small trained from random init within a desk-scale step budget
    does not grow them, so the backbone ships with them instead and the
    adapters only have to reshape what is already there.
    """

    def __init__(self, store: ParamStore, vocab_size: int, d: int = 64,
                 n_layers: int = 2, n_heads: int = 4, context: int = 512,
                 lora_rank: int = 4, rng: np.random.Generator | None = None,
                 prefix: str = "lm") -> None:
        if d % n_heads:
            raise ValueError("model width must divide evenly across heads")
        rng = rng or np.random.default_rng(0)
        self.store = store
        self.prefix = prefix
        self.vocab_size = vocab_size
        self.d = d
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.context = context
        self.lora_rank = lora_rank

        def init(*shape):
            return rng.normal(scale=0.02, size=shape)

        store.add(f"{prefix}.tok_emb", init(vocab_size, d))
        store.add(f"{prefix}.pos_emb", init(context, d))
        for i in range(n_layers):
            lp = f"{prefix}.layer{i}"
            store.add(f"{lp}.ln1.gamma", np.ones(d))
            store.add(f"{lp}.ln1.beta", np.zeros(d))
            for nme in ("q", "k", "v", "o"):
                store.add(f"{lp}.attn.w_{nme}", np.eye(d))
            store.add(f"{lp}.ln2.gamma", np.ones(d))
            store.add(f"{lp}.ln2.beta", np.zeros(d))
            store.add(f"{lp}.ffn.w1", init(d, 4 * d))
            store.add(f"{lp}.ffn.b1", np.zeros(4 * d))
            store.add(f"{lp}.ffn.w2", init(4 * d, d))
            store.add(f"{lp}.ffn.b2", np.zeros(d))
        store.add(f"{prefix}.ln_f.gamma", np.ones(d))
        store.add(f"{prefix}.ln_f.beta", np.zeros(d))
        store.add(f"{prefix}.head", init(d, vocab_size))
        # adapter pairs draw last so base weights are seed-identical
        # whether or not adapters exist
        if lora_rank > 0:
            for i in range(n_layers):
                for nme in ("q", "k", "v", "o"):
                    lp = f"{prefix}.layer{i}.attn.lora.{nme}"
                    store.add(f"{lp}.a", init(d, lora_rank))
                    store.add(f"{lp}.b", np.zeros((lora_rank, d)))

    # parameter-name helpers used by training-plan construction
    def base_param_names(self) -> list[str]:
        return [n for n in self.store.names()
                if n.startswith(self.prefix + ".") and ".lora." not in n]

    def _proj(self, layer: int, nme: str, x: Tensor) -> Tensor:
        lp = f"{self.prefix}.layer{layer}.attn"
        y = nm.matmul(x, self.store[f"{lp}.w_{nme}"])
        if self.lora_rank > 0:
            delta = nm.matmul(nm.matmul(x, self.store[f"{lp}.lora.{nme}.a"]),
                              self.store[f"{lp}.lora.{nme}.b"])
            y = nm.add(y, delta)
        return y

    def _attention(self, layer: int, x: Tensor) -> Tensor:
        K, N, d = x.shape
        h, dh = self.n_heads, self.d_head

        def split(t):
            return nm.transpose(nm.reshape(t, (K, N, h, dh)), (0, 2, 1, 3))

        q = split(self._proj(layer, "q", x))
        k = split(self._proj(layer, "k", x))
        v = split(self._proj(layer, "v", x))
        scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))),
                          1.0 / np.sqrt(dh))
        mask = np.triu(np.full((N, N), -1e9), k=1)
        att = nm.softmax(nm.add(scores, Tensor(mask)), axis=-1)
        ctx = nm.matmul(att, v)
        merged = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (K, N, d))
        return self._proj(layer, "o", merged)

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return nm.layernorm(x, self.store[f"{name}.gamma"], self.store[f"{name}.beta"])

    def forward(self, ids: np.ndarray, emb: Tensor | None = None,
                emb_mask: np.ndarray | None = None) -> Tensor:
        """Logits (K, N, V) for token ids (K, N) with optional injections.

        Rows of ``emb`` replace token embeddings wherever ``emb_mask``
        is 1; both carry the full (K, N, d) / (K, N, 1) shapes.
        """
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeError("forward", ids.shape, ("K", "N"))
        K, N = ids.shape
        if N > self.context:
            raise ValueError(f"sequence length {N} exceeds context {self.context}")
        x = nm.gather_rows(self.store[f"{self.prefix}.tok_emb"], ids)
        if emb is not None:
            if emb_mask is None:
                raise ValueError("embedding injection needs a slot mask")
            mask = Tensor(np.asarray(emb_mask, dtype=x.data.dtype).reshape(K, N, 1))
            keep = Tensor(1.0 - mask.data)
            x = nm.add(nm.mul(x, keep), nm.mul(emb, mask))
        pos = nm.index(self.store[f"{self.prefix}.pos_emb"], slice(0, N))
        x = nm.add(x, pos)
        for i in range(self.n_layers):
            lp = f"{self.prefix}.layer{i}"
            x = nm.add(x, self._attention(i, self._ln(f"{lp}.ln1", x)))
            hidden = nm.relu(nm.add(nm.matmul(self._ln(f"{lp}.ln2", x),
                                              self.store[f"{lp}.ffn.w1"]),
                                    self.store[f"{lp}.ffn.b1"]))
            ff = nm.add(nm.matmul(hidden, self.store[f"{lp}.ffn.w2"]),
                        self.store[f"{lp}.ffn.b2"])
            x = nm.add(x, ff)
        x = self._ln(f"{self.prefix}.ln_f", x)
        return nm.matmul(x, self.store[f"{self.prefix}.head"])

    def loss(self, ids: np.ndarray, loss_mask: np.ndarray,
             emb: Tensor | None = None, emb_mask: np.ndarray | None = None) -> Tensor:
        """Mean next-token cross-entropy over positions with mask 1.

        ``loss_mask[k, t] == 1`` marks that ``ids[k, t]`` must be
        predicted from the prefix before it.
        """
        logits = self.forward(ids, emb=emb, emb_mask=emb_mask)
        shifted = nm.index(logits, (slice(None), slice(0, ids.shape[1] - 1)))
        mask = np.asarray(loss_mask)[:, 1:]
        total = float(mask.sum())
        if total <= 0:
            raise ValueError("loss mask selects no positions")
        return nm.cross_entropy(shifted, ids[:, 1:], mask=mask, denom=total)

    def generate(self, ids: Sequence[int], steps: int,
                 emb: Tensor | None = None,
                 emb_mask: np.ndarray | None = None) -> tuple[list[int], np.ndarray]:
        """Greedy continuation of a single prompt; returns (new_ids, logits).

        ``logits`` stacks the pre-argmax distributions, one row per
        emitted token.  ``emb`` may be wider than the prompt: slots past
        the prompt take effect as generation reaches those positions,
        which lets a query vector ride on a continuation slot the same
        way it does under teacher forcing.  Beyond the injection width
        the mask is zero-extended.
        """
        out: list[int] = []
        rows = []
        cur = list(ids)
        mask = None if emb_mask is None else np.asarray(emb_mask, dtype=float).ravel()
        with nm.no_grad():
            for _ in range(steps):
                n = len(cur)
                cur_emb = emb
                cur_mask = mask
                if emb is not None and emb.shape[1] >= n:
                    cur_emb = nm.index(emb, (slice(None), slice(0, n)))
                    cur_mask = mask[:n]
                elif emb is not None:
                    pad = np.zeros((1, n - emb.shape[1], emb.shape[2]))
                    cur_emb = nm.concat([emb, Tensor(pad)], axis=1)
                    cur_mask = np.concatenate([mask, np.zeros(n - mask.size)])
                logits = self.forward(np.asarray([cur]),
                                      emb=cur_emb,
                                      emb_mask=None if cur_mask is None else cur_mask[None, :])
                row = logits.data[0, -1]
                nxt = int(np.argmax(row))
                rows.append(row.copy())
                out.append(nxt)
                cur.append(nxt)
        return out, np.stack(rows)


@dataclass(frozen=True)
class ParsedOutput:
    """Decoded completion: validity flags plus extracted fields."""

    valid: bool
    proxy_label: str | None
    slot: int | None
    raw_tokens: tuple[str, ...]


def parse_output(vocab: Vocab, out_ids: Sequence[int], include_proxy: bool,
                 m: int) -> ParsedOutput:
    """Interpret emitted ids; any malformed field invalidates the output."""
    toks = tuple(vocab.token(t) for t in out_ids)
    need = 2 if include_proxy else 1
    if len(out_ids) != need:
        return ParsedOutput(False, None, None, toks)
    label = None
    idx_tok = out_ids[-1]
    if include_proxy:
        if out_ids[0] == vocab.yes_id:
            label = "yes"
        elif out_ids[0] == vocab.no_id:
            label = "no"
        else:
            return ParsedOutput(False, None, None, toks)
    slot = vocab.index_value(idx_tok)
    if slot is None or not 1 <= slot <= m:
        return ParsedOutput(False, label, None, toks)
    return ParsedOutput(True, label, slot, toks)


def stack_token_rows(rows: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad variable-length id rows; returns (ids, real-token mask)."""
    if not rows:
        raise ValueError("nothing to stack")
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    return ids, mask

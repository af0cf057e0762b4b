"""End-to-end assembly: encoders -> adapters/gates -> fusion -> prompts -> LM.

One parameter store holds every learnable piece so staged training can
freeze and thaw by name pattern.  Frozen encoders stay outside the store;
their outputs enter the graph as constants through an embedding cache.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .config import ConfigError, config_hash
from .corpus import Catalog, Dataset
from .encoders import Adapter, EmbeddingCache, EncoderSuite
from .mome import MoMEBlock
from .numerics import ParamStore, Tensor, load_container, save_container
from .promptlm import (
    ModalityGate,
    ParsedOutput,
    PromptSpec,
    PromptTemplate,
    TinyLM,
    Vocab,
    parse_output,
    stack_token_rows,
)
from .spae import PPTInstance, PositionPromptTable, RecencyPool, sample_ppt_instance

__all__ = [
    "PromptExample",
    "example_from_dataset",
    "FeaturePipeline",
    "SpeederModel",
    "title_text",
]

CHECKPOINT_FORMAT = "speeder-checkpoint"

# loss weight on prompt tokens relative to the answer tokens
PROMPT_LM_WEIGHT = 0.1


@dataclass
class PromptExample:
    """One training/eval unit: a history, a candidate pool, the answer."""

    history: list[int]
    candidates: list[int]
    answer_slot: int                 # 1-based position of the positive
    proxy: PPTInstance | None = None


def example_from_dataset(dataset: Dataset, seq_index: int,
                         rng: np.random.Generator | None = None,
                         include_proxy: bool = True) -> PromptExample:
    seq = dataset.sequences[seq_index]
    pool = dataset.pools[seq_index]
    proxy = None
    if include_proxy:
        if rng is None:
            raise ValueError("proxy sampling needs an rng")
        proxy = sample_ppt_instance(seq.items, rng)
    return PromptExample(history=list(seq.items),
                         candidates=list(pool.candidates),
                         answer_slot=pool.positive_index + 1,
                         proxy=proxy)


def title_text(item) -> str:
    return " ".join(f"w{t}" for t in item.title_tokens)


class FeaturePipeline:
    """Catalog + frozen encoders + cache, presented as feature lookups."""

    def __init__(self, catalog: Catalog, suite: EncoderSuite,
                 cache: EmbeddingCache | None = None) -> None:
        self.catalog = catalog
        self.suite = suite
        self.cache = cache if cache is not None else EmbeddingCache()
        version = suite.version_hash()[:12]
        self.tags = {m: f"{m}-{version}" for m in ("text", "vision", "seq")}

    def features(self, item_ids, modalities) -> dict[str, np.ndarray]:
        encoders = {"text": self.suite.text, "vision": self.suite.vision,
                    "seq": self.suite.seq}
        out = {}
        for mod in modalities:
            enc = encoders[mod]
            rows = [self.cache.get_or_compute(
                        iid, self.tags[mod],
                        lambda iid=iid: enc.encode(self.catalog[iid]))
                    for iid in item_ids]
            out[mod] = np.stack(rows)
        return out

    def titles(self, item_ids) -> dict[int, str]:
        return {iid: title_text(self.catalog[iid]) for iid in item_ids}


def _distinct_items(examples) -> list[int]:
    seen: dict[int, None] = {}
    for ex in examples:
        for iid in ex.history:
            seen.setdefault(iid, None)
        if ex.proxy is not None:
            for iid in ex.proxy.item_ids:
                seen.setdefault(iid, None)
        for iid in ex.candidates:
            seen.setdefault(iid, None)
    return list(seen)


class SpeederModel:
    """All learnable components wired around one parameter store."""

    def __init__(self, cfg: dict, rng: np.random.Generator | None = None) -> None:
        self.cfg = dict(cfg)
        rng = rng or np.random.default_rng([int(cfg["seed"]), 424243])
        spec = PromptSpec(mode=cfg["prompt_mode"],
                          include_proxy=cfg["include_proxy"],
                          n_max=cfg["n_max"], m_max=cfg["m_max"],
                          title_words=cfg["title_words"],
                          title_buckets=cfg["title_buckets"])
        self.spec = spec
        self.vocab = Vocab(spec)
        self.template = PromptTemplate(self.vocab)
        self.store = ParamStore()
        d_f = cfg["d_f"]
        self.adapters = {
            "text": Adapter(self.store, "adapters.text", cfg["d_text"], d_f, rng),
            "vision": Adapter(self.store, "adapters.vision", cfg["d_vision_out"], d_f, rng),
            "seq": Adapter(self.store, "adapters.seq", cfg["d_seq"], d_f, rng),
            "fusion": Adapter(self.store, "adapters.fusion", d_f, d_f, rng),
        }
        self.gates = {}
        if cfg["gate_mode"] != "none":
            for mod in ("vision", "seq"):
                self.gates[mod] = ModalityGate(self.store, mod, d_f, cfg["gate_mode"])
        self.mome = MoMEBlock(self.store, d_f=d_f, heads=cfg["mome_heads"],
                              l1=cfg["mome_l1"], l2=cfg["mome_l2"], rng=rng)
        self.ppl = PositionPromptTable(self.store, cfg["n_max"], d_f)
        self.state_pool = RecencyPool(self.store)
        self.lm = TinyLM(self.store, len(self.vocab), d=d_f,
                         n_layers=cfg["lm_layers"], n_heads=cfg["lm_heads"],
                         context=cfg["lm_context"], lora_rank=cfg["lora_rank"],
                         rng=rng)

    # -- fusion -------------------------------------------------------------

    def fuse_items(self, features: dict[str, np.ndarray],
                   modalities=None) -> Tensor:
        """Distinct-item features (K, dim) per modality -> fused (K, d_f)."""
        tags = self.mome.validate_tags(modalities or self.cfg["modalities"])
        rows = []
        for mod in tags:
            y = self.adapters[mod](Tensor(features[mod]))
            if mod in self.gates:
                y = self.gates[mod](y)
            rows.append(y)
        stacked = nm.stack(rows, axis=1)
        return self.mome.fuse(stacked, tags, self.adapters["fusion"])

    # -- prompt assembly ------------------------------------------------------

    def _ref_item(self, ex: PromptExample, ref: tuple[str, int]) -> int:
        kind, k = ref
        if kind == "hist":
            return ex.history[k]
        if kind == "subset":
            assert ex.proxy is not None
            return ex.proxy.item_ids[k]
        return ex.candidates[k]

    def _build_rows(self, examples, titles):
        builts, id_rows, loss_rows = [], [], []
        for ex in examples:
            built = self.template.build(ex.history, ex.candidates,
                                        proxy=ex.proxy, titles=titles)
            label = ex.proxy.label if ex.proxy is not None else None
            tgt = self.template.target_ids(ex.answer_slot, label)
            ids = built.ids + tgt
            # light language-model pressure on the prompt itself: the
            # numbered item blocks are the only non-constant pattern and
            # predicting them is what builds position/copy machinery
            mask = [PROMPT_LM_WEIGHT] * len(built.ids) + [1.0] * len(tgt)
            builts.append(built)
            id_rows.append(ids)
            loss_rows.append(mask)
        return builts, id_rows, loss_rows

    def _state_pos(self, ex, built) -> int:
        """Position whose next-token prediction is the recommended index.

        With the proxy block the completion is [yes/no, index], so the
        index is predicted from the first completion slot; without it
        the index is predicted straight from the final prompt token.
        """
        return len(built.ids) - 1 + (1 if ex.proxy is not None else 0)

    def _state_rows(self, examples, builts, fused: Tensor,
                    item_row: dict[int, int], width: int) -> Tensor:
        """(B, width, d_f) rows placing one pooled user state per example
        on the slot that predicts the recommended index."""
        rows = []
        for ex, built in zip(examples, builts):
            hist = nm.gather_rows(
                fused, np.asarray([item_row[iid] for iid in ex.history]))
            pooled = self.state_pool(hist)
            onehot = np.zeros((width, 1))
            onehot[self._state_pos(ex, built), 0] = 1.0
            rows.append(nm.matmul(Tensor(onehot), pooled))
        return nm.stack(rows, axis=0)

    def _injection(self, examples, builts, fused: Tensor,
                   item_row: dict[int, int], width: int):
        """Gathered embedding rows plus position prompts for every slot.

        Item mention tokens (history and candidate numbers, proxy subset
        labels) are content-tagged: the position keeps its token
        embedding (gathered here so the gradient still reaches it) with
        the item embedding added on top.  The slot that predicts the
        recommended index carries the recency-pooled user state; it may
        sit one past the prompt, so ``width`` must cover it.
        """
        B = len(examples)
        emb_idx = np.zeros((B, width), dtype=np.int64)
        gather_mask = np.zeros((B, width))
        pos_idx = np.zeros((B, width), dtype=np.int64)
        ppl_mask = np.zeros((B, width, 1))
        tag_tok = np.zeros((B, width), dtype=np.int64)
        tag_mask = np.zeros((B, width))
        state_mask = np.zeros((B, width))
        for b, (ex, built) in enumerate(zip(examples, builts)):
            for pos, ref in built.emb_refs:
                emb_idx[b, pos] = item_row[self._ref_item(ex, ref)]
                gather_mask[b, pos] = 1.0
                if ref[0] == "hist" and self.cfg["use_ppl"]:
                    pos_idx[b, pos] = ref[1]
                    ppl_mask[b, pos, 0] = 1.0
            for pos, ref in built.tag_refs:
                emb_idx[b, pos] = item_row[self._ref_item(ex, ref)]
                gather_mask[b, pos] = 1.0
                tag_tok[b, pos] = built.ids[pos]
                tag_mask[b, pos] = 1.0
            if self.cfg["use_state_slot"]:
                state_mask[b, self._state_pos(ex, built)] = 1.0
        inject = nm.mul(nm.gather_rows(fused, emb_idx), Tensor(gather_mask[..., None]))
        if self.cfg["use_state_slot"]:
            inject = nm.add(inject, self._state_rows(examples, builts, fused,
                                                     item_row, width))
        if tag_mask.any():
            toks = nm.gather_rows(self.store["lm.tok_emb"], tag_tok)
            inject = nm.add(inject, nm.mul(toks, Tensor(tag_mask[..., None])))
        if self.cfg["use_ppl"] and ppl_mask.any():
            prompts = nm.mul(nm.gather_rows(self.ppl.table, pos_idx), Tensor(ppl_mask))
            inject = nm.add(inject, prompts)
        emb_mask = np.maximum(np.maximum(gather_mask, tag_mask), state_mask)
        return inject, emb_mask

    # -- losses and generation -----------------------------------------------

    def batch_loss(self, examples, pipeline: FeaturePipeline,
                   modalities=None) -> Tensor:
        """Mean target-token cross-entropy over a batch of examples."""
        if not examples:
            raise ValueError("empty batch")
        titles = None
        if self.spec.mode == "title":
            titles = pipeline.titles(_distinct_items(examples))
        builts, id_rows, loss_rows = self._build_rows(examples, titles)
        ids, _ = stack_token_rows(id_rows, self.vocab.pad_id)
        loss_mask = np.zeros(ids.shape)
        for i, row in enumerate(loss_rows):
            loss_mask[i, : len(row)] = row
        if self.spec.mode == "title":
            return self.lm.loss(ids, loss_mask)
        items = _distinct_items(examples)
        item_row = {iid: r for r, iid in enumerate(items)}
        mods = tuple(modalities or self.cfg["modalities"])
        fused = self.fuse_items(pipeline.features(items, mods), mods)
        inject, emb_mask = self._injection(examples, builts, fused,
                                           item_row, ids.shape[1])
        return self.lm.loss(ids, loss_mask, emb=inject, emb_mask=emb_mask)

    def generate_example(self, ex: PromptExample, pipeline: FeaturePipeline,
                         modalities=None) -> tuple[ParsedOutput, np.ndarray]:
        """Greedy completion of one prompt -> (parsed output, logit rows)."""
        titles = None
        if self.spec.mode == "title":
            titles = pipeline.titles(_distinct_items([ex]))
        built = self.template.build(ex.history, ex.candidates,
                                    proxy=ex.proxy, titles=titles)
        with nm.no_grad():
            emb = mask = None
            if self.spec.mode == "fused":
                items = _distinct_items([ex])
                item_row = {iid: r for r, iid in enumerate(items)}
                mods = tuple(modalities or self.cfg["modalities"])
                fused = self.fuse_items(pipeline.features(items, mods), mods)
                # one extra column: with the proxy block the user-state
                # slot sits on the first continuation position
                emb, emb_mask = self._injection([ex], [built], fused,
                                                item_row, len(built.ids) + 1)
                mask = emb_mask
            out_ids, logits = self.lm.generate(built.ids, steps=self.spec.target_len,
                                               emb=emb, emb_mask=mask)
        parsed = parse_output(self.vocab, out_ids, self.spec.include_proxy,
                              m=len(ex.candidates))
        return parsed, logits

    # -- bookkeeping -----------------------------------------------------------

    def param_count(self) -> int:
        return sum(t.size for _, t in self.store.items())

    def save_checkpoint(self, path, meta: dict | None = None,
                        extra_arrays: dict | None = None) -> None:
        arrays = dict(self.store.arrays())
        for name, value in (extra_arrays or {}).items():
            if name in arrays:
                raise ValueError(f"extra array shadows a parameter: {name}")
            arrays[name] = value
        header = {"format": CHECKPOINT_FORMAT,
                  "config": self.cfg,
                  "config_hash": config_hash(self.cfg)}
        header.update(meta or {})
        save_container(path, arrays, header)

    @classmethod
    def load_checkpoint(cls, path, expect_config_hash: str | None = None):
        """Rebuild a model from a checkpoint; returns (model, meta, extras)."""
        arrays, meta = load_container(path)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: not a model checkpoint")
        if expect_config_hash is not None and meta["config_hash"] != expect_config_hash:
            raise ConfigError(
                "configuration hash mismatch: checkpoint "
                f"{meta['config_hash'][:12]} vs expected {expect_config_hash[:12]}")
        model = cls(meta["config"])
        own = {n: v for n, v in arrays.items() if n in model.store}
        model.store.load_arrays(own, strict=True)
        extras = {n: v for n, v in arrays.items() if n not in model.store}
        return model, meta, extras

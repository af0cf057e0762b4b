"""Synthetic interaction corpus with planted next-item rules, candidate pools,
splits, and an Amazon-style log ingester.

Synthetic items carry a hidden unit-norm ``latent_attr``; the observable
modalities are derived from it (titles are sampled from attribute-conditioned
token distributions, vision features are a fixed low-rank projection plus
noise), so a model can only solve the planted rules by actually reading the
modalities. Generation is deterministic per (seed, index): every sequence and
every pool owns a derived RNG, so regeneration and parallel generation agree.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RULES = ("latent-match", "positional-color-match")
SPLITS = ("train", "valid", "test")
POSITIONAL_GAMMA = 0.5


class CorpusError(ValueError):
    pass


@dataclass
class Item:
    item_id: int
    title_tokens: list[int]
    vision_feature: np.ndarray
    latent_attr: np.ndarray | None = None  # hidden; generator/oracle only
    source_key: str | None = None          # original id for ingested data


@dataclass
class SequenceExample:
    user_id: str
    items: list[int]      # interaction history, oldest first
    next_item: int        # prediction target
    split: str = ""

    def distinct_items(self) -> int:
        return len(set(self.items))


@dataclass
class CandidatePool:
    seq_index: int
    candidates: list[int]
    positive_index: int

    def validate(self, positive: int):
        if len(set(self.candidates)) != len(self.candidates):
            raise CorpusError(f"pool {self.seq_index}: duplicate candidates")
        if self.candidates[self.positive_index] != positive:
            raise CorpusError(f"pool {self.seq_index}: positive misplaced")


class Catalog:
    """Indexable item collection; ids are contiguous 0..len-1."""

    def __init__(self, items: list[Item]):
        for k, it in enumerate(items):
            if it.item_id != k:
                raise CorpusError(f"catalog ids must be contiguous, got {it.item_id} at {k}")
        self.items = items

    def __len__(self):
        return len(self.items)

    def __getitem__(self, item_id: int) -> Item:
        return self.items[item_id]

    def latent_matrix(self) -> np.ndarray:
        if any(it.latent_attr is None for it in self.items):
            raise CorpusError("catalog has no latent attributes (ingested data?)")
        return np.stack([it.latent_attr for it in self.items])

    def vision_matrix(self) -> np.ndarray:
        return np.stack([it.vision_feature for it in self.items])


@dataclass
class Dataset:
    catalog: Catalog
    sequences: list[SequenceExample]
    pools: list[CandidatePool]
    manifest: dict = field(default_factory=dict)

    def indices(self, split: str) -> list[int]:
        if split not in SPLITS:
            raise CorpusError(f"unknown split {split!r}")
        return [i for i, s in enumerate(self.sequences) if s.split == split]


def dataset_hash(dataset: "Dataset") -> str:
    """sha256 of the canonical manifest; identifies the dataset in artifacts."""
    blob = json.dumps(dataset.manifest, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# -- generation ----------------------------------------------------------


def generate_catalog(
    num_items: int,
    seed: int,
    d_latent: int = 8,
    d_vision: int = 16,
    title_len: int = 20,
    title_vocab: int = 60,
    vision_noise: float = 0.1,
    title_temp: float = 3.0,
) -> Catalog:
    """Items with correlated modalities driven by a hidden latent attribute."""
    rng = np.random.default_rng([seed, 11])
    latents = rng.normal(size=(num_items, d_latent))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    proj = rng.normal(size=(d_vision, d_latent)) / np.sqrt(d_latent)
    token_dirs = rng.normal(size=(title_vocab, d_latent))
    token_dirs /= np.linalg.norm(token_dirs, axis=1, keepdims=True)
    items = []
    for i in range(num_items):
        z = latents[i]
        vision = proj @ z + vision_noise * rng.normal(size=d_vision)
        logits = title_temp * (token_dirs @ z)
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        title = rng.choice(title_vocab, size=title_len, replace=True, p=probs)
        items.append(Item(i, [int(t) for t in title], vision, z))
    return Catalog(items)


def latent_match_next(catalog_latents: np.ndarray, seq_items: list[int]) -> int:
    """Planted rule: next = argmax cosine(catalog, mean latent of last 3 items),
    taken over items not already in the sequence."""
    query = catalog_latents[seq_items[-3:]].mean(axis=0)
    return _argmax_cosine_excluding(catalog_latents, query, seq_items)


def positional_match_next(
    catalog_latents: np.ndarray, seq_items: list[int], gamma: float = POSITIONAL_GAMMA
) -> int:
    """Order-sensitive planted rule: recency-weighted latent query.

    The query weights decay geometrically from the newest item backwards, so
    reversing the history changes the query (and usually the answer).
    """
    n = len(seq_items)
    weights = gamma ** np.arange(n - 1, -1, -1, dtype=np.float64)
    weights /= weights.sum()
    query = weights @ catalog_latents[seq_items]
    return _argmax_cosine_excluding(catalog_latents, query, seq_items)


def _argmax_cosine_excluding(latents: np.ndarray, query: np.ndarray, exclude) -> int:
    qn = np.linalg.norm(query)
    if qn == 0:
        raise CorpusError("degenerate zero query in planted rule")
    scores = latents @ (query / qn)  # catalog latents are unit norm
    scores[list(exclude)] = -np.inf
    return int(np.argmax(scores))


def next_item_for(rule: str, catalog_latents: np.ndarray, seq_items: list[int]) -> int:
    if rule == "latent-match":
        return latent_match_next(catalog_latents, seq_items)
    if rule == "positional-color-match":
        return positional_match_next(catalog_latents, seq_items)
    raise CorpusError(f"unknown rule {rule!r}; expected one of {RULES}")


def generate_sequences(
    catalog: Catalog,
    num_sequences: int,
    rule: str,
    seed: int,
    n_range: tuple[int, int] = (9, 15),
) -> list[SequenceExample]:
    """Sequences of distinct items whose target follows the planted rule."""
    n_min, n_max = n_range
    if n_min < 9:
        raise CorpusError(f"minimum history length is 9, got n_range={n_range}")
    if n_max < n_min:
        raise CorpusError(f"bad n_range {n_range}")
    if n_max + 1 >= len(catalog):
        raise CorpusError("catalog too small for requested history length")
    latents = catalog.latent_matrix()
    out = []
    for i in range(num_sequences):
        rng = np.random.default_rng([seed, 7919, i])
        n = int(rng.integers(n_min, n_max + 1))
        items = [int(x) for x in rng.choice(len(catalog), size=n, replace=False)]
        nxt = next_item_for(rule, latents, items)
        out.append(SequenceExample(user_id=f"u{i}", items=items, next_item=nxt))
    return out


def assign_splits(
    sequences: list[SequenceExample], seed: int, ratios=(0.7, 0.2, 0.1)
) -> None:
    """Disjoint, exhaustive sequence-level split in the given proportions."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"split ratios must sum to 1, got {ratios}")
    order = np.random.default_rng([seed, 23]).permutation(len(sequences))
    n_train = round(ratios[0] * len(sequences))
    n_valid = round(ratios[1] * len(sequences))
    for rank, idx in enumerate(order):
        if rank < n_train:
            sequences[idx].split = "train"
        elif rank < n_train + n_valid:
            sequences[idx].split = "valid"
        else:
            sequences[idx].split = "test"


def sample_candidate_pool(
    catalog_size: int,
    seq: SequenceExample,
    seq_index: int,
    seed: int,
    m: int = 5,
) -> CandidatePool:
    """m candidates: the positive plus m-1 non-interacted negatives.

    The positive slot is uniform. The RNG is derived from
    (seed, sequence index, split), so pools are fixed per dataset build.
    """
    rng = np.random.default_rng([seed, 104729, seq_index, SPLITS.index(seq.split) if seq.split else 3])
    banned = set(seq.items) | {seq.next_item}
    allowed = np.array([i for i in range(catalog_size) if i not in banned])
    if len(allowed) < m - 1:
        raise CorpusError(f"catalog too small for {m - 1} negatives")
    negatives = [int(x) for x in rng.choice(allowed, size=m - 1, replace=False)]
    pos = int(rng.integers(0, m))
    candidates = negatives[:pos] + [seq.next_item] + negatives[pos:]
    pool = CandidatePool(seq_index=seq_index, candidates=candidates, positive_index=pos)
    pool.validate(seq.next_item)
    return pool


def build_synthetic_dataset(
    num_items: int,
    num_sequences: int,
    rule: str,
    seed: int,
    m: int = 5,
    n_range: tuple[int, int] = (9, 15),
    ratios=(0.7, 0.2, 0.1),
    **catalog_kw,
) -> Dataset:
    catalog = generate_catalog(num_items, seed, **catalog_kw)
    sequences = generate_sequences(catalog, num_sequences, rule, seed, n_range)
    assign_splits(sequences, seed, ratios)
    pools = [
        sample_candidate_pool(len(catalog), s, i, seed, m)
        for i, s in enumerate(sequences)
    ]
    manifest = {
        "kind": "synthetic",
        "rule": rule,
        "seed": seed,
        "num_items": num_items,
        "num_sequences": num_sequences,
        "m": m,
        "n_range": list(n_range),
        "ratios": list(ratios),
        "d_latent": catalog_kw.get("d_latent", 8),
        "d_vision": catalog_kw.get("d_vision", 16),
        "title_len": catalog_kw.get("title_len", 20),
        "title_vocab": catalog_kw.get("title_vocab", 60),
        "split_counts": {s: sum(1 for q in sequences if q.split == s) for s in SPLITS},
    }
    return Dataset(catalog, sequences, pools, manifest)


# -- ingestion -----------------------------------------------------------


@dataclass
class IngestReport:
    lines_total: int = 0
    malformed: list = field(default_factory=list)  # (line_no, reason)
    items_dropped_payload: int = 0
    items_dropped_rare: int = 0
    events_dropped: int = 0
    sessions_dropped_short: int = 0
    sessions_dropped_degenerate: int = 0
    sequences_emitted: int = 0

    def summary(self) -> dict:
        d = self.__dict__.copy()
        d["malformed"] = len(self.malformed)
        return d


def ingest_amazon(
    path,
    seed: int = 0,
    m: int = 5,
    min_item_interactions: int = 8,
    min_session_len: int = 9,
    session_gap: float = 86_400.0,
    title_vocab: int = 2000,
    ratios=(0.7, 0.2, 0.1),
) -> tuple[Dataset, IngestReport]:
    """Parse a tab-separated interaction log into a Dataset.

    Expected columns: user id, item key, unix timestamp, title text,
    comma-separated image feature (may be empty). Items lacking usable text
    or image are dropped with all their events; items with fewer than
    ``min_item_interactions`` events are dropped; per-user event streams are
    cut into sessions at gaps larger than ``session_gap`` seconds; sessions
    shorter than ``min_session_len`` are dropped. Each surviving session
    yields a history (all but the last event) and the last item as target.
    """
    report = IngestReport()
    events = []  # (user, item_key, ts, line_no)
    meta: dict[str, tuple[str, np.ndarray | None]] = {}
    vision_dim = None
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            report.lines_total += 1
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                report.malformed.append((line_no, f"expected 5 tab-separated fields, got {len(parts)}"))
                continue
            user, item_key, ts_str, title, vision_str = parts
            try:
                ts = float(ts_str)
            except ValueError:
                report.malformed.append((line_no, f"bad timestamp {ts_str!r}"))
                continue
            vision = None
            if vision_str.strip():
                try:
                    vision = np.array([float(x) for x in vision_str.split(",")])
                except ValueError:
                    report.malformed.append((line_no, "unparseable image feature"))
                    continue
                if vision_dim is None:
                    vision_dim = vision.size
                elif vision.size != vision_dim:
                    report.malformed.append(
                        (line_no, f"image feature dim {vision.size} != {vision_dim}")
                    )
                    continue
            if item_key not in meta:
                meta[item_key] = (title.strip(), vision)
            else:
                old_title, old_vision = meta[item_key]
                meta[item_key] = (old_title or title.strip(), old_vision if old_vision is not None else vision)
            events.append((user, item_key, ts, line_no))
    if not events:
        raise CorpusError(f"{path}: no usable events")

    usable = {k for k, (title, vision) in meta.items() if title and vision is not None}
    report.items_dropped_payload = len(meta) - len(usable)
    events = [e for e in events if e[1] in usable]

    counts: dict[str, int] = {}
    for _, item_key, _, _ in events:
        counts[item_key] = counts.get(item_key, 0) + 1
    frequent = {k for k, c in counts.items() if c >= min_item_interactions}
    report.items_dropped_rare = len(usable) - len(frequent)
    kept = [e for e in events if e[1] in frequent]
    report.events_dropped = len(events) - len(kept)
    if not kept:
        raise CorpusError(f"{path}: all events filtered out")

    # Stable item id assignment: order of first appearance in the kept stream.
    key_to_id: dict[str, int] = {}
    for _, item_key, _, _ in kept:
        if item_key not in key_to_id:
            key_to_id[item_key] = len(key_to_id)

    # Title tokenization: frequency-ranked word vocabulary over kept items.
    word_counts: dict[str, int] = {}
    for key in key_to_id:
        for w in meta[key][0].lower().split():
            word_counts[w] = word_counts.get(w, 0) + 1
    ranked = sorted(word_counts, key=lambda w: (-word_counts[w], w))[:title_vocab]
    word_to_tok = {w: i for i, w in enumerate(ranked)}

    items = [None] * len(key_to_id)
    for key, iid in key_to_id.items():
        title, vision = meta[key]
        toks = [word_to_tok[w] for w in title.lower().split() if w in word_to_tok]
        items[iid] = Item(iid, toks, vision, None, source_key=key)
    catalog = Catalog(items)

    # Sessionize per user on the time axis.
    by_user: dict[str, list] = {}
    for user, item_key, ts, line_no in kept:
        by_user.setdefault(user, []).append((ts, line_no, key_to_id[item_key]))
    sequences = []
    for user in sorted(by_user):
        stream = sorted(by_user[user])
        session = [stream[0]]
        sessions = []
        for ev in stream[1:]:
            if ev[0] - session[-1][0] > session_gap:
                sessions.append(session)
                session = [ev]
            else:
                session.append(ev)
        sessions.append(session)
        for k, sess in enumerate(sessions):
            if len(sess) < min_session_len:
                report.sessions_dropped_short += 1
                continue
            ids = [iid for _, _, iid in sess]
            history, target = ids[:-1], ids[-1]
            if len(set(history)) < 3:
                report.sessions_dropped_degenerate += 1
                continue
            sequences.append(
                SequenceExample(user_id=f"{user}/{k}", items=history, next_item=target)
            )
    if not sequences:
        raise CorpusError(f"{path}: no sessions of length >= {min_session_len}")
    report.sequences_emitted = len(sequences)

    assign_splits(sequences, seed, ratios)
    pools = [
        sample_candidate_pool(len(catalog), s, i, seed, m)
        for i, s in enumerate(sequences)
    ]
    manifest = {
        "kind": "ingested",
        "source": str(path),
        "seed": seed,
        "m": m,
        "num_items": len(catalog),
        "num_sequences": len(sequences),
        "min_item_interactions": min_item_interactions,
        "min_session_len": min_session_len,
        "session_gap": session_gap,
        "title_vocab": len(ranked),
        "d_vision": int(vision_dim or 0),
        "ratios": list(ratios),
        "ingest_report": report.summary(),
        "split_counts": {s: sum(1 for q in sequences if q.split == s) for s in SPLITS},
    }
    return Dataset(catalog, sequences, pools, manifest), report


# -- persistence ----------------------------------------------------------


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Write catalog.jsonl / sequences.jsonl / pools.jsonl / manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "catalog.jsonl", "w", encoding="utf-8") as f:
        for it in dataset.catalog.items:
            row = {
                "item_id": it.item_id,
                "title_tokens": it.title_tokens,
                "vision": [float(x) for x in it.vision_feature],
                "latent": None if it.latent_attr is None else [float(x) for x in it.latent_attr],
            }
            if it.source_key is not None:
                row["source_key"] = it.source_key
            f.write(json.dumps(row) + "\n")
    with open(out / "sequences.jsonl", "w", encoding="utf-8") as f:
        for s in dataset.sequences:
            f.write(
                json.dumps(
                    {"user_id": s.user_id, "items": s.items, "next": s.next_item, "split": s.split}
                )
                + "\n"
            )
    with open(out / "pools.jsonl", "w", encoding="utf-8") as f:
        for p in dataset.pools:
            f.write(
                json.dumps(
                    {
                        "seq_index": p.seq_index,
                        "candidates": p.candidates,
                        "positive_index": p.positive_index,
                    }
                )
                + "\n"
            )
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(dataset.manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    if not (d / "manifest.json").exists():
        raise CorpusError(f"{d}: not a dataset directory (missing manifest.json)")
    manifest = json.loads((d / "manifest.json").read_text())
    items = []
    for line in (d / "catalog.jsonl").read_text().splitlines():
        row = json.loads(line)
        items.append(
            Item(
                row["item_id"],
                list(row["title_tokens"]),
                np.array(row["vision"], dtype=np.float64),
                None if row["latent"] is None else np.array(row["latent"], dtype=np.float64),
                source_key=row.get("source_key"),
            )
        )
    sequences = []
    for line in (d / "sequences.jsonl").read_text().splitlines():
        row = json.loads(line)
        sequences.append(
            SequenceExample(row["user_id"], list(row["items"]), row["next"], row["split"])
        )
    pools = []
    for line in (d / "pools.jsonl").read_text().splitlines():
        row = json.loads(line)
        pools.append(CandidatePool(row["seq_index"], list(row["candidates"]), row["positive_index"]))
    return Dataset(Catalog(items), sequences, pools, manifest)

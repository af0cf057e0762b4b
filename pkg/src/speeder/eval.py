"""Evaluation: validity-aware ranking metrics and variant comparison.

Generated completions are parsed, not trusted: an output only counts
toward the hit rate if it parses as a legal answer, and the headline
metric multiplies hit rate by the valid-output ratio so a model cannot
score well by emitting garbage confidently.  By construction
``vhr_at_1 == valid_ratio * hr_at_1`` (both reduce to correct/total).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import config_hash
from .corpus import Dataset, dataset_hash
from .model import FeaturePipeline, SpeederModel, example_from_dataset
from .spae import sample_ppt_instance

__all__ = ["EvalResult", "score", "score_ppt", "proxy_base_rate",
           "reference_row", "compare_variants", "markdown_table"]


@dataclass(frozen=True)
class EvalResult:
    """Counts plus derived ratios for one (model, split) evaluation."""

    name: str
    split: str
    total: int
    valid: int
    correct: int
    degenerate: bool
    config_hash: str
    dataset_hash: str

    @property
    def valid_ratio(self) -> float:
        return self.valid / self.total if self.total else 0.0

    @property
    def hr_at_1(self) -> float:
        return self.correct / self.valid if self.valid else 0.0

    @property
    def vhr_at_1(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def row(self) -> dict:
        return {
            "name": self.name,
            "split": self.split,
            "total": self.total,
            "valid": self.valid,
            "correct": self.correct,
            "valid_ratio": round(self.valid_ratio, 6),
            "hr_at_1": round(self.hr_at_1, 6),
            "vhr_at_1": round(self.vhr_at_1, 6),
            "degenerate": self.degenerate,
            "config_hash": self.config_hash[:12],
        }


def _split_examples(model: SpeederModel, dataset: Dataset, split: str,
                    proxy_seed: int):
    for si in dataset.indices(split):
        rng = np.random.default_rng([proxy_seed, 4242, si])
        yield si, example_from_dataset(dataset, si, rng=rng,
                                       include_proxy=model.spec.include_proxy)


def score(model: SpeederModel, dataset: Dataset, pipeline: FeaturePipeline,
          split: str = "test", name: str = "model",
          modalities=None, proxy_seed: int | None = None) -> EvalResult:
    """Greedy-decode every example in a split and tally the metrics."""
    proxy_seed = int(model.cfg["seed"] if proxy_seed is None else proxy_seed)
    total = valid = correct = 0
    for _, ex in _split_examples(model, dataset, split, proxy_seed):
        parsed, _ = model.generate_example(ex, pipeline, modalities=modalities)
        total += 1
        if parsed.valid:
            valid += 1
            if parsed.slot == ex.answer_slot:
                correct += 1
    return EvalResult(name=name, split=split, total=total, valid=valid,
                      correct=correct, degenerate=(total > 0 and valid == 0),
                      config_hash=config_hash(model.cfg),
                      dataset_hash=dataset_hash(dataset))


def score_ppt(model: SpeederModel, dataset: Dataset, pipeline: FeaturePipeline,
              split: str = "test", name: str = "model-ppt",
              proxy_seed: int | None = None) -> EvalResult:
    """Same decoding pass, scored on the position question instead.

    ``valid`` counts outputs whose first token is a legal yes/no and
    ``correct`` counts matching labels, so ``vhr_at_1`` reads as
    validity-weighted accuracy here.
    """
    if not model.spec.include_proxy:
        raise ValueError("model prompts carry no position question to score")
    proxy_seed = int(model.cfg["seed"] if proxy_seed is None else proxy_seed)
    total = valid = correct = 0
    for _, ex in _split_examples(model, dataset, split, proxy_seed):
        parsed, _ = model.generate_example(ex, pipeline)
        total += 1
        if parsed.proxy_label is not None:
            valid += 1
            if parsed.proxy_label == ex.proxy.label:
                correct += 1
    return EvalResult(name=name, split=split, total=total, valid=valid,
                      correct=correct, degenerate=(total > 0 and valid == 0),
                      config_hash=config_hash(model.cfg),
                      dataset_hash=dataset_hash(dataset))


def proxy_base_rate(dataset: Dataset, split: str, proxy_seed: int) -> float:
    """Accuracy of always answering yes on the sampled position questions.

    Learned proxy accuracy should clear this bar, otherwise the model
    may have collapsed to a constant answer.
    """
    labels = []
    for si in dataset.indices(split):
        rng = np.random.default_rng([proxy_seed, 4242, si])
        labels.append(sample_ppt_instance(dataset.sequences[si].items, rng).label)
    if not labels:
        raise ValueError(f"split {split!r} is empty")
    return sum(1 for l in labels if l == "yes") / len(labels)


def reference_row() -> EvalResult:
    """Published closed-model reference counts for orientation in reports."""
    return EvalResult(name="gpt4-reference", split="reported", total=10000,
                      valid=9068, correct=4217, degenerate=False,
                      config_hash="external", dataset_hash="")


_COLUMNS = ("name", "split", "total", "valid", "correct", "valid_ratio",
            "hr_at_1", "vhr_at_1", "degenerate", "config_hash")


def compare_variants(results: list[EvalResult], csv_path=None) -> list[dict]:
    """Stable-ordered comparison rows; optionally written as CSV.

    All rows evaluated on local data must share one dataset; external
    reference rows (empty dataset hash) are exempt.
    """
    local = {r.dataset_hash for r in results if r.dataset_hash}
    if len(local) > 1:
        raise ValueError(f"results span {len(local)} datasets; refusing to compare")
    rows = [r.row() for r in sorted(results, key=lambda r: (r.name, r.split))]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    return rows


def markdown_table(rows: list[dict]) -> str:
    head = "| " + " | ".join(_COLUMNS) + " |"
    sep = "|" + "|".join("---" for _ in _COLUMNS) + "|"
    body = ["| " + " | ".join(str(r[c]) for c in _COLUMNS) + " |" for r in rows]
    return "\n".join([head, sep] + body) + "\n"

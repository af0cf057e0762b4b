"""Cost benchmarking: closed-form curves and measured step costs.

The closed-form side evaluates the analytic model at the reference
settings (title prompts: 20 slots/item, 20 answer tokens; compressed
prompts: 2 slots/item, 1 answer token).  The measured side runs real
forward/backward steps through the numerics layer's FLOP counter for
both prompt modes over growing history lengths.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import numerics as nm
from .config import config_hash
from .costmodel import (
    CostParams,
    empirical_counters,
    improvement_curve,
    improvement_limits,
    log_grid,
    train_cost,
)
from .model import PromptExample, SpeederModel
from .promptlm import PromptTemplate, PromptSpec, Vocab
from .spae import sample_ppt_instance

__all__ = ["reference_params", "closed_form_rows", "empirical_rows",
           "write_rows_csv", "EMPIRICAL_NS"]

EMPIRICAL_NS = (10, 20, 40, 80)


def reference_params(cfg: dict | None = None) -> tuple[CostParams, CostParams]:
    """(baseline, compressed) cost parameters; overheads from real templates."""
    kw = {}
    if cfg is not None:
        kw = {"d": cfg["d_f"], "L": cfg["lm_layers"], "B": cfg["batch_size"]}
    fast_spec = PromptSpec(mode="fused")
    title_spec = PromptSpec(mode="title")
    fast_t0 = PromptTemplate(Vocab(fast_spec)).fixed_overhead()
    title_t0 = PromptTemplate(Vocab(title_spec)).fixed_overhead()
    baseline = CostParams(avg_token=title_spec.avg_tokens, t0=title_t0,
                          t_out=title_spec.avg_tokens, **kw)
    fast = CostParams(avg_token=fast_spec.avg_tokens, t0=fast_t0, t_out=1, **kw)
    return baseline, fast


def closed_form_rows(cfg: dict | None = None, lo: int = 1, hi: int = 10**6,
                     points: int = 200) -> tuple[list[dict], tuple[float, float]]:
    baseline, fast = reference_params(cfg)
    grid = log_grid(lo, hi, points)
    rows = improvement_curve(baseline, fast, grid)
    for row in rows:
        n = row["n"]
        row["train_cost_baseline"] = train_cost(baseline.with_n(n))
        row["train_cost_fast"] = train_cost(fast.with_n(n))
    return rows, improvement_limits(baseline, fast)


class _SyntheticPipeline:
    """Duck-typed feature source with deterministic random item features."""

    def __init__(self, cfg: dict, seed: int = 0):
        self.dims = {"text": cfg["d_text"], "vision": cfg["d_vision_out"],
                     "seq": cfg["d_seq"]}
        self.seed = seed

    def features(self, item_ids, modalities):
        out = {}
        for mod in modalities:
            salt = zlib.crc32(mod.encode())
            rows = [np.random.default_rng([self.seed, salt, iid])
                    .normal(size=self.dims[mod]) for iid in item_ids]
            out[mod] = np.stack(rows)
        return out

    def titles(self, item_ids):
        return {iid: " ".join(f"w{(iid + j) % 97}" for j in range(19))
                for iid in item_ids}


def _bench_example(n: int, m: int, rng) -> PromptExample:
    history = list(range(n))
    candidates = list(range(n, n + m))
    return PromptExample(history=history, candidates=candidates,
                         answer_slot=1, proxy=sample_ppt_instance(history, rng))


def empirical_rows(cfg: dict, ns=EMPIRICAL_NS, m: int = 5,
                   repeats: int = 1, batch: int = 1) -> list[dict]:
    """Measured forward+backward cost of one step per (mode, n).

    Each (mode, n) point gets its own model whose context window fits the
    prompt; larger contexts only grow the position table, keeping the
    comparison about prompt length.
    """
    rows = []
    for mode in ("fused", "title"):
        spec = PromptSpec(mode=mode, n_max=max(ns) + 1, m_max=m)
        per_item = spec.avg_tokens
        for n in ns:
            need = per_item * (int(n) + m) + 120
            mode_cfg = dict(cfg, prompt_mode=mode, n_max=max(ns) + 1,
                            lm_context=need)
            model = SpeederModel(mode_cfg)
            model.store.set_trainable(["*"])
            pipeline = _SyntheticPipeline(mode_cfg)
            rng = np.random.default_rng([7, n])
            examples = [_bench_example(int(n), m, rng) for _ in range(batch)]

            def step():
                loss = model.batch_loss(examples, pipeline)
                nm.backward(loss, model.store)

            measured = empirical_counters(step, repeats=repeats)
            baseline, fast = reference_params(mode_cfg)
            params = (baseline if mode == "title" else fast).with_n(int(n))
            rows.append({
                "mode": mode,
                "n": int(n),
                "N": model.template.prompt_length(int(n), m),
                "flop_proxy": measured["flop_proxy"],
                "wall_seconds": round(measured["wall_seconds"], 6),
                "closed_form_step": train_cost(replace(params, T=1, B=batch)),
            })
    return rows


def write_rows_csv(rows: list[dict], path, cfg: dict | None = None) -> str:
    """Delimited output with a leading provenance comment line."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if cfg is not None:
            fh.write(f"# config_hash={config_hash(cfg)}\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return str(path)

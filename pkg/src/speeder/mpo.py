"""Modality-progressive staged training.

Training proceeds in stages, one per modality joining the fused stack in
canonical order (text anchors first, vision joins, sequence joins last).
Each stage unfreezes a cumulative set of parameter-name patterns; the
backbone's base weights never appear in any pattern, so they stay frozen
through the whole run.  One learning-rate schedule spans all stages.

Every epoch derives its shuffling and proxy-sampling RNGs from
(seed, stage, epoch) alone, so a run resumed from a stage checkpoint
replays the exact trajectory of an uninterrupted run.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .config import config_hash
from .corpus import Dataset, dataset_hash
from .model import FeaturePipeline, SpeederModel, example_from_dataset
from .numerics import Adam, LrSchedule, TrainingDiverged, load_container

__all__ = ["StagePlan", "ALWAYS_TRAINABLE", "build_stage_plan",
           "TrainingSummary", "run_training"]

# Trainable in every stage: the pieces that glue prompts to the frozen
# backbone (embeddings, head, norms, adapter pairs) plus position prompts.
ALWAYS_TRAINABLE = (
    "lm.tok_emb",
    "lm.pos_emb",
    "lm.head",
    "lm.ln_f.*",
    "lm.layer*.ln1.*",
    "lm.layer*.ln2.*",
    "lm.layer*.attn.lora.*",
    "spae.ppl",
    "spae.state.*",
)

# Patterns a modality brings with it when its stage begins.  The shared
# fusion attention and mixing machinery joins with the second modality.
_STAGE_EXTRAS = {
    "text": (
        "mome.layer*.expert.textual.*",
        "adapters.text.*",
        "adapters.fusion.*",
    ),
    "vision": (
        "mome.layer*.mhsa.*",
        "mome.layer*.ln1.*",
        "mome.layer*.ln2.*",
        "mome.layer*.expert.multimodal.*",
        "mome.layer*.expert.visual.*",
        "adapters.vision.*",
        "gates.vision.*",
    ),
    "seq": (
        "mome.layer*.expert.sequential.*",
        "adapters.seq.*",
        "gates.seq.*",
    ),
}


@dataclass(frozen=True)
class StagePlan:
    name: str
    modalities: tuple[str, ...]
    patterns: tuple[str, ...]
    epochs: int


def _stage_epochs(cfg: dict, n_stages: int) -> list[int]:
    entries = [int(e) for e in cfg["stage_epochs"]]
    if len(entries) < n_stages:
        raise ValueError(
            f"stage_epochs has {len(entries)} entries for {n_stages} stages")
    folded = entries[: n_stages - 1] + [sum(entries[n_stages - 1:])]
    return folded


def build_stage_plan(cfg: dict) -> list[StagePlan]:
    """Cumulative stage plans after applying the configured variant."""
    order = [m for m in ("text", "vision", "seq") if m in cfg["modalities"]]
    if not order or order[0] != "text":
        raise ValueError("the modality set must include text")
    plans: list[StagePlan] = []
    patterns: list[str] = list(ALWAYS_TRAINABLE)
    for k, mod in enumerate(order):
        patterns = patterns + list(_STAGE_EXTRAS[mod])
        plans.append(StagePlan(name=f"s{k + 1}",
                               modalities=tuple(order[: k + 1]),
                               patterns=tuple(patterns),
                               epochs=0))
    merge = {"wo_mpo_s1": 2, "wo_mpo_s1s2": 3}.get(cfg["variant"], 1)
    merge = min(merge, len(plans))
    if merge > 1:
        plans = [plans[merge - 1]] + plans[merge:]
    epochs = _stage_epochs(cfg, len(order))
    if merge > 1:
        epochs = [sum(epochs[:merge])] + epochs[merge:]
    out = []
    for k, (plan, e) in enumerate(zip(plans, epochs)):
        out.append(StagePlan(name=f"s{k + 1}", modalities=plan.modalities,
                             patterns=plan.patterns, epochs=e))
    return out


@dataclass
class TrainingSummary:
    steps: int
    stage_names: list[str]
    first_loss: float
    last_loss: float
    checkpoints: list[str]
    log_path: str
    resumed_from: int | None = None


def _batches(indices: np.ndarray, batch_size: int):
    for lo in range(0, len(indices), batch_size):
        yield indices[lo : lo + batch_size]


def run_training(model: SpeederModel, dataset: Dataset,
                 pipeline: FeaturePipeline, out_dir,
                 resume: bool = False,
                 max_stages: int | None = None) -> TrainingSummary:
    """Train through the staged plan, checkpointing at stage boundaries.

    ``resume=True`` picks up after the newest stage checkpoint in
    ``out_dir``.  ``max_stages`` stops early after that many stages
    (useful for producing a partial run to resume from).
    """
    cfg = model.cfg
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plans = build_stage_plan(cfg)
    train_idx = np.asarray(dataset.indices("train"), dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("dataset has no training split")
    batch = int(cfg["batch_size"])
    steps_per_epoch = math.ceil(train_idx.size / batch)
    total_steps = sum(p.epochs for p in plans) * steps_per_epoch
    schedule = LrSchedule(max_lr=cfg["max_lr"], total_steps=total_steps,
                          warmup_frac=cfg["warmup_frac"],
                          min_lr_factor=cfg["min_lr_factor"])
    optimizer = Adam(schedule)
    ds_hash = dataset_hash(dataset)
    cfg_hash = config_hash(cfg)
    seed = int(cfg["seed"])
    log_path = out / "train_log.jsonl"

    start_stage = 0
    if resume:
        for k in reversed(range(len(plans))):
            ckpt = out / f"{plans[k].name}.ckpt"
            if ckpt.exists():
                arrays, meta = load_container(ckpt)
                if meta.get("config_hash") != cfg_hash:
                    raise ValueError(f"{ckpt}: configuration hash mismatch")
                if meta.get("dataset_hash") != ds_hash:
                    raise ValueError(f"{ckpt}: dataset hash mismatch")
                own = {n: v for n, v in arrays.items() if n in model.store}
                model.store.load_arrays(own, strict=True)
                optimizer.load_state_arrays(
                    {n: v for n, v in arrays.items() if n.startswith("optim.")},
                    step_count=int(meta["step_count"]))
                start_stage = k + 1
                break

    def save_stage(plan: StagePlan) -> str:
        path = out / f"{plan.name}.ckpt"
        extras = dict(pipeline.suite.to_arrays())
        extras.update(optimizer.state_arrays())
        model.save_checkpoint(path,
                              meta={"stage": plan.name,
                                    "modalities": list(plan.modalities),
                                    "step_count": optimizer.step_count,
                                    "dataset_hash": ds_hash},
                              extra_arrays=extras)
        return str(path)

    first_loss = math.nan
    last_loss = math.nan
    checkpoints: list[str] = []
    stop = len(plans) if max_stages is None else min(max_stages, len(plans))
    with open(log_path, "a") as log:
        for k in range(start_stage, stop):
            plan = plans[k]
            model.store.set_trainable(plan.patterns)
            for epoch in range(plan.epochs):
                perm = np.random.default_rng([seed, 555, k, epoch]).permutation(train_idx)
                for chunk in _batches(perm, batch):
                    examples = []
                    for si in chunk:
                        prng = np.random.default_rng([seed, 1234, k, epoch, int(si)])
                        examples.append(example_from_dataset(
                            dataset, int(si), rng=prng,
                            include_proxy=cfg["include_proxy"]))
                    loss = model.batch_loss(examples, pipeline,
                                            modalities=plan.modalities)
                    value = loss.item()
                    if math.isnan(first_loss):
                        first_loss = value
                    last_loss = value
                    grads = nm.backward(loss, model.store)
                    try:
                        lr = optimizer.step(model.store, grads)
                    except TrainingDiverged:
                        log.write(json.dumps({
                            "event": "diverged", "stage": plan.name,
                            "epoch": epoch, "step": optimizer.step_count,
                            "loss": value, "config_hash": cfg_hash}) + "\n")
                        raise
                    log.write(json.dumps({
                        "step": optimizer.step_count, "stage": plan.name,
                        "epoch": epoch, "loss": round(value, 6),
                        "lr": lr, "config_hash": cfg_hash,
                        "time": time.time()}) + "\n")
            checkpoints.append(save_stage(plan))
    if stop == len(plans) and checkpoints:
        final = out / "final.ckpt"
        final.write_bytes(Path(checkpoints[-1]).read_bytes())
        checkpoints.append(str(final))
    return TrainingSummary(steps=optimizer.step_count,
                           stage_names=[p.name for p in plans[start_stage:stop]],
                           first_loss=first_loss, last_loss=last_loss,
                           checkpoints=checkpoints, log_path=str(log_path),
                           resumed_from=start_stage if resume else None)

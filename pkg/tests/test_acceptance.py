"""Acceptance gate: one test per headline requirement.

Each test prints a single ``[ACCEPT] <name>: PASS`` line with its measured
numbers (visible under ``pytest -s`` and in captured output).  The
training-dependent checks share one desk-scale run through session
fixtures, so this file takes tens of minutes on a laptop core; everything
else finishes in seconds.
"""

import fnmatch
import itertools
import time
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest

from speeder import numerics as nm
from speeder.bench import empirical_rows, reference_params
from speeder.config import apply_variant, load_config
from speeder.corpus import build_synthetic_dataset
from speeder.costmodel import (
    improvement_limits,
    infer_improvement,
    log_grid,
    train_cost,
    train_cost_poly,
    train_improvement,
)
from speeder.encoders import build_encoder_suite
from speeder.eval import EvalResult, reference_row, score, score_ppt
from speeder.model import FeaturePipeline, SpeederModel, example_from_dataset
from speeder.mome import MoMEBlock
from speeder.mpo import build_stage_plan, run_training
from speeder.numerics import ParamStore, Tensor, load_container
from speeder.promptlm import ModalityGate, PromptSpec, PromptTemplate, TinyLM, Vocab
from speeder.spae import PositionPromptTable, ppt_label

# training setup for the learning-based checks; the task scale itself
# (d=64, catalog 500, 2000 sequences, m=5) comes from the defaults
TRAIN_OVERRIDES = {"lora_rank": 32, "stage_epochs": [8, 8, 24]}
ABLATION_SCALE = {"rule": "positional-color-match", "lora_rank": 32,
                  "catalog_size": 200, "num_sequences": 1000,
                  "stage_epochs": [4, 4, 12]}
ABLATION_SEEDS = (0, 1, 2)


def _line(name, detail=""):
    print(f"\n[ACCEPT] {name}: PASS {detail}".rstrip())


def _train_once(cfg, out_dir):
    data = build_synthetic_dataset(cfg["catalog_size"], cfg["num_sequences"],
                                   cfg["rule"], cfg["seed"],
                                   m=cfg["pool_negatives"] + 1,
                                   n_range=tuple(cfg["n_range"]))
    suite = build_encoder_suite(data, cfg, cfg["seed"])
    pipeline = FeaturePipeline(data.catalog, suite)
    model = SpeederModel(cfg)
    summary = run_training(model, data, pipeline, out_dir)
    return SimpleNamespace(cfg=cfg, data=data, pipeline=pipeline,
                           model=model, out=out_dir, summary=summary)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One full staged run at the default desk scale; shared by the
    learning, proxy, freeze, and gate checks."""
    cfg = load_config(None, dict(TRAIN_OVERRIDES))
    t0 = time.time()
    run = _train_once(cfg, tmp_path_factory.mktemp("desk"))
    run.elapsed = time.time() - t0
    return run


# -- closed-form cost analysis ------------------------------------------------


def test_improvement_limits_and_monotonicity():
    t0 = time.time()
    baseline, fast = reference_params()
    train_lim, infer_lim = improvement_limits(baseline, fast)
    assert train_lim == 99.0 and infer_lim == 199.0
    at = train_improvement(baseline, fast, 10**8)
    ai = infer_improvement(baseline, fast, 10**8)
    assert abs(at - 99.0) / 99.0 < 0.01
    assert abs(ai - 199.0) / 199.0 < 0.01
    grid = log_grid(1, 10**8, 1000)
    trains = [train_improvement(baseline, fast, n) for n in grid]
    infers = [infer_improvement(baseline, fast, n) for n in grid]
    assert all(b > a for a, b in zip(trains, trains[1:]))
    assert all(b > a for a, b in zip(infers, infers[1:]))
    assert all(v < 99.0 for v in trains) and all(v < 199.0 for v in infers)
    elapsed = time.time() - t0
    assert elapsed < 1.0
    _line("improvement limits",
          f"(train {at:.3f}/99, infer {ai:.3f}/199, monotone on "
          f"{len(grid)} grid points, {elapsed:.2f}s)")


def test_training_cost_polynomial_identity():
    t0 = time.time()
    rng = np.random.default_rng(7)
    baseline, _ = reference_params()
    checked = 0
    for _ in range(1000):
        p = baseline.__class__(
            n=int(rng.integers(1, 10**6)), m=int(rng.integers(1, 100)),
            avg_token=int(rng.integers(1, 40)), t0=int(rng.integers(0, 300)),
            d=int(rng.integers(1, 512)), L=int(rng.integers(1, 12)),
            B=int(rng.integers(1, 512)), T=int(rng.integers(1, 10**4)))
        assert train_cost(p) == train_cost_poly(p)
        checked += 1
    elapsed = time.time() - t0
    assert elapsed < 1.0
    _line("training cost polynomial identity",
          f"({checked} integer draws, exact, {elapsed:.2f}s)")


def test_prompt_slot_count_matches_formula():
    t0 = time.time()
    rng = np.random.default_rng(3)
    checked = 0
    for mode in ("fused", "title"):
        spec = PromptSpec(mode=mode, n_max=60, m_max=40)
        template = PromptTemplate(Vocab(spec))
        per_item = spec.avg_tokens
        overhead = template.fixed_overhead()
        for _ in range(50):
            n = int(rng.integers(3, 60))
            m = int(rng.integers(2, 40))
            history = [int(x) for x in rng.choice(10**6, size=n, replace=False)]
            cands = [int(x) for x in rng.choice(10**6, size=m, replace=False)]
            proxy = SimpleNamespace(item_ids=tuple(history[:3]),
                                    positions=(0, 1, 2), label="yes")
            titles = None
            if mode == "title":
                titles = {i: "alpha beta gamma" for i in history + cands}
            built = template.build(history, cands, proxy=proxy, titles=titles)
            assert len(built.ids) == per_item * (n + m) + overhead
            checked += 1
    elapsed = time.time() - t0
    assert elapsed < 1.0
    _line("prompt slot count",
          f"({checked} prompts x 2 modes, exact affine identity, {elapsed:.2f}s)")


def test_empirical_scaling_direction():
    t0 = time.time()
    cfg = load_config(None, {"d_f": 32, "lm_heads": 2, "mome_heads": 2})
    ns = (10, 20, 40, 80)
    rows = empirical_rows(cfg, ns=ns, repeats=2)
    by_mode = {m: sorted((r for r in rows if r["mode"] == m), key=lambda r: r["n"])
               for m in ("fused", "title")}
    for mode, mrows in by_mode.items():
        flops = [r["flop_proxy"] for r in mrows]
        assert all(b > a for a, b in zip(flops, flops[1:])), mode
    ratios = [t["flop_proxy"] / f["flop_proxy"]
              for f, t in zip(by_mode["fused"], by_mode["title"])]
    assert all(b > a for a, b in zip(ratios, ratios[1:]))
    walls = {m: [r["wall_seconds"] for r in by_mode[m]] for m in by_mode}
    wall_growth = {m: walls[m][-1] / walls[m][0] for m in walls}
    assert wall_growth["title"] > wall_growth["fused"]
    assert all(b > a for a, b in zip(walls["title"], walls["title"][1:]))
    elapsed = time.time() - t0
    assert elapsed < 300.0
    _line("empirical scaling direction",
          f"(flop ratio {ratios[0]:.1f}->{ratios[-1]:.1f} over n={ns}, "
          f"wall growth {wall_growth['title']:.1f}x vs "
          f"{wall_growth['fused']:.1f}x, {elapsed:.0f}s)")


# -- position proxy labeling ---------------------------------------------------


def _distance_oracle(a, b):
    steps = 0
    lo, hi = min(a, b), max(a, b)
    while lo < hi:
        lo += 1
        steps += 1
    return steps


def test_position_label_matches_bruteforce():
    t0 = time.time()
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(1000):
        n = int(rng.integers(9, 16))
        for sub in itertools.combinations(range(n), 3):
            for trio in (sub, sub[::-1]):
                mid_near_start = (_distance_oracle(trio[0], trio[1])
                                  <= _distance_oracle(trio[1], trio[2]))
                expect = "yes" if mid_near_start else "no"
                assert ppt_label(trio) == expect, trio
                checked += 1
    elapsed = time.time() - t0
    assert elapsed < 10.0
    _line("position label brute force",
          f"({checked} ordered triples, 100% agreement, {elapsed:.1f}s)")


# -- gradient correctness ------------------------------------------------------


def _fd_max_rel_err(store, loss_fn, names, rng, h=1e-5, coords=5):
    """Central finite differences against tape gradients on sampled coords."""
    for _, t in store.items():
        t.zero_grad()
    loss_fn().backward()
    grads = {n: (store[n].grad.copy() if store[n].grad is not None
                 else np.zeros_like(store[n].data)) for n in names}
    worst = 0.0
    checked = 0
    for name in names:
        p = store[name]
        flat = p.data.reshape(-1)
        k = min(coords, flat.size)
        for idx in rng.choice(flat.size, size=k, replace=False):
            keep = flat[idx]
            flat[idx] = keep + h
            f_plus = loss_fn().item()
            flat[idx] = keep - h
            f_minus = loss_fn().item()
            flat[idx] = keep
            fd = (f_plus - f_minus) / (2.0 * h)
            g = grads[name].reshape(-1)[idx]
            err = abs(g - fd) / max(1e-8, abs(g) + abs(fd))
            worst = max(worst, err)
            checked += 1
    return worst, checked


def test_gradient_finite_difference_checks():
    t0 = time.time()
    rng = np.random.default_rng(5)
    results = {}

    store = ParamStore()
    block = MoMEBlock(store, d_f=6, heads=2, l1=1, l2=1, rng=rng, d_ffn=8)
    x = Tensor(rng.normal(size=(2, 3, 6)), requires_grad=True)
    w = rng.normal(size=(2, 3, 6))
    tags = ("text", "vision", "seq")

    def mome_loss():
        return nm.sum_(nm.mul(block.forward(x, tags), Tensor(w)))

    names = [n for n in store.names() if n.startswith("mome.")]
    results["compression block"] = _fd_max_rel_err(store, mome_loss, names, rng)

    store = ParamStore()
    gate = ModalityGate(store, "vision", 5, "tanh")
    for n in ("gates.vision.w", "gates.vision.b"):
        store[n].data[...] = rng.normal(size=store[n].shape) * 0.3
    gx = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    gw = rng.normal(size=(4, 5))

    def gate_loss():
        return nm.sum_(nm.mul(gate(gx), Tensor(gw)))

    results["tanh gate"] = _fd_max_rel_err(
        store, gate_loss, ["gates.vision.w", "gates.vision.b"], rng)

    store = ParamStore()
    table = PositionPromptTable(store, n_max=9, d=5)
    store["spae.ppl"].data[...] = rng.normal(size=(9, 5)) * 0.1
    hist = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    pw = rng.normal(size=(6, 5))

    def ppl_loss():
        return nm.sum_(nm.mul(table.compose(hist), Tensor(pw)))

    results["position prompts"] = _fd_max_rel_err(store, ppl_loss, ["spae.ppl"], rng)

    store = ParamStore()
    lm = TinyLM(store, vocab_size=23, d=8, n_layers=1, n_heads=2,
                context=12, lora_rank=2, rng=np.random.default_rng(2))
    lora_names = [n for n in store.names() if ".lora." in n]
    for n in lora_names:
        store[n].data[...] = np.random.default_rng(4).normal(size=store[n].shape) * 0.2
    ids = np.random.default_rng(6).integers(0, 23, size=(2, 9))
    mask = np.ones((2, 9))

    def lora_loss():
        return lm.loss(ids, mask)

    results["low-rank adapters"] = _fd_max_rel_err(store, lora_loss, lora_names, rng)

    worst = max(err for err, _ in results.values())
    total = sum(cnt for _, cnt in results.values())
    for part, (err, _) in results.items():
        assert err < 1e-4, f"{part}: relative error {err:.2e}"
    elapsed = time.time() - t0
    assert elapsed < 120.0
    _line("finite difference gradients",
          f"({total} coordinates over 4 paths, worst rel err {worst:.1e}, "
          f"{elapsed:.0f}s)")


def test_routing_exclusivity():
    t0 = time.time()
    rng = np.random.default_rng(9)
    store = ParamStore()
    block = MoMEBlock(store, d_f=6, heads=2, l1=2, l2=1, rng=rng, d_ffn=8)
    unimodal = [n for n in store.names() if ".expert." in n
                and ".expert.multimodal" not in n]
    assert unimodal and all(
        int(n.split("layer")[1].split(".")[0]) < 2 for n in unimodal)
    multimodal = [n for n in store.names() if ".expert.multimodal" in n]
    assert multimodal and all(
        int(n.split("layer")[1].split(".")[0]) >= 2 for n in multimodal)

    for i in range(3):
        store[f"mome.layer{i}.mhsa.w_o"].data[...] = 0.0
    x = Tensor(rng.normal(size=(3, 3, 6)), requires_grad=True)
    out = block.forward(x, ("text", "vision", "seq"))
    loss = nm.sum_(nm.index(out, (slice(None), slice(0, 1), slice(None))))
    grads = nm.backward(loss, store)
    off_route = [n for n in unimodal
                 if (".visual." in n or ".sequential." in n)]
    assert off_route
    for name in off_route:
        g = grads.get(name)
        assert g is None or not np.any(g), name
    on_route = [n for n in unimodal if ".textual." in n and n.endswith("w1")]
    assert any(np.any(grads.get(n, 0)) for n in on_route)
    elapsed = time.time() - t0
    assert elapsed < 10.0
    _line("routing exclusivity",
          f"({len(off_route)} off-route tensors exactly zero, experts "
          f"partitioned by depth, {elapsed:.1f}s)")


# -- training-dependent checks ------------------------------------------------


def test_stage_freeze_bit_exactness(desk_run):
    plans = build_stage_plan(desk_run.cfg)
    init = SpeederModel(desk_run.cfg)
    before = {n: t.data.copy() for n, t in init.store.items()}
    param_names = set(before)
    checked = 0
    for plan in plans:
        arrays, _ = load_container(desk_run.out / f"{plan.name}.ckpt")
        after = {n: v for n, v in arrays.items() if n in param_names}
        frozen = [n for n in param_names
                  if not any(fnmatch.fnmatchcase(n, p) for p in plan.patterns)]
        for name in frozen:
            assert np.array_equal(before[name], after[name]), (plan.name, name)
            checked += 1
        moved = [n for n in param_names if n not in frozen
                 and not np.array_equal(before[n], after[n])]
        assert moved, f"stage {plan.name} trained nothing"
        before = after
    _line("stage freeze bit exactness",
          f"({checked} frozen tensors identical across {len(plans)} stages)")


def test_planted_rule_learning(desk_run):
    res = score(desk_run.model, desk_run.data, desk_run.pipeline, split="valid")
    assert desk_run.elapsed <= 1800.0
    assert res.valid_ratio >= 0.98, f"ValidRatio {res.valid_ratio:.4f}"
    assert res.hr_at_1 >= 0.6, f"HR@1 {res.hr_at_1:.4f}"
    _line("planted rule learning",
          f"(valid HR@1 {res.hr_at_1:.4f} >= 0.6, ValidRatio "
          f"{res.valid_ratio:.4f} >= 0.98, chance 0.2, "
          f"{desk_run.elapsed:.0f}s run)")


def test_position_proxy_trainability(desk_run):
    ppt = score_ppt(desk_run.model, desk_run.data, desk_run.pipeline,
                    split="valid")
    assert ppt.hr_at_1 >= 0.90, f"proxy accuracy {ppt.hr_at_1:.4f}"
    _line("position proxy trainability",
          f"(valid-answer accuracy {ppt.hr_at_1:.4f} >= 0.90)")


def test_position_awareness_ablation(tmp_path_factory):
    t0 = time.time()
    wins = 0
    scores = []
    for seed in ABLATION_SEEDS:
        pair = {}
        for variant in ("full", "wo_spae"):
            cfg = apply_variant(load_config(
                None, {**ABLATION_SCALE, "seed": seed, "variant": variant}))
            run = _train_once(cfg, tmp_path_factory.mktemp(f"abl{seed}{variant}"))
            pair[variant] = score(run.model, run.data, run.pipeline,
                                  split="valid").hr_at_1
        wins += pair["full"] > pair["wo_spae"]
        scores.append((seed, pair["full"], pair["wo_spae"]))
    elapsed = time.time() - t0
    assert elapsed <= 5400.0
    assert wins >= 2, scores
    detail = ", ".join(f"seed {s}: {a:.3f} vs {b:.3f}" for s, a, b in scores)
    _line("position awareness ablation",
          f"({wins}/3 seeds favor the full model; {detail}; {elapsed:.0f}s)")


def test_metric_identity_and_reference_row(desk_run):
    rng = np.random.default_rng(13)
    for _ in range(200):
        total = int(rng.integers(1, 10**4))
        valid = int(rng.integers(0, total + 1))
        correct = int(rng.integers(0, valid + 1))
        r = EvalResult(name="mock", split="t", total=total, valid=valid,
                       correct=correct, degenerate=False,
                       config_hash="x", dataset_hash="y")
        if valid:
            assert (Fraction(valid, total) * Fraction(correct, valid)
                    == Fraction(correct, total))
        assert abs(r.vhr_at_1 - r.valid_ratio * r.hr_at_1) < 1e-12
    ref = reference_row()
    assert ref.valid_ratio == 9068 / 10000
    assert abs(ref.hr_at_1 - 0.4651) < 5e-5
    assert abs(ref.vhr_at_1 - 0.4217) < 5e-5
    real = score(desk_run.model, desk_run.data, desk_run.pipeline, split="test")
    assert abs(real.vhr_at_1 - real.valid_ratio * real.hr_at_1) < 1e-12
    _line("metric identity",
          f"(200 mocked rows + live scorer; reference row "
          f"{ref.valid_ratio:.4f} x {ref.hr_at_1:.4f} -> {ref.vhr_at_1:.4f})")


def test_gate_ramp_zero_equivalence(desk_run):
    model, meta, _ = SpeederModel.load_checkpoint(desk_run.out / "s1.ckpt")
    for n in ("gates.vision.w", "gates.vision.b"):
        assert not np.any(model.store[n].data), n
    idx = desk_run.data.indices("train")[:8]
    examples = [example_from_dataset(desk_run.data, int(si),
                                     rng=np.random.default_rng([1, int(si)]))
                for si in idx]
    mods = ("text", "vision")
    loss_gated = model.batch_loss(examples, desk_run.pipeline, modalities=mods)

    class HardZero:
        def __call__(self, y):
            return nm.mul(y, Tensor(np.zeros(1)))

    original = model.gates["vision"]
    model.gates["vision"] = HardZero()
    loss_zeroed = model.batch_loss(examples, desk_run.pipeline, modalities=mods)
    model.gates["vision"] = original
    assert loss_gated.item() == loss_zeroed.item()
    _line("gate ramp zero equivalence",
          f"(first multimodal-stage forward bitwise equal with hard-zeroed "
          f"vision path: {loss_gated.item():.6f})")

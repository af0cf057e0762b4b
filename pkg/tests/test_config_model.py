"""Config merging/hashing and whole-model wiring."""

import json

import numpy as np
import pytest

from speeder import numerics as nm
from speeder.config import (
    DEFAULTS,
    ConfigError,
    apply_variant,
    config_hash,
    load_config,
    save_config,
)
from speeder.corpus import build_synthetic_dataset
from speeder.encoders import build_encoder_suite
from speeder.model import (
    FeaturePipeline,
    PromptExample,
    SpeederModel,
    example_from_dataset,
)
from speeder.numerics import Tensor


# -- config -----------------------------------------------------------------


def test_defaults_and_override_precedence(tmp_path):
    cfg = load_config()
    assert cfg == DEFAULTS
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"d_f": 32, "max_lr": 1e-3}))
    cfg = load_config(path, overrides={"max_lr": 5e-4})
    assert cfg["d_f"] == 32
    assert cfg["max_lr"] == 5e-4


def test_unknown_key_and_bad_types_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(overrides={"dd_f": 1})
    with pytest.raises(ConfigError, match="expected int"):
        load_config(overrides={"d_f": "big"})
    with pytest.raises(ConfigError, match="expected bool"):
        load_config(overrides={"use_ppl": 1})
    assert isinstance(load_config(overrides={"max_lr": 1})["max_lr"], float)
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(bad)


def test_variant_table_and_application():
    with pytest.raises(ConfigError, match="variant"):
        load_config(overrides={"variant": "wo_everything"})
    cfg = apply_variant(load_config(overrides={"variant": "wo_spae"}))
    assert cfg["include_proxy"] is False and cfg["use_ppl"] is False
    cfg = apply_variant(load_config(overrides={"variant": "wo_vision"}))
    assert cfg["modalities"] == ["text", "seq"]
    cfg = apply_variant(load_config(overrides={"variant": "relu_gate"}))
    assert cfg["gate_mode"] == "relu"


def test_config_hash_canonical_and_sensitive(tmp_path):
    a = load_config()
    b = dict(reversed(list(load_config().items())))
    assert config_hash(a) == config_hash(b)
    c = load_config(overrides={"seed": 1})
    assert config_hash(a) != config_hash(c)
    save_config(a, tmp_path / "cfg.json")
    assert load_config(tmp_path / "cfg.json") == a


# -- model -------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_world():
    cfg = load_config(overrides={"stage_epochs": [1, 1, 1], "batch_size": 4})
    dataset = build_synthetic_dataset(60, 12, "latent-match", seed=1)
    suite = build_encoder_suite(dataset, cfg, seed=1)
    pipeline = FeaturePipeline(dataset.catalog, suite)
    return cfg, dataset, suite, pipeline


def test_model_registers_all_components(small_world):
    cfg, *_ = small_world
    model = SpeederModel(cfg)
    names = set(model.store.names())
    for expected in ("adapters.text.w", "adapters.fusion.b", "gates.vision.w",
                     "mome.layer0.mhsa.w_q", "mome.layer1.expert.multimodal.w1",
                     "spae.ppl", "lm.tok_emb", "lm.layer0.attn.lora.q.a",
                     "lm.head"):
        assert expected in names, expected


def test_gate_mode_none_registers_no_gate_params(small_world):
    cfg, *_ = small_world
    model = SpeederModel({**cfg, "gate_mode": "none"})
    assert not any(n.startswith("gates.") for n in model.store.names())


def test_same_seed_same_weights(small_world):
    cfg, *_ = small_world
    a = SpeederModel(cfg).store.weights_hash()
    b = SpeederModel(cfg).store.weights_hash()
    assert a == b
    c = SpeederModel({**cfg, "seed": 9}).store.weights_hash()
    assert a != c


def test_fuse_items_shapes_and_subsets(small_world):
    cfg, dataset, suite, pipeline = small_world
    model = SpeederModel(cfg)
    items = [0, 1, 2, 3]
    full = model.fuse_items(pipeline.features(items, ("text", "vision", "seq")))
    assert full.shape == (4, cfg["d_f"])
    text_only = model.fuse_items(pipeline.features(items, ("text",)), ("text",))
    assert text_only.shape == (4, cfg["d_f"])


def test_example_from_dataset_mapping(small_world):
    cfg, dataset, _, _ = small_world
    rng = np.random.default_rng(0)
    ex = example_from_dataset(dataset, 0, rng=rng)
    pool = dataset.pools[0]
    seq = dataset.sequences[0]
    assert ex.history == seq.items
    assert ex.candidates[ex.answer_slot - 1] == seq.next_item
    assert ex.candidates == pool.candidates
    assert all(iid in seq.items for iid in ex.proxy.item_ids)


def test_injection_rows_match_fused_plus_position_prompts(small_world):
    cfg, dataset, _, pipeline = small_world
    model = SpeederModel(cfg)
    model.ppl.table.data = np.random.default_rng(3).normal(
        size=model.ppl.table.shape)
    rng = np.random.default_rng(1)
    ex = example_from_dataset(dataset, 0, rng=rng)
    built = model.template.build(ex.history, ex.candidates, proxy=ex.proxy)
    items = sorted(set(ex.history) | set(ex.proxy.item_ids) | set(ex.candidates))
    item_row = {iid: r for r, iid in enumerate(items)}
    fused = model.fuse_items(pipeline.features(items, model.cfg["modalities"]))
    inject, emb_mask = model._injection([ex], [built], fused, item_row,
                                        len(built.ids))
    slot_positions = {pos for pos, _ in built.emb_refs}
    tag_positions = {pos for pos, _ in built.tag_refs}
    readout = len(built.ids) - 1
    for pos in range(len(built.ids)):
        row = inject.data[0, pos]
        if pos not in slot_positions and pos not in tag_positions and pos != readout:
            assert np.array_equal(row, np.zeros(cfg["d_f"]))
    for pos, ref in built.emb_refs:
        want = fused.data[item_row[model._ref_item(ex, ref)]].copy()
        if ref[0] == "hist":
            want = want + model.ppl.table.data[ref[1]]
        assert np.allclose(inject.data[0, pos], want, atol=1e-12), ref
    tok_emb = model.store["lm.tok_emb"].data
    for pos, ref in built.tag_refs:
        want = (fused.data[item_row[model._ref_item(ex, ref)]]
                + tok_emb[built.ids[pos]])
        assert np.allclose(inject.data[0, pos], want, atol=1e-12), ref
    # zero recency temperature pools to the exact history mean
    hist_rows = fused.data[[item_row[iid] for iid in ex.history]]
    want = hist_rows.mean(axis=0) + tok_emb[built.ids[readout]]
    assert np.allclose(inject.data[0, readout], want, atol=1e-12)
    assert emb_mask[0, readout] == 1.0


def test_batch_loss_finite_and_gradients_flow(small_world):
    cfg, dataset, _, pipeline = small_world
    model = SpeederModel(cfg)
    rng = np.random.default_rng(2)
    examples = [example_from_dataset(dataset, i, rng=rng) for i in range(4)]
    model.store.set_trainable(["*"])
    loss = model.batch_loss(examples, pipeline)
    assert np.isfinite(loss.item())
    grads = nm.backward(loss, model.store)
    for name in ("lm.tok_emb", "lm.head", "adapters.text.w",
                 "mome.layer0.expert.textual.w1", "spae.ppl",
                 "lm.layer0.attn.lora.q.b"):
        assert name in grads and np.any(grads[name] != 0), name
    # zero-initialised gates block gradient into the gated adapters but
    # their own weights learn
    assert np.all(grads["adapters.vision.w"] == 0.0)
    assert np.any(grads["gates.vision.w"] != 0.0)


def test_title_mode_loss_runs_without_injection(small_world):
    cfg, dataset, _, pipeline = small_world
    model = SpeederModel({**cfg, "prompt_mode": "title"})
    rng = np.random.default_rng(2)
    examples = [example_from_dataset(dataset, i, rng=rng) for i in range(2)]
    loss = model.batch_loss(examples, pipeline)
    assert np.isfinite(loss.item())


def test_generate_example_shapes(small_world):
    cfg, dataset, _, pipeline = small_world
    model = SpeederModel(cfg)
    rng = np.random.default_rng(4)
    ex = example_from_dataset(dataset, 1, rng=rng)
    parsed, logits = model.generate_example(ex, pipeline)
    assert logits.shape == (2, len(model.vocab))
    assert parsed.raw_tokens and len(parsed.raw_tokens) == 2


def test_checkpoint_round_trip_and_guards(small_world, tmp_path):
    cfg, dataset, suite, _ = small_world
    model = SpeederModel(cfg)
    extras = {"optim.m.lm.head": np.zeros((cfg["d_f"], len(model.vocab)))}
    path = tmp_path / "m.ckpt"
    model.save_checkpoint(path, meta={"stage": 2}, extra_arrays=extras)
    loaded, meta, got_extras = SpeederModel.load_checkpoint(path)
    assert meta["stage"] == 2
    assert loaded.store.weights_hash() == model.store.weights_hash()
    assert set(got_extras) == {"optim.m.lm.head"}
    with pytest.raises(ConfigError, match="hash mismatch"):
        SpeederModel.load_checkpoint(path, expect_config_hash="0" * 64)
    with pytest.raises(ValueError, match="shadows"):
        model.save_checkpoint(path, extra_arrays={"lm.head": np.zeros(1)})

"""Frozen encoders, adapters, and the versioned embedding cache."""

import numpy as np
import pytest

from speeder import corpus as cp
from speeder import encoders as enc
from speeder.numerics import ParamStore, ShapeError, Tensor


@pytest.fixture(scope="module")
def dataset():
    return cp.build_synthetic_dataset(
        num_items=400, num_sequences=60, rule="latent-match", seed=17
    )


@pytest.fixture(scope="module")
def seq_encoder(dataset):
    return enc.train_seq_encoder(dataset, d_s=16, epochs=5, seed=17)


def test_text_encoder_deterministic(dataset):
    t1 = enc.TextEncoder(dim=32, salt=4)
    t2 = enc.TextEncoder(dim=32, salt=4)
    item = dataset.catalog[0]
    assert np.array_equal(t1.encode(item), t2.encode(item))
    assert t1.encode(item).shape == (32,)


def test_text_encoder_same_title_same_vector(dataset):
    t = enc.TextEncoder(dim=16)
    a = dataset.catalog[0]
    clone = cp.Item(99, list(a.title_tokens), a.vision_feature, None)
    assert np.array_equal(t.encode(a), t.encode(clone))


def test_text_encoder_salt_changes_output(dataset):
    item = dataset.catalog[3]
    assert not np.array_equal(
        enc.TextEncoder(dim=16, salt=0).encode(item),
        enc.TextEncoder(dim=16, salt=1).encode(item),
    )


def test_text_encoder_empty_title_is_zero():
    t = enc.TextEncoder(dim=8)
    item = cp.Item(0, [], np.zeros(4), None)
    assert np.array_equal(t.encode(item), np.zeros(8))


def test_vision_encoder_preserves_norms_within_5_percent(dataset):
    v = enc.VisionEncoder(d_in=16, d_out=24, seed=0)
    for item in dataset.catalog.items:
        out = v.encode(item)
        assert out.shape == (24,)
        ratio = np.linalg.norm(out) / np.linalg.norm(item.vision_feature)
        assert abs(ratio - 1.0) < 0.05


def test_vision_encoder_rejects_wrong_dim():
    v = enc.VisionEncoder(d_in=16, d_out=24)
    with pytest.raises(ShapeError):
        v.encode(cp.Item(0, [], np.zeros(7), None))


def test_seq_encoder_output_is_trained_table_row(dataset, seq_encoder):
    item = dataset.catalog[5]
    assert np.array_equal(seq_encoder.encode(item), seq_encoder.item_embeddings[5])


def test_seq_encoder_isolated_item_keeps_init_vector(dataset, seq_encoder):
    used = set()
    for s in dataset.sequences:
        if s.split == "train":
            used.update(s.items)
            used.add(s.next_item)
    unused = sorted(set(range(400)) - used)
    assert unused, "fixture must leave some items out of the training split"
    init = enc.initial_seq_embeddings(400, 16, seed=17)
    for iid in unused[:5]:
        assert np.array_equal(seq_encoder.item_embeddings[iid], init[iid])


def test_seq_encoder_training_moves_used_items(dataset, seq_encoder):
    train_items = {i for s in dataset.sequences if s.split == "train" for i in s.items}
    init = enc.initial_seq_embeddings(400, 16, seed=17)
    moved = [iid for iid in train_items if not np.allclose(seq_encoder.item_embeddings[iid], init[iid])]
    assert len(moved) > 0.9 * len(train_items)


def test_seq_encoder_deterministic(dataset):
    a = enc.train_seq_encoder(dataset, d_s=8, epochs=2, seed=3)
    b = enc.train_seq_encoder(dataset, d_s=8, epochs=2, seed=3)
    assert np.array_equal(a.item_embeddings, b.item_embeddings)


def test_adapter_zero_input_zero_output(rng):
    store = ParamStore()
    a = enc.Adapter(store, "adapters.text", 8, 12, rng)
    out = a(Tensor(np.zeros((3, 8))))
    assert np.array_equal(out.data, np.zeros((3, 12)))


def test_adapter_is_affine(rng):
    store = ParamStore()
    a = enc.Adapter(store, "adapters.vision", 6, 4, rng)
    x = rng.normal(size=(5, 6))
    y = rng.normal(size=(5, 6))
    lhs = a(Tensor(x + y)).data + a(Tensor(np.zeros((5, 6)))).data
    rhs = a(Tensor(x)).data + a(Tensor(y)).data
    assert np.allclose(lhs, rhs)


def test_suite_round_trip_and_version_hash(dataset, seq_encoder):
    suite = enc.EncoderSuite(enc.TextEncoder(32, salt=17), enc.VisionEncoder(16, 24, seed=17), seq_encoder)
    back = enc.EncoderSuite.from_arrays(suite.to_arrays())
    item = dataset.catalog[7]
    for k in ("text", "vision", "seq"):
        assert np.array_equal(suite.encode(item)[k], back.encode(item)[k])
    assert suite.version_hash() == back.version_hash()
    bumped = enc.EncoderSuite(
        enc.TextEncoder(32, salt=17),
        enc.VisionEncoder(16, 24, seed=17),
        enc.SeqEncoder(seq_encoder.item_embeddings + 1.0),
    )
    assert bumped.version_hash() != suite.version_hash()


def test_cache_hits_are_bit_identical():
    cache = enc.EmbeddingCache()
    calls = []

    def compute():
        calls.append(1)
        return np.random.default_rng(0).normal(size=8)

    first = cache.get_or_compute(3, "enc:v1", compute)
    second = cache.get_or_compute(3, "enc:v1", compute)
    assert len(calls) == 1  # hit did not touch the encoder
    assert second is first
    assert cache.hits == 1 and cache.misses == 1


def test_cache_version_tag_invalidation():
    cache = enc.EmbeddingCache()
    cache.get_or_compute(3, "fused:s1:aaa", lambda: np.zeros(4))
    assert cache.contains(3, "fused:s1:aaa")
    assert not cache.contains(3, "fused:s1:bbb")  # weight change -> new tag -> miss


def test_cache_warm_size_matches_catalog_times_dim():
    cache = enc.EmbeddingCache()
    V, d = 37, 16
    for iid in range(V):
        cache.get_or_compute(iid, "fused:s3:xyz", lambda: np.zeros(d))
    assert cache.scalars_for_tag("fused:s3:xyz") == V * d
    assert cache.items_for_tag("fused:s3:xyz") == V


def test_cache_container_round_trip(tmp_path):
    from speeder.numerics import load_container, save_container

    cache = enc.EmbeddingCache()
    cache.get_or_compute(1, "enc:v2", lambda: np.arange(4.0))
    cache.get_or_compute(2, "enc:v2", lambda: np.arange(4.0) * 2)
    path = tmp_path / "cache.bin"
    save_container(path, cache.to_arrays(), {"kind": "cache"})
    arrays, meta = load_container(path)
    back = enc.EmbeddingCache.from_arrays(arrays)
    assert meta["kind"] == "cache"
    assert np.array_equal(back.get_or_compute(2, "enc:v2", lambda: None), np.arange(4.0) * 2)
    assert back.hits == 1

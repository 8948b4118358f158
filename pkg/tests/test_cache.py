import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ropevq.attention import AttnInput, fused_attention, reference_attention
from ropevq.cache import (
    CacheStats,
    QuantizedKVCache,
    bits_to_key_codes,
    cache_stats,
    decode_step,
    key_codes_to_bits,
    n_words,
    pack_bits,
    pack_key_codes,
    pack_value_codes,
    prefill,
    unpack_bits,
    unpack_key_codes,
    unpack_value_codes,
)
from ropevq.errors import CorruptCodeError
from ropevq.keyquant import KeyCodebook, KeyQuantConfig, decode_keys, encode_keys
from ropevq.valquant import ValueCodebook, ValueEncoder, decode_values, encoder_forward


@pytest.fixture
def models(rng):
    d = 16
    kcb = KeyCodebook(KeyQuantConfig(d, 4, 8, 3), rng.standard_normal((3, d // 2, 8, 2)) * 0.3)
    enc = ValueEncoder.init(d, 24, rng=rng)
    vcb = ValueCodebook(rng.standard_normal((24, d)) * 0.3)
    return kcb, enc, vcb


def reference_bits(records):
    """Stream bit k of the concatenated records lives in bit k % 64 of word k // 64."""
    flat = np.asarray(records).reshape(-1)
    words = [0] * n_words(flat.size)
    for k, bit in enumerate(flat):
        if bit:
            words[k // 64] |= 1 << (k % 64)
    return np.array(words, dtype=np.uint64)


@given(st.integers(0, 40), st.integers(1, 150), st.integers(0, 2 ** 31))
def test_pack_unpack_roundtrip(n, width, seed):
    bits = np.random.default_rng(seed).integers(0, 2, (n, width))
    words = pack_bits(bits)
    assert words.size == n_words(n * width)
    np.testing.assert_array_equal(words, reference_bits(bits))
    np.testing.assert_array_equal(unpack_bits(words, n, width), bits)


def test_unpack_rejects_truncation():
    words = pack_bits(np.ones((10, 100)))
    with pytest.raises(CorruptCodeError):
        unpack_bits(words[:-1], 10, 100)


def test_key_record_layout():
    cfg = KeyQuantConfig(4, 1, 4, 1)  # 2 groups, 2 bits per index
    codes = np.array([[[[1, 2], [3, 0]]]])
    bits = key_codes_to_bits(codes, cfg)
    # a then b per group, each least significant bit first
    np.testing.assert_array_equal(bits[0], [1, 0, 0, 1, 1, 1, 0, 0])
    np.testing.assert_array_equal(bits_to_key_codes(bits, cfg), codes)


@pytest.mark.parametrize("d,g,n_lv,r", [(1024, 64, 64, 11), (64, 4, 16, 3), (12, 3, 2, 5)])
def test_key_pack_roundtrip_and_bit_count(rng, d, g, n_lv, r):
    cfg = KeyQuantConfig(d, g, n_lv, r)
    n = 37
    codes = rng.integers(0, n_lv, (n, r, cfg.n_groups, 2))
    words = pack_key_codes(codes, cfg)
    assert words.size == n_words(n * cfg.bits_per_token)
    np.testing.assert_array_equal(unpack_key_codes(words, cfg, n), codes)


def test_per_token_sizes():
    assert KeyQuantConfig(1024, 64, 64, 11).bits_per_token == 1056
    assert KeyQuantConfig(1024, 64, 64, 11).bits_per_token / 8 == 132
    assert CacheStats.for_config(1, KeyQuantConfig(1024), 1024).value_bits_per_token / 8 == 128


def test_value_pack_roundtrip(rng):
    codes = rng.integers(0, 2, (19, 1024)).astype(np.uint8)
    np.testing.assert_array_equal(unpack_value_codes(pack_value_codes(codes, 1024), 1024, 19), codes)
    with pytest.raises(CorruptCodeError):
        pack_value_codes(np.full((2, 4), 2), 4)


def test_prefill_empty(models):
    cache = prefill(np.zeros((0, 16)), np.zeros((0, 16)), *models)
    s = cache_stats(cache)
    assert len(cache) == 0
    assert s.quantized_payload_bytes == s.packed_bytes == s.fp16_equivalent_bytes == 0
    assert s.avg_bit_effective == 0.0
    assert cache.key_words.size == cache.value_words.size == 0


def test_prefill_codes_match_direct_encoding(rng, models):
    kcb, enc, vcb = models
    K, V = rng.standard_normal((40, 16)), rng.standard_normal((40, 16))
    cache = prefill(K, V, kcb, enc, vcb)
    kc = encode_keys(K, kcb)
    vc, _ = encoder_forward(V, enc)
    np.testing.assert_array_equal(cache.key_codes(), kc)
    np.testing.assert_array_equal(cache.value_codes(), vc)
    k_mse = np.mean((decode_keys(cache.key_codes(), kcb) - K) ** 2)
    assert k_mse == pytest.approx(np.mean((decode_keys(kc, kcb) - K) ** 2), abs=1e-12)
    v_mse = np.mean((decode_values(cache.value_codes(), vcb) - V) ** 2)
    assert v_mse == pytest.approx(np.mean((decode_values(vc, vcb) - V) ** 2), abs=1e-12)


def test_prefill_rejects_bad_shapes(models):
    with pytest.raises(ValueError):
        prefill(np.zeros((3, 16)), np.zeros((2, 16)), *models)
    with pytest.raises(ValueError):
        prefill(np.zeros((3, 15)), np.zeros((3, 15)), *models)


def test_incremental_decode_equals_prefill_replay(rng, models):
    kcb, enc, vcb = models
    n = 16
    K, V, Q = (rng.standard_normal((n, 16)) for _ in range(3))
    cache = QuantizedKVCache(kcb, enc, vcb)
    outs = []
    for i in range(n):
        out, cache2 = decode_step(cache, K[i], V[i], Q[i])
        assert cache2 is cache and len(cache) == i + 1
        outs.append(out)
    full = prefill(K, V, kcb, enc, vcb)
    np.testing.assert_array_equal(full.key_words, cache.key_words)
    np.testing.assert_array_equal(full.value_words, cache.value_words)
    for i in range(n):
        replay, _ = full.attend(Q[i], n=i + 1)
        np.testing.assert_allclose(outs[i], replay, rtol=1e-6, atol=1e-12)


def test_decode_step_lossless_equals_reference(rng):
    d = 8
    kcb = KeyCodebook(KeyQuantConfig(d, 2, 4, 1), rng.standard_normal((1, d // 2, 4, 2)))
    vcb = ValueCodebook(rng.standard_normal((8, d)))
    enc = ValueEncoder.init(d, 8, rng=rng)
    codes = rng.integers(0, 4, (6, 1, 2, 2))
    K = decode_keys(codes, kcb)  # exactly representable
    cache = QuantizedKVCache(kcb, enc, vcb)
    cache.append(K, np.zeros((6, d)))
    V = decode_values(cache.value_codes(), vcb)
    q = rng.standard_normal(d)
    out, _ = cache.attend(q)
    np.testing.assert_allclose(out, reference_attention(q, K, V, cache.rope, 5), atol=1e-10)


def test_decode_step_rejects_bad_vectors(models):
    cache = QuantizedKVCache(*models)
    with pytest.raises(ValueError):
        cache.decode_step(np.zeros(15), np.zeros(16), np.zeros(16))


def test_stats_invariants(rng, models):
    kcb, enc, vcb = models
    cache = prefill(rng.standard_normal((33, 16)), rng.standard_normal((33, 16)), kcb, enc, vcb)
    s = cache.stats()
    assert s.fp16_equivalent_bytes == 33 * 16 * 2 * 2
    assert s.avg_bit_effective == 8 * s.quantized_payload_bytes / (33 * 16 * 2)
    assert s.key_avg_bit == kcb.config.bits_per_token / 16
    assert s.value_avg_bit == 24 / 16
    assert s.quantized_payload_bits == 33 * 16 * (s.key_avg_bit + s.value_avg_bit)
    assert s.packed_bytes == 8 * (cache.key_words.size + cache.value_words.size)
    assert s.packed_bytes * 8 - s.quantized_payload_bits < 128


def test_full_scale_stats():
    s = CacheStats.for_config(131072, KeyQuantConfig(1024, 64, 64, 11), 1024)
    assert s.fp16_bytes_per_side == 268_435_456 == 256 * 2 ** 20
    assert s.value_avg_bit == 1.0
    assert s.codebook_bytes == 2_097_152 + 2_883_584
    sizes = {CacheStats.for_config(n, KeyQuantConfig(1024), 1024).codebook_bytes
             for n in (1, 1024, 131072)}
    assert sizes == {2_097_152 + 2_883_584}


def test_codebook_mismatch_rejected(rng):
    kcb = KeyCodebook(KeyQuantConfig(8, 2, 4, 1), np.zeros((1, 4, 4, 2)))
    with pytest.raises(ValueError):
        QuantizedKVCache(kcb, ValueEncoder.init(6, 6, rng=rng), ValueCodebook(np.zeros((6, 6))))


def test_attend_uses_fused_pathway(rng, models):
    kcb, enc, vcb = models
    cache = prefill(rng.standard_normal((10, 16)), rng.standard_normal((10, 16)), kcb, enc, vcb)
    q = rng.standard_normal(16)
    out, rep = cache.attend(q, t=20)
    inp = AttnInput(q, 20, cache.key_codes(), cache.value_codes(), kcb, vcb, cache.rope)
    np.testing.assert_allclose(out, fused_attention(inp)[0], atol=1e-14)
    assert rep.pathway == "fused"

"""Bit-packed quantized KV cache for a single attention head.

Per-token code records are laid end to end in a stream of 64-bit words
with little-endian bit order (stream bit ``k`` is bit ``k % 64`` of word
``k // 64``). Records are not padded; only the tail of the last word is.
Key records hold, for each round and group, ``a`` then ``b`` with
``log2(n_levels)`` bits each, least significant bit first. Value records
are the ``n_codes`` code bits.
"""

from dataclasses import dataclass

import numpy as np

from .attention import AttnInput, fused_attention, rotary_tables
from .errors import CorruptCodeError
from .keyquant import check_key_codes, encode_keys, key_codebook_bytes
from .rope import RopeParams
from .valquant import check_value_codes, encoder_forward, value_codebook_bytes

WORD_BITS = 64


def n_words(n_bits):
    return -(-n_bits // WORD_BITS)


def pack_bits(records):
    """Pack a ``(N, B)`` 0/1 matrix into little-endian uint64 words."""
    records = np.asarray(records, dtype=np.uint8)
    flat = records.reshape(-1)
    total = flat.size
    padded = np.zeros(n_words(total) * WORD_BITS, dtype=np.uint8)
    padded[:total] = flat
    return np.packbits(padded, bitorder="little").view("<u8").astype(np.uint64)


def unpack_bits(words, n_records, record_bits):
    words = np.asarray(words)
    need = n_words(n_records * record_bits)
    if words.size < need:
        raise CorruptCodeError(f"truncated cache: need {need} words, got {words.size}")
    raw = words[:need].astype("<u8").view(np.uint8)
    bits = np.unpackbits(raw, bitorder="little")[: n_records * record_bits]
    return bits.reshape(n_records, record_bits)


def key_codes_to_bits(codes, config):
    codes = check_key_codes(codes, config)
    shifts = np.arange(config.index_bits)
    bits = (codes[..., None] >> shifts) & 1
    return bits.reshape(codes.shape[0], config.bits_per_token).astype(np.uint8)


def bits_to_key_codes(bits, config):
    n = bits.shape[0]
    b = bits.reshape(n, config.rounds, config.n_groups, 2, config.index_bits).astype(np.int64)
    return np.sum(b << np.arange(config.index_bits), axis=-1)


def pack_key_codes(codes, config):
    return pack_bits(key_codes_to_bits(codes, config))


def unpack_key_codes(words, config, n_tokens):
    return bits_to_key_codes(unpack_bits(words, n_tokens, config.bits_per_token), config)


def pack_value_codes(codes, n_codes):
    return pack_bits(check_value_codes(codes, n_codes))


def unpack_value_codes(words, n_codes, n_tokens):
    return unpack_bits(words, n_tokens, n_codes)


def _write_bits(words, offset, bits):
    pos = offset + np.flatnonzero(bits)
    np.bitwise_or.at(words, pos >> 6, np.left_shift(np.uint64(1), (pos & 63).astype(np.uint64)))


@dataclass(frozen=True)
class CacheStats:
    tokens: int
    d: int
    key_bits_per_token: int
    value_bits_per_token: int
    codebook_bytes: int

    @classmethod
    def for_config(cls, n_tokens, key_config, n_codes):
        d = key_config.d
        cb = key_codebook_bytes(key_config.n_levels, key_config.rounds, d)
        cb += value_codebook_bytes(n_codes, d)
        return cls(n_tokens, d, key_config.bits_per_token, n_codes, cb)

    @property
    def fp16_bytes_per_side(self):
        return self.tokens * self.d * 2

    @property
    def fp16_equivalent_bytes(self):
        return 2 * self.fp16_bytes_per_side

    @property
    def quantized_payload_bits(self):
        return self.tokens * (self.key_bits_per_token + self.value_bits_per_token)

    @property
    def quantized_payload_bytes(self):
        return self.quantized_payload_bits / 8

    @property
    def packed_bytes(self):
        """Bytes actually held in words, including tail padding."""
        return 8 * (
            n_words(self.tokens * self.key_bits_per_token)
            + n_words(self.tokens * self.value_bits_per_token)
        )

    @property
    def avg_bit_effective(self):
        if self.tokens == 0:
            return 0.0
        return 8 * self.quantized_payload_bytes / (self.tokens * self.d * 2)

    @property
    def key_avg_bit(self):
        return self.key_bits_per_token / self.d

    @property
    def value_avg_bit(self):
        return self.value_bits_per_token / self.d

    @property
    def avg_bit_amortized(self):
        """Payload plus codebooks, spread over the cached scalars."""
        if self.tokens == 0:
            return 0.0
        return (self.quantized_payload_bits + 8 * self.codebook_bytes) / (self.tokens * self.d * 2)

    def to_dict(self):
        keys = ("tokens", "d", "key_bits_per_token", "value_bits_per_token", "codebook_bytes",
                "fp16_bytes_per_side", "fp16_equivalent_bytes", "quantized_payload_bits",
                "quantized_payload_bytes", "packed_bytes", "avg_bit_effective", "key_avg_bit",
                "value_avg_bit", "avg_bit_amortized")
        return {k: getattr(self, k) for k in keys}


class QuantizedKVCache:
    """Append-only compressed cache for one head.

    Keys are stored pre-RoPE; positions are implied by token order.
    """

    def __init__(self, key_codebook, value_encoder, value_codebook, rope=None):
        d = key_codebook.config.d
        if value_encoder.d != d or value_codebook.d != d:
            raise ValueError("codebook and encoder widths must match")
        if value_encoder.n_codes != value_codebook.n_codes:
            raise ValueError("encoder and value codebook disagree on n_codes")
        self.key_codebook = key_codebook
        self.value_encoder = value_encoder
        self.value_codebook = value_codebook
        self.rope = rope or RopeParams(d)
        self.n_tokens = 0
        self._key_words = np.zeros(0, dtype=np.uint64)
        self._value_words = np.zeros(0, dtype=np.uint64)
        self._tables = (np.zeros((0, d // 2)), np.zeros((0, d // 2)))

    @property
    def d(self):
        return self.key_codebook.config.d

    @property
    def key_config(self):
        return self.key_codebook.config

    @property
    def key_bits_per_token(self):
        return self.key_config.bits_per_token

    @property
    def value_bits_per_token(self):
        return self.value_codebook.n_codes

    @property
    def key_words(self):
        return self._key_words[: n_words(self.n_tokens * self.key_bits_per_token)].copy()

    @property
    def value_words(self):
        return self._value_words[: n_words(self.n_tokens * self.value_bits_per_token)].copy()

    def __len__(self):
        return self.n_tokens

    def _encode(self, K, V):
        K = np.asarray(K, dtype=np.float64)
        V = np.asarray(V, dtype=np.float64)
        if K.ndim != 2 or K.shape[1] != self.d or V.shape != K.shape:
            raise ValueError(f"K and V must both have shape (N, {self.d})")
        key_codes = encode_keys(K, self.key_codebook)
        if K.shape[0]:
            value_codes, _ = encoder_forward(V, self.value_encoder, mode="infer")
        else:
            value_codes = np.zeros((0, self.value_codebook.n_codes), dtype=np.uint8)
        return key_codes, value_codes

    @staticmethod
    def _grow(words, need):
        if words.size >= need:
            return words
        out = np.zeros(max(need, 2 * words.size), dtype=np.uint64)
        out[: words.size] = words
        return out

    def append_codes(self, key_codes, value_codes):
        kbits = key_codes_to_bits(key_codes, self.key_config)
        vbits = check_value_codes(value_codes, self.value_codebook.n_codes).astype(np.uint8)
        if kbits.shape[0] != vbits.shape[0]:
            raise ValueError("key and value code counts differ")
        n_new = kbits.shape[0]
        kb, vb = self.key_bits_per_token, self.value_bits_per_token
        total = self.n_tokens + n_new
        self._key_words = self._grow(self._key_words, n_words(total * kb))
        self._value_words = self._grow(self._value_words, n_words(total * vb))
        _write_bits(self._key_words, self.n_tokens * kb, kbits.reshape(-1))
        _write_bits(self._value_words, self.n_tokens * vb, vbits.reshape(-1))
        self.n_tokens = total

    def append(self, K, V):
        """Encode and append rows of ``K``/``V`` (pre-RoPE keys)."""
        self.append_codes(*self._encode(np.atleast_2d(K), np.atleast_2d(V)))
        return self

    def key_codes(self, n=None):
        n = self.n_tokens if n is None else n
        return unpack_key_codes(self._key_words, self.key_config, n)

    def value_codes(self, n=None):
        n = self.n_tokens if n is None else n
        return unpack_value_codes(self._value_words, self.value_codebook.n_codes, n)

    def tables(self, n):
        if self._tables[0].shape[0] < n:
            self._tables = rotary_tables(self.rope, max(n, 2 * self._tables[0].shape[0]))
        return self._tables

    def attend(self, q, n=None, t=None):
        """Fused attention of ``q`` over the first ``n`` tokens at position ``t``."""
        n = self.n_tokens if n is None else n
        t = n - 1 if t is None else t
        inp = AttnInput(q, t, self.key_codes(n), self.value_codes(n),
                        self.key_codebook, self.value_codebook, self.rope)
        return fused_attention(inp, tables=self.tables(n))

    def decode_step(self, k_new, v_new, q):
        """Append one token and attend with the query at its position."""
        k_new = np.asarray(k_new, dtype=np.float64)
        v_new = np.asarray(v_new, dtype=np.float64)
        if k_new.shape != (self.d,) or v_new.shape != (self.d,) or np.shape(q) != (self.d,):
            raise ValueError(f"decode_step expects vectors of length {self.d}")
        self.append(k_new[None], v_new[None])
        out, _ = self.attend(q)
        return out

    def stats(self):
        return CacheStats(self.n_tokens, self.d, self.key_bits_per_token,
                          self.value_bits_per_token, self.codebook_bytes())

    def codebook_bytes(self):
        cfg = self.key_config
        return key_codebook_bytes(cfg.n_levels, cfg.rounds, cfg.d) + value_codebook_bytes(
            self.value_codebook.n_codes, cfg.d
        )


def prefill(K, V, key_codebook, value_encoder, value_codebook, rope=None):
    """Encode a whole prompt's keys/values into a fresh cache."""
    cache = QuantizedKVCache(key_codebook, value_encoder, value_codebook, rope)
    return cache.append(np.asarray(K, dtype=np.float64).reshape(-1, key_codebook.config.d),
                        np.asarray(V, dtype=np.float64).reshape(-1, key_codebook.config.d))


def decode_step(cache, k_new, v_new, q):
    """Functional spelling of :meth:`QuantizedKVCache.decode_step`.

    The cache is appended in place and returned alongside the output.
    """
    out = cache.decode_step(k_new, v_new, q)
    return out, cache


def cache_stats(cache):
    return cache.stats()

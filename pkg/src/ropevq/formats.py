"""Binary file formats (all little-endian).

``CVQT``  tensor file: magic, u32 version, u32 ndims, u64 dims, u32 dtype
          code (1 = f32), row-major payload.
``CVQK``  key codebook: magic, u32 version, u32 d, g, n_levels, rounds,
          then (x, y) f32 pairs ordered round, subspace, level.
``CVQV``  value quantizer: magic, u32 version, u32 d, h, n_codes, then
          w1, b1, w2, b2 and the codebook rows as f32.
``CVQC``  cache snapshot: magic, u32 version, u32 d, g, n_levels, rounds,
          n_codes, key bits/token, value bits/token, u64 n_tokens,
          u64 key word count, u64 value word count, then the words.
"""

import os
import struct
import tempfile

import numpy as np

from .cache import QuantizedKVCache, n_words
from .errors import CorruptCodeError
from .keyquant import KeyCodebook, KeyQuantConfig
from .valquant import ValueCodebook, ValueEncoder

VERSION = 1
DTYPE_F32 = 1


def atomic_write(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf, what):
        self.buf = memoryview(buf)
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptCodeError(f"truncated {self.what} file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def header(self, magic):
        if bytes(self.take(4)) != magic:
            raise ValueError(f"not a {magic.decode()} file")
        (version,) = self.unpack("<I")
        if version != VERSION:
            raise ValueError(f"unsupported {magic.decode()} version {version}")

    def done(self):
        if self.pos != len(self.buf):
            raise CorruptCodeError(f"trailing bytes in {self.what} file")


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def dump_tensor(array):
    a = np.asarray(array, dtype="<f4")
    head = b"CVQT" + struct.pack("<II", VERSION, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape) + struct.pack("<I", DTYPE_F32)
    return head + np.ascontiguousarray(a).tobytes()


def load_tensor_bytes(buf):
    r = _Reader(buf, "CVQT")
    r.header(b"CVQT")
    (ndims,) = r.unpack("<I")
    dims = r.unpack(f"<{ndims}Q")
    (dtype,) = r.unpack("<I")
    if dtype != DTYPE_F32:
        raise ValueError(f"unsupported dtype code {dtype}")
    count = int(np.prod(dims, dtype=np.int64)) if ndims else 1
    a = r.array("<f4", count).reshape(dims)
    r.done()
    return a


def save_tensor(path, array):
    atomic_write(path, dump_tensor(array))


def load_tensor(path):
    with open(path, "rb") as fh:
        return load_tensor_bytes(fh.read())


def dump_key_codebook(cb):
    c = cb.config
    head = b"CVQK" + struct.pack("<5I", VERSION, c.d, c.group_size, c.n_levels, c.rounds)
    return head + _f32(cb.atoms)


def load_key_codebook_bytes(buf):
    r = _Reader(buf, "CVQK")
    r.header(b"CVQK")
    d, g, n_lv, rounds = r.unpack("<4I")
    cfg = KeyQuantConfig(d, g, n_lv, rounds)
    atoms = r.array("<f4", rounds * (d // 2) * n_lv * 2).reshape(rounds, d // 2, n_lv, 2)
    r.done()
    return KeyCodebook(cfg, atoms.astype(np.float64))


def dump_value_quantizer(enc, cb):
    if enc.n_codes != cb.n_codes or enc.d != cb.d:
        raise ValueError("encoder and codebook disagree")
    head = b"CVQV" + struct.pack("<4I", VERSION, enc.d, enc.hidden, enc.n_codes)
    return head + b"".join(_f32(a) for a in (enc.w1, enc.b1, enc.w2, enc.b2, cb.rows))


def load_value_quantizer_bytes(buf):
    r = _Reader(buf, "CVQV")
    r.header(b"CVQV")
    d, h, nc = r.unpack("<3I")

    def take(*shape):
        return r.array("<f4", int(np.prod(shape))).reshape(shape).astype(np.float64)

    enc = ValueEncoder(take(d, h), take(h), take(h, nc), take(nc))
    cb = ValueCodebook(take(nc, d))
    r.done()
    return enc, cb


def dump_cache(cache):
    c = cache.key_config
    kw, vw = cache.key_words, cache.value_words
    head = b"CVQC" + struct.pack(
        "<8I", VERSION, c.d, c.group_size, c.n_levels, c.rounds,
        cache.value_codebook.n_codes, cache.key_bits_per_token, cache.value_bits_per_token,
    )
    head += struct.pack("<3Q", cache.n_tokens, kw.size, vw.size)
    return head + kw.astype("<u8").tobytes() + vw.astype("<u8").tobytes()


def load_cache_bytes(buf, key_codebook, value_encoder, value_codebook, rope=None):
    """Rebuild a cache from a snapshot; the codebooks must match its header."""
    r = _Reader(buf, "CVQC")
    r.header(b"CVQC")
    d, g, n_lv, rounds, nc, kb, vb = r.unpack("<7I")
    n, nkw, nvw = r.unpack("<3Q")
    if KeyQuantConfig(d, g, n_lv, rounds) != key_codebook.config or nc != value_codebook.n_codes:
        raise ValueError("snapshot configuration does not match the supplied codebooks")
    if kb != key_codebook.config.bits_per_token or vb != nc:
        raise CorruptCodeError("inconsistent per-token bit counts in snapshot header")
    if nkw != n_words(n * kb) or nvw != n_words(n * vb):
        raise CorruptCodeError("word counts do not match the token count")
    kw = r.array("<u8", nkw).astype(np.uint64)
    vw = r.array("<u8", nvw).astype(np.uint64)
    r.done()
    cache = QuantizedKVCache(key_codebook, value_encoder, value_codebook, rope)
    cache._key_words = kw
    cache._value_words = vw
    cache.n_tokens = int(n)
    return cache


def save_key_codebook(path, cb):
    atomic_write(path, dump_key_codebook(cb))


def load_key_codebook(path):
    with open(path, "rb") as fh:
        return load_key_codebook_bytes(fh.read())


def save_value_quantizer(path, enc, cb):
    atomic_write(path, dump_value_quantizer(enc, cb))


def load_value_quantizer(path):
    with open(path, "rb") as fh:
        return load_value_quantizer_bytes(fh.read())


def save_cache(path, cache):
    atomic_write(path, dump_cache(cache))


def load_cache(path, key_codebook, value_encoder, value_codebook, rope=None):
    with open(path, "rb") as fh:
        return load_cache_bytes(fh.read(), key_codebook, value_encoder, value_codebook, rope)

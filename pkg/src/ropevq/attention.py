"""Single-step decode attention over a quantized KV cache.

Three pathways compute the same output for one new query against ``N``
cached tokens:

``reference_attention``
    Full-precision keys and values.
``naive_quantized_attention``
    Decode every cached key and value, apply RoPE to each key, then attend.
``fused_attention``
    Never reconstructs keys. The rotated query is multiplied into every
    codebook atom once; because atoms commute with RoPE rotations, each
    token's score is a cos/sin combination of looked-up table entries.
    Values are aggregated as ``(softmax @ S_V) @ C_V``.

The quantized pathways count scalar multiplications (additions are free;
products with a 0/1 matrix that are done by selection count nothing).
Divisions count as multiplications. The cos/sin tables for ``i * theta_j``
are treated as precomputed and are not counted.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .keyquant import KeyCodebook, check_key_codes, decode_keys
from .rope import RopeParams, apply_rope, apply_rope_rows
from .valquant import ValueCodebook, check_value_codes


@dataclass
class FlopReport:
    pathway: str
    N: int
    d: int
    N_c: int
    R: int
    N_cprime: int
    predicted_mults: int
    measured_mults: int

    @property
    def ratio(self):
        return self.measured_mults / self.predicted_mults

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class AttnInput:
    q: np.ndarray
    t: int
    key_codes: np.ndarray = field(repr=False)
    value_codes: np.ndarray = field(repr=False)
    key_codebook: KeyCodebook = field(repr=False)
    value_codebook: ValueCodebook = field(repr=False)
    rope: RopeParams = field(repr=False)

    def __post_init__(self):
        d = self.rope.d
        q = np.asarray(self.q, dtype=np.float64)
        if q.shape != (d,):
            raise ValueError(f"query must have length {d}")
        if self.key_codebook.config.d != d or self.value_codebook.d != d:
            raise ValueError("codebook widths do not match the RoPE dimension")
        kc = check_key_codes(self.key_codes, self.key_codebook.config)
        vc = check_value_codes(self.value_codes, self.value_codebook.n_codes)
        if kc.shape[0] != vc.shape[0]:
            raise ValueError("key and value code counts differ")
        if kc.shape[0] == 0:
            raise ValueError("empty cache")
        if self.t < kc.shape[0] - 1:
            raise ValueError("query position precedes cached tokens")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "key_codes", kc)
        object.__setattr__(self, "value_codes", vc)

    @property
    def N(self):
        return self.key_codes.shape[0]

    def shape_info(self):
        cfg = self.key_codebook.config
        return dict(N=self.N, d=self.rope.d, N_c=self.value_codebook.n_codes,
                    R=cfg.rounds, N_cprime=cfg.n_levels)


def predicted_flops_naive(N, d, N_c):
    return (2 * d + 1) * N + 2 * d * N_c * N


def predicted_flops_fused(N, d, N_c, R, N_cprime):
    return (R * d + N_c + 1) * N + d * (N_c + R * N_cprime)


def _softmax_weighted(scores, d):
    """Scale, softmax; returns weights and the multiply count."""
    n = scores.shape[0]
    z = scores * (1.0 / np.sqrt(d))
    e = np.exp(z - z.max())
    w = e * (1.0 / e.sum())
    return w, 2 * n


def reference_attention(q, K, V, rope, t):
    """``softmax((q R_t)(K R)^T / sqrt(d)) V`` with key ``i`` at position ``i``."""
    d = rope.d
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if K.ndim != 2 or K.shape[1] != d or V.shape != K.shape:
        raise ValueError("K and V must both have shape (N, d)")
    if K.shape[0] == 0:
        raise ValueError("empty cache")
    qr = apply_rope(rope, q, t)
    Kr = apply_rope_rows(rope, K)
    w, _ = _softmax_weighted(Kr @ qr, d)
    return w @ V


def naive_quantized_attention(inp):
    """Decode-then-attend. Returns ``(output, FlopReport)``."""
    d = inp.rope.d
    n = inp.N
    mults = 0
    K = decode_keys(inp.key_codes, inp.key_codebook)  # gathers and adds only
    Kr = apply_rope_rows(inp.rope, K)
    mults += 2 * n * d
    # dense decode, as a generic implementation would do it
    V = inp.value_codes.astype(np.float64) @ inp.value_codebook.rows
    mults += n * inp.value_codebook.n_codes * d
    qr = apply_rope(inp.rope, inp.q, inp.t)
    mults += 2 * d
    scores = Kr @ qr
    mults += n * d
    w, m = _softmax_weighted(scores, d)
    mults += m
    out = w @ V
    mults += n * d
    info = inp.shape_info()
    report = FlopReport("naive", **info,
                        predicted_mults=predicted_flops_naive(n, d, info["N_c"]),
                        measured_mults=mults)
    return out, report


def rotary_tables(rope, n):
    """cos/sin of ``i * theta_j`` for positions ``0..n-1``, each ``(n, d/2)``."""
    ang = rope.angles(np.arange(n))
    return np.cos(ang), np.sin(ang)


def query_atom_products(qr, key_codebook):
    """``(q^j R_t^j) C^{jl T}`` for every round, subspace and level.

    Returns two arrays ``(R, d/2, N')`` holding the two components.
    """
    x = key_codebook.atoms[..., 0]
    y = key_codebook.atoms[..., 1]
    q0 = qr[0::2][None, :, None]
    q1 = qr[1::2][None, :, None]
    # (q0, q1) @ [[x, -y], [y, x]]
    return q0 * x + q1 * y, q1 * x - q0 * y


def fused_attention(inp, tables=None, fold_rounds=False):
    """Attention straight from the codes. Returns ``(output, FlopReport)``.

    Args:
        inp: an :class:`AttnInput`.
        tables: optional ``(cos, sin)`` from :func:`rotary_tables` covering
            at least ``N`` positions.
        fold_rounds: sum the per-round table lookups before rotating. The
            cos/sin factors do not depend on the round, so this cuts the
            per-token key cost from ``R * d`` to ``d`` multiplies.
    """
    cfg = inp.key_codebook.config
    d = inp.rope.d
    n = inp.N
    g = cfg.group_size
    mults = 0

    qr = apply_rope(inp.rope, inp.q, inp.t)
    mults += 2 * d
    P0, P1 = query_atom_products(qr, inp.key_codebook)
    mults += 4 * P0.size

    if tables is None:
        tables = rotary_tables(inp.rope, n)
    cos, sin = tables[0][:n], tables[1][:n]

    # per-subspace index lookup; groups share one (a, b)
    a = np.repeat(inp.key_codes[..., 0], g, axis=2)  # (N, R, d/2)
    b = np.repeat(inp.key_codes[..., 1], g, axis=2)
    r_idx = np.arange(cfg.rounds)[None, :, None]
    j_idx = np.arange(cfg.n_sub)[None, None, :]
    u = P0[r_idx, j_idx, a] + P1[r_idx, j_idx, b]
    v = P0[r_idx, j_idx, b] - P1[r_idx, j_idx, a]
    if fold_rounds:
        u = u.sum(axis=1)
        v = v.sum(axis=1)
        scores = np.sum(cos * u + sin * v, axis=1)
        mults += 2 * u.size
    else:
        terms = cos[:, None, :] * u + sin[:, None, :] * v
        mults += 2 * u.size
        scores = terms.reshape(n, -1).sum(axis=1)

    w, m = _softmax_weighted(scores, d)
    mults += m
    # weights @ S_V by selection and addition only
    ws = np.where(inp.value_codes.astype(bool), w[:, None], 0.0).sum(axis=0)
    out = ws @ inp.value_codebook.rows
    mults += ws.size * d

    info = inp.shape_info()
    predicted = predicted_flops_fused(n, d, info["N_c"], info["R"], info["N_cprime"])
    report = FlopReport("fused", **info, predicted_mults=predicted, measured_mults=mults)
    return out, report

"""Seeded synthetic calibration data with a controllable rank."""

import numpy as np


def gen_synth(n, d, rank, seed=0, noise=0.01, mix=True):
    """Low-rank Gaussian data ``z @ A + eps``.

    ``z`` is standard normal of width ``rank``; ``A`` is a seeded
    ``rank x d`` Gaussian mixing matrix scaled to unit output variance, or
    the first ``rank`` rows of the identity when ``mix`` is false. ``eps``
    is isotropic with standard deviation ``noise`` times the signal's.

    Returns a float32 array of shape ``(n, d)``.
    """
    if not 1 <= rank <= d:
        raise ValueError(f"rank must lie in [1, d={d}], got {rank}")
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    if mix:
        A = rng.standard_normal((rank, d)) / np.sqrt(rank)
    else:
        A = np.eye(rank, d)
    z = rng.standard_normal((n, rank))
    signal = z @ A
    sigma = float(signal.std()) if n else 0.0
    x = signal + rng.standard_normal((n, d)) * (noise * sigma)
    return x.astype(np.float32)


def gen_planted_keys(n, d, group_size, n_levels, seed=0, scale=1.0):
    """Keys that one round of a random commutative codebook reproduces exactly.

    Every ``(a, b)`` pair is used at least once per group when
    ``n >= n_levels**2``, so a perfect fit exists and is identifiable.

    Returns:
        ``(keys, codebook)`` with float64 keys of shape ``(n, d)``.
    """
    from .keyquant import KeyCodebook, KeyQuantConfig, decode_keys

    config = KeyQuantConfig(d, group_size, n_levels, 1)
    rng = np.random.default_rng(seed)
    atoms = rng.standard_normal((1, d // 2, n_levels, 2)) * scale
    cb = KeyCodebook(config, atoms)
    n_cc = n_levels * n_levels
    flat = np.empty((n, config.n_groups), dtype=np.int64)
    for grp in range(config.n_groups):
        base = np.arange(n) % n_cc
        flat[:, grp] = rng.permutation(base)
    codes = np.stack([flat // n_levels, flat % n_levels], axis=-1)[:, None]
    return decode_keys(codes, cb), cb

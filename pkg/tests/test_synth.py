import numpy as np
import pytest

from ropevq.formats import dump_tensor
from ropevq.synth import gen_planted_keys, gen_synth


def test_deterministic_bytes():
    assert dump_tensor(gen_synth(100, 16, 4, seed=7)) == dump_tensor(gen_synth(100, 16, 4, seed=7))
    assert dump_tensor(gen_synth(100, 16, 4, seed=7)) != dump_tensor(gen_synth(100, 16, 4, seed=8))


def test_full_rank_unmixed_covariance_is_identity():
    X = gen_synth(100_000, 16, 16, seed=0, mix=False).astype(np.float64)
    cov = np.cov(X, rowvar=False)
    assert np.max(np.abs(cov - np.eye(16))) <= 0.05


def test_low_rank_spectrum():
    d = 32
    X = gen_synth(20_000, d, d // 4, seed=1).astype(np.float64)
    ev = np.sort(np.linalg.eigvalsh(np.cov(X, rowvar=False)))[::-1]
    assert ev[: d // 4].sum() / ev.sum() >= 0.95


def test_invalid_rank():
    with pytest.raises(ValueError):
        gen_synth(10, 8, 0)
    with pytest.raises(ValueError):
        gen_synth(10, 8, 9)


def test_planted_keys_use_every_pair():
    K, cb = gen_planted_keys(64, 8, 2, 4, seed=0)
    assert K.shape == (64, 8)
    centers = {tuple(np.round(c, 12)) for c in cb.centers(0, 0)}
    rows = {tuple(np.round(r, 12)) for r in K[:, :4]}
    assert rows == centers

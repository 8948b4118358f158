import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.exceptions import NotFittedError

from ropevq.baselines import (
    AsymmetricQuantizer,
    Identity,
    asym_dequantize,
    asym_quantize,
    asym_quantize_rows,
    mse_report,
    random_code_baseline,
    report_to_csv,
    report_to_jsonl,
)
from ropevq.valquant import AdditiveValueQuantizer
from ropevq.synth import gen_synth


def test_two_level_exact():
    codes, p = asym_quantize(np.array([0.0, 1.0]), 1)
    np.testing.assert_array_equal(codes, [0, 1])
    np.testing.assert_array_equal(asym_dequantize(codes, p), [0.0, 1.0])


def test_constant_vector_exact():
    codes, p = asym_quantize(np.full(5, 2.5), 3)
    assert p.scale == 1.0 and not codes.any()
    np.testing.assert_array_equal(asym_dequantize(codes, p), np.full(5, 2.5))


@pytest.mark.parametrize("bits", [1, 2, 3, 4, 8])
def test_uniform_grid_exact(bits):
    t = -1.5 + 0.25 * np.arange(2 ** bits)
    codes, p = asym_quantize(np.random.default_rng(bits).permutation(t), bits)
    np.testing.assert_allclose(asym_dequantize(codes, p), np.random.default_rng(bits).permutation(t),
                               atol=1e-12)


def test_round_half_to_even():
    codes, _ = asym_quantize(np.array([0.0, 0.5, 1.5, 2.5, 3.0]), 2)
    np.testing.assert_array_equal(codes, [0, 0, 2, 2, 3])


def test_rejections():
    with pytest.raises(ValueError):
        asym_quantize(np.array([0.0, np.nan]), 2)
    with pytest.raises(ValueError):
        asym_quantize(np.array([0.0, 1.0]), 0)
    _, p = asym_quantize(np.array([0.0, 1.0]), 2)
    with pytest.raises(ValueError):
        asym_dequantize(np.array([0, 4]), p)
    with pytest.raises(ValueError):
        asym_dequantize(np.array([-1, 0]), p)


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e4, 1e4)),
       st.integers(1, 8))
def test_error_bounded_by_half_step(t, bits):
    codes, p = asym_quantize(t, bits)
    err = np.abs(asym_dequantize(codes, p) - t)
    assert np.all(err <= p.scale / 2 * (1 + 1e-9) + 1e-9)


def test_rows_match_per_vector(rng):
    X = rng.standard_normal((20, 9))
    X[3] = 1.0
    codes, scale, zero = asym_quantize_rows(X, 3)
    for i in range(20):
        c, p = asym_quantize(X[i], 3)
        np.testing.assert_array_equal(codes[i], c)
        assert scale[i] == p.scale and zero[i] == p.zero_point


def test_sixteen_bits_near_lossless():
    X = gen_synth(500, 32, 8, seed=0).astype(np.float64)
    q = AsymmetricQuantizer(16).fit(X)
    assert np.mean((q.reconstruct(X) - X) ** 2) <= 1e-6 * X.var()


def test_report_rows_and_ordering(rng):
    X = gen_synth(400, 16, 4, seed=1)
    methods = [("asym1", AsymmetricQuantizer(1).fit(X)), ("identity", Identity().fit(X)),
               ("asym2", AsymmetricQuantizer(2).fit(X)), ("asym2b", AsymmetricQuantizer(2).fit(X))]
    rows = mse_report(X, methods)
    assert [r.method for r in rows][0] == "identity"
    assert rows[0].mse == 0.0
    keys = [(-r.avg_bit, r.mse) for r in rows]
    assert keys == sorted(keys)
    assert mse_report(X, methods) == rows


def test_report_rejects_untrained():
    X = np.ones((5, 4))
    with pytest.raises(NotFittedError):
        mse_report(X, [("value", AdditiveValueQuantizer())])


def test_report_serialization():
    X = gen_synth(100, 8, 2, seed=1)
    rows = mse_report(X, [("identity", Identity().fit(X)), ("asym2", AsymmetricQuantizer(2).fit(X))])
    csv = report_to_csv(rows).splitlines()
    assert csv[0] == "method,avg_bit,mse"
    assert csv[1].startswith("identity,16.0,0.0")
    lines = report_to_jsonl(rows).splitlines()
    assert len(lines) == 2 and '"method": "asym2"' in lines[1]


def test_trained_value_quantizer_beats_one_bit_asymmetric():
    data = gen_synth(4000, 32, 8, seed=4).astype(np.float64)
    X, held = data[:3000], data[3000:]
    vq = AdditiveValueQuantizer(steps=1500, batch_size=128, random_state=0).fit(X)
    rows = {r.method: r.mse for r in mse_report(held, [("vq", vq), ("asym", AsymmetricQuantizer(1).fit(held))])}
    assert rows["vq"] < rows["asym"]


def test_random_code_baseline_is_lstsq_optimal(rng):
    X = rng.standard_normal((200, 6))
    m = random_code_baseline(X, 6, seed=3)
    S = np.random.default_rng(3).integers(0, 2, (200, 6)).astype(float)
    C = np.linalg.pinv(S) @ X
    assert m == pytest.approx(np.mean((X - S @ C) ** 2), rel=1e-10)

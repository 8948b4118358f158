"""Per-token asymmetric integer quantization and the MSE comparison table."""

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted

MAX_BITS = 16


@dataclass(frozen=True)
class AsymParams:
    bits: int
    scale: float
    zero_point: float


def _check_bits(bits):
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits must lie in [1, {MAX_BITS}], got {bits}")


def asym_quantize(t, bits):
    """Min/max affine quantization of one token vector.

    ``scale = (max - min) / (2**bits - 1)``, ``zero_point = min`` and codes
    are rounded half-to-even. Constant vectors get ``scale = 1`` and all-zero
    codes.
    """
    _check_bits(bits)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("expected a non-empty 1-D vector")
    if not np.all(np.isfinite(t)):
        raise ValueError("input contains non-finite values")
    lo, hi = float(t.min()), float(t.max())
    if hi == lo:
        return np.zeros(t.size, dtype=np.int64), AsymParams(bits, 1.0, lo)
    levels = 2 ** bits - 1
    scale = (hi - lo) / levels
    codes = np.clip(np.rint((t - lo) / scale), 0, levels).astype(np.int64)
    return codes, AsymParams(bits, scale, lo)


def asym_dequantize(codes, params):
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > 2 ** params.bits - 1):
        raise ValueError("code out of range for the given bit width")
    return codes.astype(np.float64) * params.scale + params.zero_point


def asym_quantize_rows(X, bits):
    """Vectorized per-row version; returns ``(codes, scale, zero_point)``."""
    _check_bits(bits)
    X = check_array(X, dtype=np.float64)
    lo = X.min(axis=1, keepdims=True)
    hi = X.max(axis=1, keepdims=True)
    levels = 2 ** bits - 1
    const = hi == lo
    scale = np.where(const, 1.0, (hi - lo) / levels)
    codes = np.clip(np.rint((X - lo) / scale), 0, levels)
    codes[np.broadcast_to(const, X.shape)] = 0
    return codes.astype(np.int64), scale[:, 0], lo[:, 0]


class AsymmetricQuantizer(TransformerMixin, BaseEstimator):
    """Stateless per-token baseline with the estimator interface.

    ``transform`` returns a tuple ``(codes, scale, zero_point)`` so that
    ``inverse_transform`` can rebuild the rows.
    """

    def __init__(self, bits=2):
        self.bits = bits

    def fit(self, X, y=None):
        _check_bits(self.bits)
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return asym_quantize_rows(X, self.bits)

    def inverse_transform(self, packed):
        codes, scale, zero = packed
        return codes * np.asarray(scale)[:, None] + np.asarray(zero)[:, None]

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    @property
    def avg_bit(self):
        return float(self.bits)


class Identity(TransformerMixin, BaseEstimator):
    """No quantization; reported at 16 bits."""

    def fit(self, X, y=None):
        self.n_features_in_ = check_array(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return check_array(X, dtype=np.float64)

    def inverse_transform(self, X):
        return X

    def reconstruct(self, X):
        return self.transform(X)

    avg_bit = 16.0


@dataclass(frozen=True)
class ReportRow:
    method: str
    avg_bit: float
    mse: float

    def to_dict(self):
        return {"method": self.method, "avg_bit": self.avg_bit, "mse": self.mse}


def mse_report(data, methods):
    """Reconstruction MSE of each fitted method on ``data``.

    Args:
        data: ``(N, d)`` evaluation rows.
        methods: iterable of ``(name, estimator)``; each estimator must be
            fitted and expose ``reconstruct`` and ``avg_bit``.

    Returns:
        Rows sorted by ``avg_bit`` descending, then MSE ascending.

    Raises:
        NotFittedError: a method has not been trained.
    """
    X = check_array(data, dtype=np.float64)
    rows = []
    for name, est in methods:
        try:
            check_is_fitted(est)
        except NotFittedError as exc:
            raise NotFittedError(f"method {name!r} is not fitted") from exc
        recon = est.reconstruct(X)
        rows.append(ReportRow(name, float(est.avg_bit), float(np.mean((X - recon) ** 2))))
    rows.sort(key=lambda r: (-r.avg_bit, r.mse, r.method))
    return rows


def report_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "avg_bit", "mse"])
    for r in rows:
        w.writerow([r.method, repr(r.avg_bit), repr(r.mse)])
    return buf.getvalue()


def report_to_jsonl(rows):
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in rows)


def random_code_baseline(X, n_codes, seed=0):
    """MSE of random fair-coin codes with their least-squares codebook.

    This is the floor any trained encoder must beat: the codebook is the
    best possible for codes that carry no information about the rows.
    """
    X = check_array(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    S = rng.integers(0, 2, size=(X.shape[0], n_codes)).astype(np.float64)
    C, *_ = np.linalg.lstsq(S, X, rcond=None)
    return float(np.mean((X - S @ C) ** 2))
